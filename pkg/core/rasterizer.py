"""Tile-based differentiable rasterization of the Gaussian set."""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional

import torch

from core.errors import StaleContextError
from models.camera import Camera
from models.gaussians import LOG_SCALE_FLOOR, GaussianSet, build_covariance, normal_of
from models.schemas import RasterConfig

logger = logging.getLogger(__name__)

OUTPUT_MAPS = ("color", "depth", "normal", "alpha")


@dataclass
class Splat2D:
    """Batched screen-space splats, V of them."""
    mean2d: torch.Tensor
    cov2d: torch.Tensor
    depth: torch.Tensor
    opacity: torch.Tensor
    color: torch.Tensor
    normal: torch.Tensor
    source_index: torch.Tensor

    def __len__(self) -> int:
        return int(self.mean2d.shape[0])

    def conic(self) -> torch.Tensor:
        """(V, 3) upper triangle (a, b, c) of the inverse 2D covariance."""
        a = self.cov2d[:, 0, 0]
        b = self.cov2d[:, 0, 1]
        c = self.cov2d[:, 1, 1]
        det = a * c - b * b
        return torch.stack([c / det, -b / det, a / det], dim=-1)

    def radius(self, sigma: float) -> torch.Tensor:
        """`sigma` standard deviations along the major axis, in pixels."""
        a = self.cov2d[:, 0, 0]
        b = self.cov2d[:, 0, 1]
        c = self.cov2d[:, 1, 1]
        lam = 0.5 * (a + c) + torch.sqrt((0.25 * (a - c) ** 2 + b * b).clamp_min(0.0))
        return sigma * torch.sqrt(lam)

    def take(self, index: torch.Tensor) -> "Splat2D":
        return Splat2D(*(getattr(self, name)[index] for name in (
            "mean2d", "cov2d", "depth", "opacity", "color", "normal", "source_index"
        )))


@dataclass
class BlendResult:
    color: torch.Tensor
    depth: torch.Tensor
    normal: torch.Tensor
    alpha: torch.Tensor
    weights: torch.Tensor
    raw_alpha: torch.Tensor


@dataclass
class RasterContext:
    """Forward state kept for the backward pass and density statistics."""
    mean2d: torch.Tensor
    visible_index: torch.Tensor
    num_primitives: int
    width: int
    height: int
    version: int
    inputs: Dict[str, torch.Tensor]
    consumed: bool = False

    def screen_gradient_norms(self, grad: Optional[torch.Tensor] = None) -> torch.Tensor:
        """
        Per-primitive norm of the loss gradient w.r.t. the projected mean, in NDC units.

        Culled primitives get zero.
        """
        if grad is None:
            grad = self.mean2d.grad if self.mean2d.requires_grad else None
        norms = torch.zeros(self.num_primitives, dtype=torch.float64)
        if grad is None or grad.shape[0] == 0:
            return norms
        scale = torch.tensor([0.5 * self.width, 0.5 * self.height], dtype=grad.dtype)
        norms[self.visible_index] = (grad.detach() * scale).norm(dim=-1).to(torch.float64)
        return norms


@dataclass
class RasterOutput:
    """(H, W, ...) maps plus per-primitive statistics."""
    color: torch.Tensor
    depth: torch.Tensor
    normal: torch.Tensor
    alpha: torch.Tensor
    per_primitive_opacity: torch.Tensor
    context: RasterContext
    visible_count: int = 0

    @property
    def per_primitive_grad(self) -> torch.Tensor:
        return self.context.screen_gradient_norms()

    def normalized_depth(self, min_alpha: float = 0.5) -> torch.Tensor:
        """D / alpha where alpha > min_alpha, NaN elsewhere."""
        alpha = self.alpha.detach()
        depth = self.depth.detach() / alpha.clamp_min(1e-8)
        return torch.where(alpha > min_alpha, depth, torch.full_like(depth, float("nan")))


# ---------------------------
# Projection
# ---------------------------


def project_gaussians(
    means: torch.Tensor,
    scales: torch.Tensor,
    rotations: torch.Tensor,
    camera: Camera,
    cfg: RasterConfig,
):
    """
    EWA projection of every primitive.

    Returns:
        mean2d (N, 2), cov2d (N, 2, 2) with the low-pass floor, depth (N,), visible (N,) bool
    """
    dtype = means.dtype
    rot = camera.rotation(dtype)
    cam = (means - camera.position(dtype)) @ rot
    x, y, z = cam.unbind(-1)
    in_front = z > cfg.near_plane
    z = torch.where(in_front, z, torch.ones_like(z))
    zeros = torch.zeros_like(z)
    jac = torch.stack([
        torch.stack([camera.fx / z, zeros, -camera.fx * x / (z * z)], dim=-1),
        torch.stack([zeros, camera.fy / z, -camera.fy * y / (z * z)], dim=-1),
    ], dim=-2)
    cov3 = build_covariance(scales, rotations)
    cov_cam = rot.T @ cov3 @ rot
    cov2d = jac @ cov_cam @ jac.transpose(-1, -2)
    cov2d = cov2d + cfg.cov_floor * torch.eye(2, dtype=dtype)
    mean2d = torch.stack([camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy], dim=-1)

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    radius = cfg.cull_sigma * torch.sqrt(0.5 * (a + c) + torch.sqrt((0.25 * (a - c) ** 2 + b * b).clamp_min(0.0)))
    u, v = mean2d.detach().unbind(-1)
    r = radius.detach()
    on_screen = (u + r > 0) & (u - r < camera.width) & (v + r > 0) & (v - r < camera.height)
    return mean2d, cov2d, cam[:, 2], in_front & on_screen


def project_gaussian(
    gaussians: GaussianSet, index: int, camera: Camera, cfg: Optional[RasterConfig] = None
) -> Optional[Splat2D]:
    """Project primitive `index` of the set; None when culled."""
    cfg = cfg or RasterConfig()
    rows = torch.tensor([index], dtype=torch.long)
    means = gaussians.means[rows]
    scales = gaussians.scales()[rows]
    rotations = gaussians.rotations()[rows]
    mean2d, cov2d, depth, visible = project_gaussians(means, scales, rotations, camera, cfg)
    if not bool(visible[0]):
        return None
    return Splat2D(
        mean2d=mean2d, cov2d=cov2d, depth=depth,
        opacity=gaussians.opacities()[rows],
        color=gaussians.colors()[rows],
        normal=normal_of(scales, rotations, camera.position(means.dtype), means),
        source_index=rows,
    )


# ---------------------------
# Blending
# ---------------------------


def blend_splats(splats: Splat2D, pixels: torch.Tensor, cfg: RasterConfig) -> BlendResult:
    """
    Front-to-back blend of depth-sorted splats at pixel positions.

    Args:
        splats: V splats, already sorted front to back
        pixels: (P, 2) continuous image coordinates

    Returns:
        BlendResult with (P, ...) maps and (P, V) weights and raw alphas
    """
    dtype = splats.mean2d.dtype
    if len(splats) == 0:
        p = pixels.shape[0]
        empty = torch.zeros(p, 0, dtype=dtype)
        return BlendResult(
            color=torch.zeros(p, 3, dtype=dtype), depth=torch.zeros(p, dtype=dtype),
            normal=torch.zeros(p, 3, dtype=dtype), alpha=torch.zeros(p, dtype=dtype),
            weights=empty, raw_alpha=empty,
        )
    conic = splats.conic()
    delta = pixels.to(dtype).unsqueeze(1) - splats.mean2d.unsqueeze(0)
    dx, dy = delta[..., 0], delta[..., 1]
    power = -0.5 * (conic[:, 0] * dx * dx + conic[:, 2] * dy * dy) - conic[:, 1] * dx * dy
    raw = splats.opacity.unsqueeze(0) * torch.exp(power)
    ones = torch.ones_like(raw[:, :1])
    trans = torch.cumprod(torch.cat([ones, 1.0 - raw[:, :-1]], dim=1), dim=1)
    weights = raw * trans * (trans.detach() >= cfg.min_transmittance).to(dtype)
    return BlendResult(
        color=weights @ splats.color,
        depth=weights @ splats.depth,
        normal=weights @ splats.normal,
        alpha=weights.sum(dim=1),
        weights=weights,
        raw_alpha=raw,
    )


# ---------------------------
# Rasterization
# ---------------------------


def rasterize_tensors(
    means: torch.Tensor,
    log_scales: torch.Tensor,
    quats: torch.Tensor,
    opacity_logits: torch.Tensor,
    color_logits: torch.Tensor,
    camera: Camera,
    cfg: RasterConfig,
    version: int = 0,
) -> RasterOutput:
    """Rasterize raw primitive tensors (the functional form used by gradient checks)."""
    count = means.shape[0]
    dtype = means.dtype
    h, w = camera.height, camera.width
    inputs = {
        "means": means, "log_scales": log_scales, "quats": quats,
        "opacity_logits": opacity_logits, "color_logits": color_logits,
    }
    scales = torch.exp(log_scales.clamp_min(LOG_SCALE_FLOOR))
    rotations = quats / quats.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    mean2d_all, cov2d_all, depth_all, visible = project_gaussians(means, scales, rotations, camera, cfg)
    visible_index = torch.nonzero(visible, as_tuple=False).reshape(-1)

    mean2d = mean2d_all[visible_index]
    if mean2d.requires_grad:
        mean2d.retain_grad()
    normals = normal_of(scales, rotations, camera.position(dtype), means)
    splats = Splat2D(
        mean2d=mean2d,
        cov2d=cov2d_all[visible_index],
        depth=depth_all[visible_index],
        opacity=torch.sigmoid(opacity_logits)[visible_index],
        color=torch.sigmoid(color_logits)[visible_index],
        normal=normals[visible_index],
        source_index=visible_index,
    )
    # stable sort keeps source order among equal depths
    order = torch.sort(splats.depth.detach(), stable=True).indices
    splats = splats.take(order)
    radius = splats.radius(cfg.cull_sigma).detach()
    centres = splats.mean2d.detach()

    opacity_sum = torch.zeros(len(splats), dtype=torch.float64)
    opacity_max = torch.zeros(len(splats), dtype=torch.float64)
    touch_count = torch.zeros(len(splats), dtype=torch.float64)
    pixel_ids: List[torch.Tensor] = []
    tile_maps: List[torch.Tensor] = []
    ts = cfg.tile_size
    for y0 in range(0, h, ts):
        for x0 in range(0, w, ts):
            x1, y1 = min(x0 + ts, w), min(y0 + ts, h)
            ys, xs = torch.meshgrid(
                torch.arange(y0, y1, dtype=dtype), torch.arange(x0, x1, dtype=dtype), indexing="ij"
            )
            pixels = torch.stack([xs.reshape(-1) + 0.5, ys.reshape(-1) + 0.5], dim=-1)
            overlap = (
                (centres[:, 0] + radius >= x0) & (centres[:, 0] - radius <= x1)
                & (centres[:, 1] + radius >= y0) & (centres[:, 1] - radius <= y1)
            )
            local = torch.nonzero(overlap, as_tuple=False).reshape(-1)
            result = blend_splats(splats.take(local), pixels, cfg)
            if local.numel() > 0:
                touched = (result.raw_alpha.detach() >= cfg.alpha_visible).to(torch.float64)
                weights = result.weights.detach().to(torch.float64) * touched
                opacity_sum.index_add_(0, local, weights.sum(dim=0))
                touch_count.index_add_(0, local, touched.sum(dim=0))
                opacity_max[local] = torch.maximum(opacity_max[local], weights.amax(dim=0))
            background = torch.tensor(cfg.background, dtype=dtype)
            color = result.color + (1.0 - result.alpha).unsqueeze(-1) * background
            tile_maps.append(torch.cat([
                color, result.depth.unsqueeze(-1), result.normal, result.alpha.unsqueeze(-1)
            ], dim=-1))
            pixel_ids.append((ys.long() * w + xs.long()).reshape(-1))

    flat = torch.zeros(h * w, 8, dtype=dtype).index_copy(0, torch.cat(pixel_ids), torch.cat(tile_maps))
    maps = flat.reshape(h, w, 8)
    alpha = maps[..., 7]
    normal = maps[..., 4:7]
    unit = normal / normal.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    normal = torch.where((alpha.detach() > 0.5).unsqueeze(-1), unit, normal)

    if cfg.opacity_stat == "max":
        stat = opacity_max
    else:
        stat = opacity_sum / touch_count.clamp_min(1.0)
    per_primitive_opacity = torch.zeros(count, dtype=torch.float64)
    per_primitive_opacity[splats.source_index] = stat

    # grads of mean2d are gathered in visible_index order
    context = RasterContext(
        mean2d=mean2d, visible_index=visible_index, num_primitives=count,
        width=w, height=h, version=version, inputs=inputs,
    )
    return RasterOutput(
        color=maps[..., 0:3], depth=maps[..., 3], normal=normal, alpha=alpha,
        per_primitive_opacity=per_primitive_opacity, context=context,
        visible_count=int(visible_index.numel()),
    )


def rasterize(gaussians: GaussianSet, camera: Camera, cfg: Optional[RasterConfig] = None) -> RasterOutput:
    """Render color, expected depth, blended normal and alpha maps for one camera."""
    cfg = cfg or RasterConfig()
    if len(gaussians) == 0:
        logger.debug("Rasterizing an empty Gaussian set")
    return rasterize_tensors(
        gaussians.means, gaussians.log_scales, gaussians.quats,
        gaussians.opacity_logits, gaussians.color_logits, camera, cfg, gaussians.version,
    )


def rasterize_backward(
    output_grad: Dict[str, torch.Tensor],
    output: RasterOutput,
    gaussians: Optional[GaussianSet] = None,
) -> Dict[str, torch.Tensor]:
    """
    Pull output-map gradients back to every primitive attribute.

    Args:
        output_grad: gradient per output map name ("color", "depth", "normal", "alpha")
        output: the RasterOutput of the matching forward call
        gaussians: the set that was rasterized; its version must be unchanged

    Returns:
        gradient per raw attribute plus "per_primitive_grad" (screen-space norms)
    """
    ctx = output.context
    if ctx.consumed:
        raise StaleContextError("raster context was already consumed by a backward pass")
    if gaussians is not None and gaussians.version != ctx.version:
        raise StaleContextError(
            f"Gaussian set changed since rasterization (version {ctx.version} -> {gaussians.version})"
        )
    names = [name for name in OUTPUT_MAPS if name in output_grad]
    outputs = [getattr(output, name) for name in names]
    grads_out = [output_grad[name].to(o.dtype) for name, o in zip(names, outputs)]
    param_names = list(ctx.inputs)
    inputs = [ctx.inputs[name] for name in param_names]
    track_screen = ctx.mean2d.requires_grad and ctx.mean2d.shape[0] > 0
    if track_screen:
        inputs.append(ctx.mean2d)
    grads = torch.autograd.grad(outputs, inputs, grads_out, allow_unused=True)
    ctx.consumed = True
    result = {
        name: torch.zeros_like(ctx.inputs[name]) if g is None else g
        for name, g in zip(param_names, grads)
    }
    screen = grads[-1] if track_screen else None
    result["per_primitive_grad"] = ctx.screen_gradient_norms(
        screen if screen is not None else torch.zeros(0, 2)
    )
    return result


def visible_fraction(output: RasterOutput) -> float:
    """Fraction of primitives that survived culling."""
    if output.context.num_primitives == 0:
        return 0.0
    return output.visible_count / output.context.num_primitives

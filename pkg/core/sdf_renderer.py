"""Volume rendering of the SDF branch: ray sampling, SDF to alpha, compositing."""
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import torch

from core.errors import SamplingError
from models.camera import Camera, image_rays
from models.schemas import SamplerConfig
from models.sdf_field import SdfField

logger = logging.getLogger(__name__)

MIN_T = 1e-4
PHI_FLOOR = 1e-7


@dataclass
class RaySampleSet:
    """
    Batched samples along R rays.

    t_values (R, S) are strictly increasing per ray; the S - 1 intervals between
    neighbours are what gets composited.
    """
    origins: torch.Tensor
    directions: torch.Tensor
    t_values: torch.Tensor
    guided: torch.Tensor

    @property
    def deltas(self) -> torch.Tensor:
        return self.t_values[:, 1:] - self.t_values[:, :-1]

    @property
    def num_samples(self) -> int:
        return int(self.t_values.shape[1])

    def points(self) -> torch.Tensor:
        """(R, S, 3) world positions."""
        return self.origins.unsqueeze(1) + self.t_values.unsqueeze(-1) * self.directions.unsqueeze(1)


@dataclass
class VolumeRenderOutput:
    """Per-ray composited maps plus per-sample diagnostics."""
    color: torch.Tensor
    depth: torch.Tensor
    normal: torch.Tensor
    alpha: torch.Tensor
    weights: torch.Tensor
    sample_gradients: Optional[torch.Tensor] = None


# ---------------------------
# Sampling
# ---------------------------


def ray_box_intersection(
    origins: torch.Tensor, directions: torch.Tensor, lo: float, hi: float
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Slab test against [lo, hi]^3. Returns t_near, t_far, hit mask."""
    safe = torch.where(directions.abs() < 1e-12, torch.full_like(directions, 1e-12), directions)
    t0 = (lo - origins) / safe
    t1 = (hi - origins) / safe
    t_near = torch.minimum(t0, t1).amax(dim=-1)
    t_far = torch.maximum(t0, t1).amin(dim=-1)
    hit = (t_far > t_near) & (t_far > 0)
    return t_near.clamp_min(0.0), t_far, hit


def stratified_t(
    near: torch.Tensor,
    far: torch.Tensor,
    count: int,
    perturb: bool = True,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """One draw per equal-width bin of [near, far] for each ray; bin midpoints when not perturbed."""
    bins = torch.arange(count, dtype=near.dtype, device=near.device)
    if perturb:
        u = torch.rand(near.shape[0], count, generator=generator, dtype=near.dtype).to(near.device)
    else:
        u = torch.full((near.shape[0], count), 0.5, dtype=near.dtype, device=near.device)
    width = (far - near).unsqueeze(-1) / count
    return near.unsqueeze(-1) + (bins + u) * width


def sample_ray_stratified(
    origins: torch.Tensor,
    directions: torch.Tensor,
    cfg: SamplerConfig,
    sample_count: int,
    generator: Optional[torch.Generator] = None,
    near: Optional[float] = None,
    far: Optional[float] = None,
    domain: Optional[Tuple[float, float]] = None,
) -> RaySampleSet:
    """
    Stratified samples over [near, far].

    Explicit near/far override the config. With `cfg.clip_to_domain` and a domain
    box, rays that hit the box sample only their intersection with it.
    """
    if sample_count < 2:
        raise SamplingError(f"stratified sampling needs at least 2 samples, got {sample_count}")
    rays = origins.shape[0]
    dtype = origins.dtype
    near_t = torch.full((rays,), cfg.near if near is None else near, dtype=dtype)
    far_t = torch.full((rays,), cfg.far if far is None else far, dtype=dtype)
    if near is None and far is None and cfg.clip_to_domain and domain is not None:
        t_near, t_far, hit = ray_box_intersection(origins, directions, domain[0], domain[1])
        clipped_near = torch.maximum(t_near, near_t)
        clipped_far = torch.minimum(t_far, far_t)
        usable = hit & (clipped_near < clipped_far)
        near_t = torch.where(usable, clipped_near, near_t)
        far_t = torch.where(usable, clipped_far, far_t)
    t = stratified_t(near_t, far_t, sample_count, cfg.perturb, generator)
    return RaySampleSet(origins, directions, t, torch.zeros(rays, dtype=torch.bool))


def guided_windows(depth: torch.Tensor, sdf: torch.Tensor, cfg: SamplerConfig):
    """
    Coarse and fine sampling windows around the GS depth.

    Returns:
        (coarse_lo, coarse_hi, fine_lo, fine_hi), each shaped like `depth`
    """
    coarse = torch.clamp(cfg.k_coarse * sdf.abs(), min=cfg.window_floor)
    fine = torch.clamp(cfg.k_fine * sdf.abs(), min=cfg.window_floor)
    return depth - coarse, depth + coarse, depth - fine, depth + fine


def _separate(t: torch.Tensor, min_gap: torch.Tensor) -> torch.Tensor:
    """Push sorted samples apart so each exceeds its predecessor by min_gap."""
    steps = torch.arange(t.shape[1], dtype=t.dtype, device=t.device) * min_gap.unsqueeze(-1)
    return torch.cummax(t - steps, dim=1).values + steps


def sample_ray_guided(
    origins: torch.Tensor,
    directions: torch.Tensor,
    depth: torch.Tensor,
    field: SdfField,
    cfg: SamplerConfig,
    generator: Optional[torch.Generator] = None,
    far: Optional[float] = None,
    domain: Optional[Tuple[float, float]] = None,
) -> RaySampleSet:
    """
    Depth-guided sampling: M samples in a coarse and M in a fine window around D.

    Samples stay strictly increasing inside [MIN_T, far]. Rays whose D is
    non-finite or non-positive fall back to stratified sampling with the same
    2M sample count, clipped to `domain` like any stratified ray.
    """
    far = cfg.far if far is None else far
    m = cfg.samples_per_range
    valid = torch.isfinite(depth) & (depth > 0)
    safe_depth = torch.where(valid, depth, torch.ones_like(depth))
    with torch.no_grad():
        query = origins + safe_depth.unsqueeze(-1) * directions
        s = field(query)[0].to(origins.dtype)
    c_lo, c_hi, f_lo, f_hi = guided_windows(safe_depth, s, cfg)
    t_coarse = stratified_t(c_lo, c_hi, m, cfg.perturb, generator)
    t_fine = stratified_t(f_lo, f_hi, m, cfg.perturb, generator)
    t = torch.cat([t_coarse, t_fine], dim=1).clamp(MIN_T, far)
    t, _ = torch.sort(t, dim=1)
    # gap must stay above the float spacing near `far`
    gap = torch.clamp(1e-6 * (f_hi - f_lo), min=4 * torch.finfo(t.dtype).eps * far)
    t = _separate(t, gap).clamp(max=far)
    # second pass from the far end pulls samples pushed past `far` back below it
    t = -_separate(-t.flip(1), gap).flip(1)
    if not bool(valid.all()):
        fallback = sample_ray_stratified(origins, directions, cfg, 2 * m, generator, domain=domain).t_values
        t = torch.where(valid.unsqueeze(-1), t, fallback)
    return RaySampleSet(origins, directions, t.detach(), valid)


# ---------------------------
# Compositing
# ---------------------------


def neus_alpha(f_i: torch.Tensor, f_next: torch.Tensor, sharpness) -> torch.Tensor:
    """Discrete opacity of the interval between two SDF samples."""
    phi_i = torch.sigmoid(sharpness * f_i)
    phi_next = torch.sigmoid(sharpness * f_next)
    return torch.clamp((phi_i - phi_next) / phi_i.clamp_min(PHI_FLOOR), min=0.0)


def transmittance(alphas: torch.Tensor) -> torch.Tensor:
    """Exclusive cumulative product of (1 - alpha) along the last axis."""
    ones = torch.ones_like(alphas[..., :1])
    return torch.cumprod(torch.cat([ones, 1.0 - alphas[..., :-1]], dim=-1), dim=-1)


def composite(alphas: torch.Tensor, values: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    Front-to-back alpha compositing.

    Args:
        alphas: (R, K)
        values: (R, K, C)

    Returns:
        blended (R, C), weights (R, K), accumulated alpha (R,)
    """
    weights = transmittance(alphas) * alphas
    return (weights.unsqueeze(-1) * values).sum(dim=1), weights, weights.sum(dim=1)


def _empty_output(rays: int, dtype: torch.dtype) -> VolumeRenderOutput:
    zeros = torch.zeros(rays, dtype=dtype)
    return VolumeRenderOutput(
        color=torch.zeros(rays, 3, dtype=dtype), depth=zeros, normal=torch.zeros(rays, 3, dtype=dtype),
        alpha=zeros.clone(), weights=torch.zeros(rays, 0, dtype=dtype),
    )


def volume_render(samples: RaySampleSet, field: SdfField, create_graph: bool = True) -> VolumeRenderOutput:
    """
    Composite the field along each ray.

    Interval i spans samples i and i+1: its opacity comes from the SDF at both ends,
    its depth is the interval midpoint and its color and gradient are the endpoint means.
    """
    rays, count = samples.t_values.shape
    if count < 2:
        logger.warning(f"volume_render called with {count} samples per ray; returning empty output")
        return _empty_output(rays, samples.t_values.dtype)
    points = samples.points().reshape(-1, 3)
    sdf, grad, geo = field.sdf_and_gradient(points, create_graph=create_graph)
    dirs = samples.directions.unsqueeze(1).expand(rays, count, 3).reshape(-1, 3)
    normals = grad / grad.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    colors = field.color(geo, dirs, normals).reshape(rays, count, 3)
    sdf = sdf.reshape(rays, count)
    grad = grad.reshape(rays, count, 3)

    alphas = neus_alpha(sdf[:, :-1], sdf[:, 1:], field.sharpness)
    mids = 0.5 * (samples.t_values[:, :-1] + samples.t_values[:, 1:]).to(alphas.dtype)
    values = torch.cat([
        0.5 * (colors[:, :-1] + colors[:, 1:]),
        0.5 * (grad[:, :-1] + grad[:, 1:]),
        mids.unsqueeze(-1),
    ], dim=-1)
    blended, weights, alpha = composite(alphas, values)
    raw_normal = blended[:, 3:6]
    normal = raw_normal / raw_normal.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    return VolumeRenderOutput(
        color=blended[:, :3], depth=blended[:, 6], normal=normal, alpha=alpha,
        weights=weights, sample_gradients=grad.reshape(-1, 3),
    )


def render_rays(
    field: SdfField,
    origins: torch.Tensor,
    directions: torch.Tensor,
    cfg: SamplerConfig,
    gs_depth: Optional[torch.Tensor] = None,
    stratified_count: Optional[int] = None,
    generator: Optional[torch.Generator] = None,
    create_graph: bool = True,
) -> Tuple[VolumeRenderOutput, RaySampleSet]:
    """Sample (guided when a GS depth is given) and composite a batch of rays."""
    domain = (field.cfg.domain_min, field.cfg.domain_max)
    if gs_depth is not None:
        samples = sample_ray_guided(origins, directions, gs_depth, field, cfg, generator, domain=domain)
    else:
        count = stratified_count or 2 * cfg.samples_per_range
        samples = sample_ray_stratified(origins, directions, cfg, count, generator, domain=domain)
    return volume_render(samples, field, create_graph=create_graph), samples


def render_image(
    field: SdfField,
    camera: Camera,
    cfg: SamplerConfig,
    gs_depth: Optional[torch.Tensor] = None,
    stratified_count: Optional[int] = None,
    chunk: int = 4096,
) -> VolumeRenderOutput:
    """
    Render a full view without building a training graph.

    Args:
        gs_depth: optional (H, W) alpha-normalized GS depth (NaN for background)

    Returns:
        VolumeRenderOutput with per-pixel fields reshaped to (H, W, ...)
    """
    eval_cfg = cfg.model_copy(update={"perturb": False})
    origins, directions = image_rays(camera)
    depth_flat = None if gs_depth is None else gs_depth.reshape(-1).to(origins.dtype)
    parts = []
    for start in range(0, origins.shape[0], chunk):
        stop = start + chunk
        d = None if depth_flat is None else depth_flat[start:stop]
        out, _ = render_rays(
            field, origins[start:stop], directions[start:stop], eval_cfg, d, stratified_count,
            create_graph=False,
        )
        parts.append(out)
    h, w = camera.height, camera.width
    return VolumeRenderOutput(
        color=torch.cat([p.color.detach() for p in parts]).reshape(h, w, 3),
        depth=torch.cat([p.depth.detach() for p in parts]).reshape(h, w),
        normal=torch.cat([p.normal.detach() for p in parts]).reshape(h, w, 3),
        alpha=torch.cat([p.alpha.detach() for p in parts]).reshape(h, w),
        weights=torch.zeros(0),
    )

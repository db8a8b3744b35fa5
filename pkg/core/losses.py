"""Training objectives of both branches and their coupling."""
import logging
from dataclasses import dataclass, fields
from typing import Dict, Optional

import torch
import torch.nn.functional as F

from core.errors import ShapeMismatchError
from models.gaussians import GaussianSet
from models.schemas import LossWeights
from models.sdf_field import SdfField, tangent_perturb

logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _check_shapes(a: torch.Tensor, b: torch.Tensor, name: str):
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{name}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def l1_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over all pixels and channels."""
    _check_shapes(a, b, "l1_loss")
    return (a - b).abs().mean()


def _gaussian_window(dtype: torch.dtype) -> torch.Tensor:
    coords = torch.arange(SSIM_WINDOW, dtype=dtype) - (SSIM_WINDOW - 1) / 2.0
    g = torch.exp(-(coords ** 2) / (2 * SSIM_SIGMA ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(a: torch.Tensor, b: torch.Tensor, data_range: float = 1.0) -> torch.Tensor:
    """
    Mean SSIM of two (H, W, C) images over all valid 11x11 Gaussian windows.

    Returns:
        scalar in [-1, 1]; the loss term is 1 - ssim
    """
    _check_shapes(a, b, "ssim")
    if a.dim() == 2:
        a, b = a.unsqueeze(-1), b.unsqueeze(-1)
    h, w, channels = a.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ShapeMismatchError(f"ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    window = _gaussian_window(a.dtype).expand(channels, 1, SSIM_WINDOW, SSIM_WINDOW)
    x = a.permute(2, 0, 1).unsqueeze(0)
    y = b.permute(2, 0, 1).unsqueeze(0)

    def blur(t):
        return F.conv2d(t, window, groups=channels)

    mu_x, mu_y = blur(x), blur(y)
    sigma_x = blur(x * x) - mu_x ** 2
    sigma_y = blur(y * y) - mu_y ** 2
    sigma_xy = blur(x * y) - mu_x * mu_y
    numerator = (2 * mu_x * mu_y + c1) * (2 * sigma_xy + c2)
    denominator = (mu_x ** 2 + mu_y ** 2 + c1) * (sigma_x + sigma_y + c2)
    return (numerator / denominator).mean()


def volume_regularization(gaussians: GaussianSet) -> torch.Tensor:
    """Mean product of the three decoded scales; 0 for an empty set."""
    if len(gaussians) == 0:
        return torch.zeros(())
    return gaussians.scales().prod(dim=-1).mean()


def eikonal_from_gradients(grad: torch.Tensor) -> torch.Tensor:
    return ((grad.norm(dim=-1) - 1.0) ** 2).mean()


def eikonal_loss(field: SdfField, points: torch.Tensor) -> torch.Tensor:
    """Mean (|grad f| - 1)^2 over points."""
    _, grad, _ = field.sdf_and_gradient(points, create_graph=True)
    return eikonal_from_gradients(grad)


@dataclass
class CurvatureResult:
    loss: torch.Tensor
    used: int
    skipped: int


def curvature_loss(
    field: SdfField,
    points: torch.Tensor,
    epsilon: float,
    generator: Optional[torch.Generator] = None,
) -> CurvatureResult:
    """
    Mean (1 - cos) between normals at each point and at a tangent-plane perturbation of it.

    Points with a zero gradient are skipped and counted.
    """
    _, grad, _ = field.sdf_and_gradient(points, create_graph=True)
    norms = grad.norm(dim=-1)
    usable = norms > 1e-12
    skipped = int((~usable).sum())
    if skipped:
        logger.warning(f"curvature_loss skipped {skipped} points with zero gradient")
    if not bool(usable.any()):
        return CurvatureResult(torch.zeros((), dtype=grad.dtype), 0, skipped)
    normal = grad[usable] / norms[usable].unsqueeze(-1)
    moved = tangent_perturb(points[usable].detach(), normal.detach(), epsilon, generator)
    _, grad_moved, _ = field.sdf_and_gradient(moved, create_graph=True)
    cos = F.cosine_similarity(grad[usable], grad_moved, dim=-1, eps=1e-12)
    return CurvatureResult((1.0 - cos).mean(), int(usable.sum()), skipped)


@dataclass
class MutualTerms:
    depth: torch.Tensor
    normal: torch.Tensor
    pixels: int

    def total(self, weights: LossWeights) -> torch.Tensor:
        return weights.lambda_d * self.depth + weights.lambda_n * self.normal


def mutual_terms(
    depth_gs: torch.Tensor,
    depth_sdf: torch.Tensor,
    normal_gs: torch.Tensor,
    normal_sdf: torch.Tensor,
    mask: torch.Tensor,
) -> MutualTerms:
    """Unweighted masked depth L1 and absolute-cosine normal terms."""
    _check_shapes(depth_gs, depth_sdf, "mutual depth")
    _check_shapes(normal_gs, normal_sdf, "mutual normal")
    if mask.shape != depth_gs.shape:
        raise ShapeMismatchError(f"mask shape {tuple(mask.shape)} does not match depth {tuple(depth_gs.shape)}")
    mask = mask.bool()
    count = int(mask.sum())
    if count == 0:
        logger.warning("mutual_loss: empty foreground mask, returning zero")
        zero = (depth_gs.sum() + depth_sdf.sum()) * 0.0
        return MutualTerms(zero, zero, 0)
    depth_term = (depth_gs[mask] - depth_sdf[mask]).abs().mean()
    cos = F.cosine_similarity(normal_gs[mask], normal_sdf[mask], dim=-1, eps=1e-12)
    normal_term = (1.0 - cos.abs()).mean()
    return MutualTerms(depth_term, normal_term, count)


def mutual_loss(
    depth_gs: torch.Tensor,
    depth_sdf: torch.Tensor,
    normal_gs: torch.Tensor,
    normal_sdf: torch.Tensor,
    mask: torch.Tensor,
    weights: LossWeights,
) -> torch.Tensor:
    """lambda_d * masked mean |D_gs - D_s| + lambda_n * masked mean (1 - |cos(N_gs, N_s)|)."""
    return mutual_terms(depth_gs, depth_sdf, normal_gs, normal_sdf, mask).total(weights)


@dataclass
class LossBreakdown:
    """Every component and the three branch totals."""
    l1_gs: torch.Tensor
    ssim_loss: torch.Tensor
    volume: torch.Tensor
    l1_sdf: torch.Tensor
    eikonal: torch.Tensor
    curvature: torch.Tensor
    mutual: torch.Tensor
    lambda_curv: float
    loss_gs: torch.Tensor
    loss_sdf: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> Dict[str, float]:
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}


def _scalar(value) -> torch.Tensor:
    return value if isinstance(value, torch.Tensor) else torch.tensor(float(value))


def total_losses(
    weights: LossWeights,
    iteration: int = 0,
    l1_gs=0.0,
    ssim_loss=0.0,
    volume=0.0,
    l1_sdf=0.0,
    eikonal=0.0,
    curvature=0.0,
    mutual=0.0,
) -> LossBreakdown:
    """
    Combine components:
        L_g = lambda1 * L1 + (1 - lambda1) * L_SSIM + lambda_vol * L_vol
        L_s = L1 + lambda_eik * L_eik + lambda_curv(iteration) * L_curv
        L = L_g + L_s + L_mutual
    `mutual` is expected already weighted by lambda_d / lambda_n.
    """
    parts = [_scalar(v) for v in (l1_gs, ssim_loss, volume, l1_sdf, eikonal, curvature, mutual)]
    l1_gs, ssim_loss, volume, l1_sdf, eikonal, curvature, mutual = parts
    w_l1, w_ssim = weights.lambda1, 1.0 - weights.lambda1
    if weights.swap_l1_ssim:
        w_l1, w_ssim = w_ssim, w_l1
    lam_curv = weights.lambda_curv(iteration)
    loss_gs = w_l1 * l1_gs + w_ssim * ssim_loss + weights.lambda_vol * volume
    loss_sdf = l1_sdf + weights.lambda_eik * eikonal + lam_curv * curvature
    return LossBreakdown(
        l1_gs=l1_gs, ssim_loss=ssim_loss, volume=volume, l1_sdf=l1_sdf, eikonal=eikonal,
        curvature=curvature, mutual=mutual, lambda_curv=lam_curv,
        loss_gs=loss_gs, loss_sdf=loss_sdf, total=loss_gs + loss_sdf + mutual,
    )

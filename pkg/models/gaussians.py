"""Gaussian primitives of the GS branch and their density-control statistics."""
import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np
import torch
import torch.nn as nn
from scipy.spatial import cKDTree

from core.errors import ShapeMismatchError
from models.schemas import GaussianInitConfig
from utils.geometry import quaternion_to_rotation

logger = logging.getLogger(__name__)

LOG_SCALE_FLOOR = -10.0
PARAM_NAMES = ("means", "log_scales", "quats", "opacity_logits", "color_logits")


def _logit(p: float) -> float:
    return math.log(p / (1.0 - p))


@dataclass
class DensityStats:
    """Running means of screen-space gradient and opacity contribution per primitive."""
    grad_accum: torch.Tensor
    opacity_accum: torch.Tensor
    steps: int = 0

    @classmethod
    def zeros(cls, count: int) -> "DensityStats":
        return cls(torch.zeros(count, dtype=torch.float64), torch.zeros(count, dtype=torch.float64))

    def reset(self):
        self.grad_accum = torch.zeros_like(self.grad_accum)
        self.opacity_accum = torch.zeros_like(self.opacity_accum)
        self.steps = 0


class GaussianSet:
    """
    Structure-of-arrays store of N primitives.

    Trainable tensors are stored raw: log-scales, unnormalized quaternions (w, x, y, z),
    opacity logits and color logits. `version` bumps on every structural edit.
    """

    def __init__(
        self,
        means: torch.Tensor,
        log_scales: torch.Tensor,
        quats: torch.Tensor,
        opacity_logits: torch.Tensor,
        color_logits: torch.Tensor,
    ):
        count = means.shape[0]
        for name, tensor in zip(PARAM_NAMES, (means, log_scales, quats, opacity_logits, color_logits)):
            if tensor.shape[0] != count:
                raise ShapeMismatchError(f"{name} has {tensor.shape[0]} rows, expected {count}")
        self.means = nn.Parameter(means.detach().clone())
        self.log_scales = nn.Parameter(log_scales.detach().clone())
        self.quats = nn.Parameter(quats.detach().clone())
        self.opacity_logits = nn.Parameter(opacity_logits.detach().clone().reshape(-1))
        self.color_logits = nn.Parameter(color_logits.detach().clone())
        self.stats = DensityStats.zeros(count)
        self.version = 0

    def __len__(self) -> int:
        return int(self.means.shape[0])

    # ---------------------------
    # Construction
    # ---------------------------

    @classmethod
    def from_points(
        cls,
        points: torch.Tensor,
        colors: Optional[torch.Tensor] = None,
        initial_opacity: float = 0.1,
    ) -> "GaussianSet":
        """
        Isotropic primitives at `points`, scaled by the mean distance to the 3 nearest neighbours.
        """
        count = points.shape[0]
        dtype = points.dtype
        if count > 1:
            tree = cKDTree(points.detach().cpu().numpy())
            k = min(4, count)
            dists, _ = tree.query(points.detach().cpu().numpy(), k=k)
            mean_dist = np.maximum(dists[:, 1:].mean(axis=1), 1e-7)
        else:
            mean_dist = np.full(count, 0.01)
        log_scale = torch.as_tensor(np.log(mean_dist), dtype=dtype).unsqueeze(-1).repeat(1, 3)
        quats = torch.zeros(count, 4, dtype=dtype)
        quats[:, 0] = 1.0
        opacity = torch.full((count,), _logit(initial_opacity), dtype=dtype)
        if colors is None:
            colors = torch.full((count, 3), 0.5, dtype=dtype)
        color_logits = torch.logit(colors.to(dtype).clamp(1e-4, 1 - 1e-4))
        return cls(points, log_scale, quats, opacity, color_logits)

    @classmethod
    def initialize(
        cls,
        cfg: GaussianInitConfig,
        surface_points: Optional[torch.Tensor] = None,
        domain: tuple = (-1.0, 1.0),
        generator: Optional[torch.Generator] = None,
    ) -> "GaussianSet":
        """Surface-jittered or uniform-random initial set."""
        if cfg.mode == "surface" and surface_points is not None and len(surface_points) > 0:
            index = torch.randint(0, surface_points.shape[0], (cfg.count,), generator=generator)
            points = surface_points[index].float()
            points = points + cfg.surface_jitter * torch.randn(points.shape, generator=generator)
        else:
            lo, hi = domain
            points = lo + (hi - lo) * torch.rand(cfg.count, 3, generator=generator)
        colors = torch.rand(cfg.count, 3, generator=generator)
        logger.info(f"Initialized {cfg.count} Gaussians ({cfg.mode})")
        return cls.from_points(points, colors, cfg.initial_opacity)

    # ---------------------------
    # Decoding
    # ---------------------------

    def scales(self) -> torch.Tensor:
        return torch.exp(self.log_scales.clamp_min(LOG_SCALE_FLOOR))

    def rotations(self) -> torch.Tensor:
        """Unit quaternions."""
        return self.quats / self.quats.norm(dim=-1, keepdim=True).clamp_min(1e-12)

    def opacities(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_logits)

    def colors(self) -> torch.Tensor:
        return torch.sigmoid(self.color_logits)

    def covariances(self) -> torch.Tensor:
        return build_covariance(self.scales(), self.rotations())

    def normals(self, camera_center: Optional[torch.Tensor] = None) -> torch.Tensor:
        return normal_of(self.scales(), self.rotations(), camera_center, self.means)

    # ---------------------------
    # Parameter plumbing
    # ---------------------------

    def parameters(self) -> Dict[str, nn.Parameter]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def replace(self, tensors: Dict[str, torch.Tensor]):
        """Swap every trainable tensor for a new structure (grow/prune); resets stats."""
        count = tensors["means"].shape[0]
        for name in PARAM_NAMES:
            value = tensors[name]
            if value.shape[0] != count:
                raise ShapeMismatchError(f"{name} has {value.shape[0]} rows, expected {count}")
            setattr(self, name, value if isinstance(value, nn.Parameter) else nn.Parameter(value))
        self.stats = DensityStats.zeros(count)
        self.version += 1

    def state_dict(self) -> Dict[str, object]:
        state = {name: getattr(self, name).detach().clone() for name in PARAM_NAMES}
        state["grad_accum"] = self.stats.grad_accum.clone()
        state["opacity_accum"] = self.stats.opacity_accum.clone()
        state["stats_steps"] = self.stats.steps
        state["version"] = self.version
        return state

    @classmethod
    def from_state_dict(cls, state: Dict[str, object]) -> "GaussianSet":
        gaussians = cls(*(state[name] for name in PARAM_NAMES))
        gaussians.stats = DensityStats(
            state["grad_accum"].clone(), state["opacity_accum"].clone(), int(state["stats_steps"])
        )
        gaussians.version = int(state["version"])
        return gaussians


# ---------------------------
# Operations
# ---------------------------


def build_covariance(scales: torch.Tensor, rotations: torch.Tensor) -> torch.Tensor:
    """Batched Sigma = R S S^T R^T for (N, 3) scales and (N, 4) unit quaternions."""
    rot = quaternion_to_rotation(rotations)
    m = rot * scales.unsqueeze(-2)
    return m @ m.transpose(-1, -2)


def covariance(scale: torch.Tensor, rotation: torch.Tensor) -> torch.Tensor:
    """
    3x3 covariance of one primitive.

    A quaternion more than 1e-3 away from unit length is normalized with a warning.
    """
    rotation = torch.as_tensor(rotation, dtype=torch.float64)
    scale = torch.as_tensor(scale, dtype=torch.float64)
    norm = float(rotation.norm())
    if abs(norm - 1.0) > 1e-3:
        logger.warning(f"Non-unit quaternion (norm {norm:.6f}); normalizing")
    rotation = rotation / norm
    return build_covariance(scale.reshape(1, 3), rotation.reshape(1, 4))[0]


def gaussian_value(mean: torch.Tensor, cov: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """exp(-0.5 (x - mu)^T Sigma^-1 (x - mu)); broadcasts over leading axes of x."""
    d = x - mean
    solved = torch.linalg.solve(cov, d.unsqueeze(-1)).squeeze(-1)
    return torch.exp(-0.5 * (d * solved).sum(dim=-1))


def normal_of(
    scales: torch.Tensor,
    rotations: torch.Tensor,
    camera_center: Optional[torch.Tensor] = None,
    means: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """
    Rotation column of the smallest scale (first axis wins ties).

    With a camera centre the normal is flipped to face the camera.
    """
    rot = quaternion_to_rotation(rotations)
    axis = torch.argmin(scales, dim=-1)
    index = axis.reshape(*axis.shape, 1, 1).expand(*axis.shape, 3, 1)
    normal = torch.gather(rot, -1, index).squeeze(-1)
    if camera_center is not None and means is not None:
        to_camera = camera_center.to(means.dtype) - means
        flip = (normal * to_camera).sum(dim=-1, keepdim=True) < 0
        normal = torch.where(flip, -normal, normal)
    return normal


def accumulate_stats(gaussians: GaussianSet, per_primitive_grad: torch.Tensor,
                     per_primitive_opacity: torch.Tensor) -> DensityStats:
    """Fold one step of gradient and opacity contributions into the running means."""
    count = len(gaussians)
    if per_primitive_grad.shape[0] != count or per_primitive_opacity.shape[0] != count:
        raise ShapeMismatchError(
            f"stats for {per_primitive_grad.shape[0]}/{per_primitive_opacity.shape[0]} primitives, set has {count}"
        )
    stats = gaussians.stats
    stats.steps += 1
    grad = per_primitive_grad.detach().to(torch.float64)
    opacity = per_primitive_opacity.detach().to(torch.float64)
    stats.grad_accum = stats.grad_accum + (grad - stats.grad_accum) / stats.steps
    stats.opacity_accum = stats.opacity_accum + (opacity - stats.opacity_accum) / stats.steps
    return stats

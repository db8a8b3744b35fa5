"""Neural SDF branch: multi-resolution hash grid plus SDF and color MLPs."""
import logging
import math
from typing import Callable, Iterator, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from core.errors import NonFiniteInputError
from models.schemas import HashGridConfig, ProgressiveSchedule, SdfFieldConfig
from utils.geometry import tangent_basis

logger = logging.getLogger(__name__)

# spatial hash primes (x prime is 1)
HASH_PRIMES = (1, 2654435761, 805459861)

_CORNERS = torch.tensor(
    [[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=torch.long
)


class HashGridEncoder(nn.Module):
    """
    Multi-resolution hash encoding over an axis-aligned box.

    All level tables live in one parameter tensor; `offsets[l]` is the first row of
    level l. Levels whose dense lattice fits in `table_size` are indexed directly.
    """

    def __init__(
        self,
        cfg: HashGridConfig,
        domain_min: float = -1.0,
        domain_max: float = 1.0,
        clamp_epsilon: float = 1e-6,
        generator: Optional[torch.Generator] = None,
    ):
        super().__init__()
        self.cfg = cfg
        self.domain_min = domain_min
        self.domain_max = domain_max
        self.clamp_epsilon = clamp_epsilon
        self.resolutions = [cfg.resolution(level) for level in range(cfg.levels)]
        self.dense = [(r + 1) ** 3 <= cfg.table_size for r in self.resolutions]
        sizes = [(r + 1) ** 3 if d else cfg.table_size for r, d in zip(self.resolutions, self.dense)]
        self.offsets = [0]
        for size in sizes:
            self.offsets.append(self.offsets[-1] + size)
        self.table = nn.Parameter(torch.empty(self.offsets[-1], cfg.feature_dim))
        with torch.no_grad():
            self.table.uniform_(-1e-4, 1e-4, generator=generator)
        self.register_buffer("active_level_count", torch.tensor(cfg.levels, dtype=torch.long))
        self._warned_clamp = False

    @property
    def output_dim(self) -> int:
        return self.cfg.output_dim

    @property
    def active_levels(self) -> int:
        return int(self.active_level_count)

    def set_active_levels(self, count: int):
        self.active_level_count.fill_(max(1, min(self.cfg.levels, int(count))))

    def lattice_index(self, level: int, ijk: torch.Tensor) -> torch.Tensor:
        """Row of `table` holding integer lattice point(s) `ijk` (..., 3) at `level`."""
        res = self.resolutions[level]
        ijk = ijk.long()
        if self.dense[level]:
            local = ijk[..., 0] + ijk[..., 1] * (res + 1) + ijk[..., 2] * (res + 1) ** 2
        else:
            local = (ijk[..., 0] * HASH_PRIMES[0]) ^ (ijk[..., 1] * HASH_PRIMES[1]) ^ (ijk[..., 2] * HASH_PRIMES[2])
            local = local % self.cfg.table_size
        return local + self.offsets[level]

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        """Map world points into [0, 1]^3, clamping points outside the box."""
        if not bool(torch.isfinite(x).all()):
            raise NonFiniteInputError("encode received non-finite coordinates")
        lo = self.domain_min + self.clamp_epsilon
        hi = self.domain_max - self.clamp_epsilon
        outside = (x < lo) | (x > hi)
        if bool(outside.any()) and not self._warned_clamp:
            logger.warning(f"Clamped {int(outside.any(dim=-1).sum())} queries into the domain box")
            self._warned_clamp = True
        x = x.clamp(lo, hi)
        return (x - self.domain_min) / (self.domain_max - self.domain_min)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """
        Encode points.

        Args:
            x: (N, 3) world points

        Returns:
            (N, levels * feature_dim); inactive levels are exact zeros
        """
        u = self.normalize(x)
        corners = _CORNERS.to(x.device)
        features = []
        for level, res in enumerate(self.resolutions):
            if level >= self.active_levels:
                features.append(torch.zeros(x.shape[0], self.cfg.feature_dim, dtype=self.table.dtype, device=x.device))
                continue
            pos = u * res
            base = pos.detach().floor().clamp(0, res - 1)
            frac = pos - base
            ijk = base.long().unsqueeze(1) + corners  # (N, 8, 3)
            rows = self.lattice_index(level, ijk)
            weights = torch.where(corners.bool(), frac.unsqueeze(1), 1.0 - frac.unsqueeze(1)).prod(dim=-1)
            features.append((self.table[rows] * weights.unsqueeze(-1).to(self.table.dtype)).sum(dim=1))
        return torch.cat(features, dim=-1)


class SdfField(nn.Module):
    """Hash grid + SDF head (value and geometry feature) + color head."""

    def __init__(self, cfg: Optional[SdfFieldConfig] = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg or SdfFieldConfig()
        generator = torch.Generator().manual_seed(seed)
        self.encoder = HashGridEncoder(
            self.cfg.grid, self.cfg.domain_min, self.cfg.domain_max, self.cfg.clamp_epsilon, generator
        )
        in_dim = 3 + self.encoder.output_dim
        hidden = self.cfg.hidden_dim
        self.sdf_head = nn.ModuleList([
            nn.Linear(in_dim, hidden),
            nn.Linear(hidden, hidden),
            nn.Linear(hidden, 1 + self.cfg.geo_feat_dim),
        ])
        color_in = self.cfg.geo_feat_dim + 6
        color_hidden = self.cfg.color_hidden_dim
        self.color_head = nn.Sequential(
            nn.Linear(color_in, color_hidden), nn.ReLU(),
            nn.Linear(color_hidden, color_hidden), nn.ReLU(),
            nn.Linear(color_hidden, 3), nn.Sigmoid(),
        )
        self.log_sharpness = nn.Parameter(torch.tensor(math.log(self.cfg.init_sharpness)))
        self._geometric_init(generator)

    def _geometric_init(self, generator: torch.Generator):
        """Bias the SDF head towards a sphere of radius init_radius_ratio * half-extent."""
        radius = self.cfg.init_radius_ratio * self.cfg.half_extent
        first, middle, last = self.sdf_head
        with torch.no_grad():
            for layer in (first, middle):
                out_dim = layer.weight.shape[0]
                layer.weight.normal_(0.0, math.sqrt(2.0) / math.sqrt(out_dim), generator=generator)
                layer.bias.zero_()
            # grid features start switched off in the first layer
            first.weight[:, 3:].zero_()
            in_dim = last.weight.shape[1]
            last.weight.normal_(math.sqrt(math.pi) / math.sqrt(in_dim), 1e-4, generator=generator)
            last.bias.zero_()
            last.bias[0] = -radius
            for module in self.color_head:
                if isinstance(module, nn.Linear):
                    bound = 1.0 / math.sqrt(module.weight.shape[1])
                    module.weight.uniform_(-bound, bound, generator=generator)
                    module.bias.uniform_(-bound, bound, generator=generator)

    # ---------------------------
    # Parameters
    # ---------------------------

    @property
    def sharpness(self) -> torch.Tensor:
        return self.log_sharpness.exp()

    @property
    def active_levels(self) -> int:
        return self.encoder.active_levels

    def set_active_levels(self, count: int):
        self.encoder.set_active_levels(count)

    def grid_parameters(self) -> Iterator[nn.Parameter]:
        yield self.encoder.table

    def mlp_parameters(self) -> Iterator[nn.Parameter]:
        yield from self.sdf_head.parameters()
        yield from self.color_head.parameters()

    # ---------------------------
    # Evaluation
    # ---------------------------

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Returns:
            sdf (N,), geometry feature (N, geo_feat_dim)
        """
        h = torch.cat([x.to(self.encoder.table.dtype), self.encoder(x)], dim=-1)
        beta = self.cfg.softplus_beta
        for layer in self.sdf_head[:-1]:
            h = F.softplus(layer(h), beta=beta)
        out = self.sdf_head[-1](h)
        return out[:, 0], out[:, 1:]

    def sdf_and_gradient(
        self, x: torch.Tensor, create_graph: bool = True
    ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """
        SDF value, spatial gradient and geometry feature.

        With create_graph the gradient stays differentiable w.r.t. the parameters
        (eikonal, curvature and normal losses need this).
        """
        with torch.enable_grad():
            x = x.detach().requires_grad_(True) if not x.requires_grad else x
            sdf, geo = self(x)
            (grad,) = torch.autograd.grad(
                sdf, x, grad_outputs=torch.ones_like(sdf), create_graph=create_graph
            )
        return sdf, grad, geo

    def color(self, geo: torch.Tensor, directions: torch.Tensor, normals: torch.Tensor) -> torch.Tensor:
        """View-dependent RGB in [0, 1]."""
        dtype = geo.dtype
        return self.color_head(torch.cat([geo, directions.to(dtype), normals.to(dtype)], dim=-1))


# ---------------------------
# Operations
# ---------------------------


def encode(field: SdfField, x: torch.Tensor) -> torch.Tensor:
    """Hash-grid feature vector(s) for world point(s) x."""
    return field.encoder(x.reshape(-1, 3))


def sdf_value(field: SdfField, x: torch.Tensor) -> torch.Tensor:
    """Signed distance at world point(s) x, shape (N,)."""
    return field(x.reshape(-1, 3))[0]


def sdf_gradient(field: SdfField, x: torch.Tensor, create_graph: bool = False) -> torch.Tensor:
    """Analytic spatial gradient of the SDF, shape (N, 3)."""
    return field.sdf_and_gradient(x.reshape(-1, 3), create_graph=create_graph)[1]


def activate_levels(schedule: ProgressiveSchedule, iteration: int, levels: int) -> int:
    """Active level count at `iteration` of the coarse-to-fine schedule."""
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    return min(levels, schedule.initial_active_levels + iteration // schedule.step_iterations)


def tangent_perturb(
    x: torch.Tensor,
    normal: torch.Tensor,
    epsilon: float,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """
    Move each point by `epsilon` along a uniformly random direction of its tangent plane.

    Args:
        x: (N, 3) points
        normal: (N, 3) unit normals
        epsilon: perturbation length

    Returns:
        (N, 3) perturbed points
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    norms = normal.norm(dim=-1)
    if bool((norms == 0).any()):
        raise ValueError("tangent_perturb received a zero normal")
    if bool(((norms - 1).abs() > 1e-4).any()):
        raise ValueError("tangent_perturb expects unit normals")
    u, v = tangent_basis(normal)
    theta = torch.rand(x.shape[0], generator=generator, dtype=x.dtype) * (2 * math.pi)
    t = torch.cos(theta).unsqueeze(-1) * u + torch.sin(theta).unsqueeze(-1) * v
    return x + epsilon * t


def fit_field_to_sdf(
    field: SdfField,
    target: Callable[[torch.Tensor], torch.Tensor],
    iterations: int = 1000,
    batch_size: int = 4096,
    lr: float = 1e-2,
    eikonal_weight: float = 0.1,
    near_surface_std: float = 0.02,
    seed: int = 0,
) -> float:
    """
    Regress the field directly onto an analytic SDF.

    Half of every batch is uniform in the domain, half is projected onto the target's
    zero level and jittered. All levels are enabled for the fit.

    Returns:
        final L1 regression loss
    """
    generator = torch.Generator().manual_seed(seed)
    field.set_active_levels(field.cfg.grid.levels)
    optimizer = torch.optim.Adam(
        [
            {"params": list(field.grid_parameters()), "lr": lr},
            {"params": list(field.sdf_head.parameters()), "lr": lr * 0.1},
        ],
        betas=(0.9, 0.99), eps=1e-15,
    )
    lo, hi = field.cfg.domain_min, field.cfg.domain_max
    loss_value = float("nan")
    for step in range(iterations):
        uniform = lo + (hi - lo) * torch.rand(batch_size, 3, generator=generator)
        with torch.enable_grad():
            seeds = uniform[: batch_size // 2].clone().requires_grad_(True)
            d = target(seeds)
            (g,) = torch.autograd.grad(d.sum(), seeds)
        surface = (seeds - d.unsqueeze(-1) * g).detach()
        surface = surface + near_surface_std * torch.randn(surface.shape, generator=generator)
        points = torch.cat([uniform[batch_size // 2:], surface.clamp(lo, hi)], dim=0)
        sdf, grad, _ = field.sdf_and_gradient(points, create_graph=True)
        regression = (sdf - target(points).detach()).abs().mean()
        eikonal = ((grad.norm(dim=-1) - 1.0) ** 2).mean()
        loss = regression + eikonal_weight * eikonal
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        loss_value = float(regression)
        if step % 200 == 0:
            logger.debug(f"fit step {step}: l1={loss_value:.5f} eik={float(eikonal):.5f}")
    return loss_value

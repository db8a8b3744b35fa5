"""SDF-guided growing and pruning of Gaussian primitives."""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import torch

from core.errors import DensityControlError
from models.gaussians import PARAM_NAMES, GaussianSet
from models.schemas import DensityControlConfig
from models.sdf_field import SdfField
from utils.run_log import append_jsonl

logger = logging.getLogger(__name__)


@dataclass
class DensityEvent:
    """Outcome of one control event."""
    iteration: int
    before: int
    grown: int
    pruned: int
    capped: int
    records: List[Dict[str, object]] = field(default_factory=list)

    @property
    def after(self) -> int:
        return self.before + self.grown - self.pruned

    def summary(self) -> Dict[str, int]:
        return {
            "iteration": self.iteration, "before": self.before, "grown": self.grown,
            "pruned": self.pruned, "capped": self.capped, "after": self.after,
        }


def proximity_weight(s, sigma2: float):
    """exp(-s^2 / (2 sigma^2)); works on floats and tensors."""
    if isinstance(s, torch.Tensor):
        return torch.exp(-(s * s) / (2.0 * sigma2))
    return math.exp(-(s * s) / (2.0 * sigma2))


def growth_score(grad_accum, s, cfg: DensityControlConfig):
    """epsilon_g = grad + omega_g * mu(s); grow when above tau_g."""
    return grad_accum + cfg.omega_g * proximity_weight(s, cfg.sigma2)


def prune_score(opacity_accum, s, cfg: DensityControlConfig):
    """epsilon_p = sigma_a - omega_p * (1 - mu(s)); prune when below tau_p."""
    return opacity_accum - cfg.omega_p * (1.0 - proximity_weight(s, cfg.sigma2))


def query_field(field_: SdfField, points: torch.Tensor, chunk: int = 8192):
    """SDF values and unit gradients at points, without a training graph."""
    values, normals = [], []
    for start in range(0, points.shape[0], chunk):
        sdf, grad, _ = field_.sdf_and_gradient(points[start:start + chunk].detach(), create_graph=False)
        values.append(sdf.detach())
        normals.append((grad / grad.norm(dim=-1, keepdim=True).clamp_min(1e-12)).detach())
    if not values:
        return torch.zeros(0), torch.zeros(0, 3)
    return torch.cat(values), torch.cat(normals)


def _rebuild_optimizer(optimizer: torch.optim.Optimizer, old: torch.nn.Parameter,
                       new: torch.nn.Parameter, keep: torch.Tensor, added: int):
    """Carry Adam moments over for kept rows; new rows start at zero."""
    for group in optimizer.param_groups:
        if not any(p is old for p in group["params"]):
            continue
        state = optimizer.state.pop(old, None)
        if state is not None:
            for key in ("exp_avg", "exp_avg_sq"):
                if key in state:
                    moment = state[key][keep]
                    pad = torch.zeros((added,) + tuple(moment.shape[1:]), dtype=moment.dtype)
                    state[key] = torch.cat([moment, pad], dim=0)
            optimizer.state[new] = state
        group["params"] = [new if p is old else p for p in group["params"]]


def apply_density_control(
    gaussians: GaussianSet,
    field_: SdfField,
    cfg: DensityControlConfig,
    iteration: int = 0,
    optimizer: Optional[torch.optim.Optimizer] = None,
    max_gaussians: Optional[int] = None,
    event_log: Optional[Path] = None,
) -> DensityEvent:
    """
    Grow near-surface primitives and prune far, transparent ones.

    Every primitive with epsilon_g > tau_g spawns one child offset by child_offset times
    its largest scale along -sign(s) * grad f (towards the zero level), with scales
    shrunk by child_scale and opacity inherited. Primitives with epsilon_p < tau_p are
    then removed. Statistics reset afterwards.
    """
    stats = gaussians.stats
    if stats.steps < cfg.interval:
        raise DensityControlError(
            f"density control needs {cfg.interval} accumulated iterations, have {stats.steps}"
        )
    before = len(gaussians)
    s, normals = query_field(field_, gaussians.means)
    s64 = s.to(torch.float64)
    eps_g = growth_score(stats.grad_accum, s64, cfg)
    eps_p = prune_score(stats.opacity_accum, s64, cfg)
    grow = eps_g > cfg.tau_g
    prune = eps_p < cfg.tau_p

    keep = torch.nonzero(~prune, as_tuple=False).reshape(-1)
    growers = torch.nonzero(grow, as_tuple=False).reshape(-1)
    capped = 0
    if max_gaussians is not None:
        room = max(0, max_gaussians - keep.numel())
        if growers.numel() > room:
            capped = growers.numel() - room
            # highest growth scores win; ties resolved by index
            order = torch.sort(-eps_g[growers], stable=True).indices[:room]
            growers = torch.sort(growers[order]).values
    grown_mask = torch.zeros(before, dtype=torch.bool)
    grown_mask[growers] = True

    with torch.no_grad():
        dtype = gaussians.means.dtype
        direction = -torch.sign(s[growers]).to(dtype)
        direction = torch.where(direction == 0, torch.ones_like(direction), direction)
        parent_scale = gaussians.scales()[growers].amax(dim=-1)
        offset = (cfg.child_offset * parent_scale * direction).unsqueeze(-1) * normals[growers].to(dtype)
        children = {
            "means": gaussians.means[growers] + offset,
            "log_scales": gaussians.log_scales[growers] + math.log(cfg.child_scale),
            "quats": gaussians.quats[growers],
            "opacity_logits": gaussians.opacity_logits[growers],
            "color_logits": gaussians.color_logits[growers],
        }
        new_tensors = {}
        for name in PARAM_NAMES:
            old = getattr(gaussians, name)
            new_tensors[name] = torch.nn.Parameter(torch.cat([old[keep], children[name]], dim=0))
    if optimizer is not None:
        for name in PARAM_NAMES:
            _rebuild_optimizer(optimizer, getattr(gaussians, name), new_tensors[name], keep, growers.numel())
    gaussians.replace(new_tensors)

    records = []
    for index in range(before):
        g, p = bool(grown_mask[index]), bool(prune[index])
        if g and p:
            decision = "grow_prune"
        elif g:
            decision = "grow"
        elif p:
            decision = "prune"
        elif bool(grow[index]):
            decision = "grow_capped"
        else:
            decision = "keep"
        records.append({
            "iteration": iteration, "index": index, "s": float(s[index]),
            "eps_g": float(eps_g[index]), "eps_p": float(eps_p[index]), "decision": decision,
        })
    event = DensityEvent(iteration, before, int(growers.numel()), int(prune.sum()), capped, records)
    if event_log is not None:
        append_jsonl(event_log, records)
    logger.info(
        f"Density control @ {iteration}: {before} -> {event.after} "
        f"(+{event.grown} / -{event.pruned}, capped {capped})"
    )
    return event

"""Three-phase optimization of the GS and SDF branches."""
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional

import torch

from core.density_control import apply_density_control
from core.errors import TrainingDivergedError
from core.losses import (
    curvature_loss,
    eikonal_from_gradients,
    l1_loss,
    mutual_terms,
    ssim,
    total_losses,
    volume_regularization,
)
from core.rasterizer import RasterOutput, rasterize
from core.sdf_renderer import render_rays
from data.checkpoint import load_checkpoint, save_checkpoint
from data.dataset import SceneDataset, View
from models.camera import pixel_cosines, pixel_rays
from models.gaussians import GaussianSet, accumulate_stats
from models.schemas import TrainConfig
from models.sdf_field import SdfField, activate_levels
from utils.run_log import CsvLog, generate_run_id, log_event

logger = logging.getLogger(__name__)

METRIC_COLUMNS = [
    "iteration", "phase", "view", "l1_gs", "ssim_loss", "volume", "l1_sdf", "eikonal",
    "curvature", "lambda_curv", "mutual_depth", "mutual_normal", "mutual", "loss_gs",
    "loss_sdf", "total", "num_gaussians", "active_levels", "sharpness", "lr_means",
]

GS_PHASE = "gs_warmup"
SDF_PHASE = "sdf_warmup"
JOINT_PHASE = "joint"


@dataclass
class TrainResult:
    checkpoint: Path
    metrics: Path
    iterations: int
    final: Dict[str, float]


def scene_extent(dataset: SceneDataset) -> float:
    """1.1 x the largest camera distance from the mean camera centre."""
    centres = torch.stack([cam.position(torch.float64) for cam in dataset.cameras])
    return 1.1 * float((centres - centres.mean(dim=0)).norm(dim=-1).max())


class Trainer:
    """Owns both branches, their optimizers and the iteration counter."""

    def __init__(self, dataset: SceneDataset, cfg: TrainConfig, run_dir: Path, run_id: Optional[str] = None):
        self.dataset = dataset
        self.cfg = cfg
        self.run_dir = Path(run_dir)
        self.run_id = run_id or generate_run_id()
        torch.manual_seed(cfg.seed)
        self.generator = torch.Generator().manual_seed(cfg.seed)
        self.iteration = 0
        self.extent = scene_extent(dataset)

        self.field = SdfField(cfg.field, seed=cfg.seed)
        self.field.set_active_levels(cfg.schedule.initial_active_levels)
        surface = dataset.surface_points(max(cfg.init.count, 1000), seed=cfg.seed) if cfg.init.mode == "surface" else None
        self.gaussians = GaussianSet.initialize(
            cfg.init, surface, (cfg.field.domain_min, cfg.field.domain_max), self.generator
        )
        self.sdf_optimizer = self._build_sdf_optimizer()
        self.gs_optimizer = self._build_gs_optimizer()
        self.metrics = CsvLog(self.run_dir / "metrics.csv", METRIC_COLUMNS)
        self.density_log = self.run_dir / "density_events.jsonl"

    # ---------------------------
    # Optimizers and schedules
    # ---------------------------

    def _adam_kwargs(self):
        return {"betas": (self.cfg.adam.beta1, self.cfg.adam.beta2), "eps": self.cfg.adam.eps}

    def _build_sdf_optimizer(self) -> torch.optim.Optimizer:
        lr = self.cfg.lr
        return torch.optim.Adam([
            {"params": list(self.field.grid_parameters()), "lr": lr.hash_grid, "name": "hash_grid"},
            {"params": list(self.field.mlp_parameters()), "lr": lr.mlp, "name": "mlp"},
            {"params": [self.field.log_sharpness], "lr": lr.sharpness, "name": "sharpness"},
        ], **self._adam_kwargs())

    def _build_gs_optimizer(self) -> torch.optim.Optimizer:
        lr = self.cfg.lr
        g = self.gaussians
        return torch.optim.Adam([
            {"params": [g.means], "lr": lr.means * self.extent, "name": "means"},
            {"params": [g.log_scales], "lr": lr.scales, "name": "log_scales"},
            {"params": [g.quats], "lr": lr.rotations, "name": "quats"},
            {"params": [g.opacity_logits], "lr": lr.opacity, "name": "opacity_logits"},
            {"params": [g.color_logits], "lr": lr.colors, "name": "color_logits"},
        ], **self._adam_kwargs())

    def phase(self, iteration: int) -> str:
        cfg = self.cfg
        if iteration < cfg.gs_warmup_iters:
            return GS_PHASE
        if iteration < cfg.gs_warmup_iters + cfg.sdf_warmup_iters:
            return SDF_PHASE
        return JOINT_PHASE

    def sdf_iteration(self, iteration: int) -> int:
        """Iterations the SDF branch has trained for (warm-up plus joint)."""
        return max(0, iteration - self.cfg.gs_warmup_iters)

    def gs_iteration(self, iteration: int) -> int:
        """Iterations the GS branch has trained for (warm-up plus joint)."""
        cfg = self.cfg
        if iteration < cfg.gs_warmup_iters:
            return iteration
        return cfg.gs_warmup_iters + max(0, iteration - cfg.gs_warmup_iters - cfg.sdf_warmup_iters)

    def means_lr(self, iteration: int) -> float:
        """Exponential decay from lr.means to lr.means_final (both times the scene extent)."""
        cfg = self.cfg
        span = max(1, cfg.gs_warmup_iters + cfg.joint_iters)
        t = min(1.0, self.gs_iteration(iteration) / span)
        log_lr = (1 - t) * math.log(cfg.lr.means) + t * math.log(cfg.lr.means_final)
        return math.exp(log_lr) * self.extent

    # ---------------------------
    # Branch steps
    # ---------------------------

    def _pick_view(self) -> View:
        pick = int(torch.randint(0, len(self.dataset.train_indices), (1,), generator=self.generator))
        return self.dataset.view(self.dataset.train_indices[pick])

    def _gs_losses(self, view: View) -> Dict[str, object]:
        raster = rasterize(self.gaussians, view.camera, self.cfg.raster)
        return {
            "raster": raster,
            "l1_gs": l1_loss(raster.color, view.color),
            "ssim_loss": 1.0 - ssim(raster.color, view.color),
            "volume": volume_regularization(self.gaussians),
        }

    def _ray_batch(self, view: View):
        cam = view.camera
        count = cam.width * cam.height
        index = torch.randint(0, count, (self.cfg.rays_per_step,), generator=self.generator)
        origins, directions = pixel_rays(cam, (index % cam.width).float(), (index // cam.width).float())
        return index, origins, directions

    def _sdf_losses(self, view: View, index, origins, directions, gs_depth=None) -> Dict[str, object]:
        cfg = self.cfg
        output, samples = render_rays(
            self.field, origins, directions, cfg.sampler, gs_depth, generator=self.generator,
        )
        target = view.color.reshape(-1, 3)[index]
        lo, hi = cfg.field.domain_min, cfg.field.domain_max
        uniform = lo + (hi - lo) * torch.rand(cfg.eikonal_points, 3, generator=self.generator)
        _, uniform_grad, _ = self.field.sdf_and_gradient(uniform, create_graph=True)
        eikonal = eikonal_from_gradients(torch.cat([output.sample_gradients, uniform_grad], dim=0))
        points = samples.points().reshape(-1, 3).detach()
        pick = torch.randint(0, points.shape[0], (cfg.curvature_points,), generator=self.generator)
        curvature = curvature_loss(self.field, points[pick], cfg.losses.curvature_epsilon, self.generator)
        return {
            "sdf": output,
            "samples": samples,
            "l1_sdf": l1_loss(output.color, target.to(output.color.dtype)),
            "eikonal": eikonal,
            "curvature": curvature.loss,
        }

    def _mutual(self, raster: RasterOutput, view: View, index, sdf_out):
        """Masked depth/normal agreement on the ray batch; GS depth converted to ray distance."""
        cos = pixel_cosines(view.camera).reshape(-1)[index]
        depth_gs = raster.depth.reshape(-1)[index] / cos
        normal_gs = raster.normal.reshape(-1, 3)[index]
        alpha_gs = raster.alpha.reshape(-1)[index].detach()
        mask = (alpha_gs > self.cfg.foreground_alpha) & (sdf_out.alpha.detach() >= self.cfg.sdf_background_alpha)
        return mutual_terms(depth_gs, sdf_out.depth, normal_gs, sdf_out.normal, mask)

    def _guidance_depth(self, raster: RasterOutput, view: View, index) -> torch.Tensor:
        """Alpha-normalized GS depth along each batch ray; NaN on background."""
        depth = raster.normalized_depth(self.cfg.foreground_alpha) / pixel_cosines(view.camera)
        return depth.reshape(-1)[index]

    # ---------------------------
    # Iteration
    # ---------------------------

    def step(self) -> Dict[str, float]:
        """Run one iteration of whatever phase the counter is in."""
        cfg = self.cfg
        it = self.iteration
        phase = self.phase(it)
        train_gs = cfg.train_gs and phase in (GS_PHASE, JOINT_PHASE)
        train_sdf = cfg.train_sdf and phase in (SDF_PHASE, JOINT_PHASE)
        sdf_it = self.sdf_iteration(it)
        if train_sdf:
            self.field.set_active_levels(activate_levels(cfg.schedule, sdf_it, cfg.field.grid.levels))
        for group in self.gs_optimizer.param_groups:
            if group["name"] == "means":
                group["lr"] = self.means_lr(it)

        view = self._pick_view()
        components: Dict[str, object] = {}
        raster = None
        if train_gs:
            gs = self._gs_losses(view)
            raster = gs.pop("raster")
            components.update(gs)
        mutual = None
        if train_sdf:
            index, origins, directions = self._ray_batch(view)
            guided = phase == JOINT_PHASE and cfg.use_guided_sampling and raster is not None
            gs_depth = self._guidance_depth(raster, view, index) if guided else None
            sdf = self._sdf_losses(view, index, origins, directions, gs_depth)
            components.update({k: sdf[k] for k in ("l1_sdf", "eikonal", "curvature")})
            if phase == JOINT_PHASE and raster is not None:
                mutual = self._mutual(raster, view, index, sdf["sdf"])
                components["mutual"] = mutual.total(cfg.losses)

        breakdown = total_losses(cfg.losses, sdf_it if train_sdf else 0, **components)
        if not torch.isfinite(breakdown.total):
            self._dump_divergence(it, phase, view, breakdown)
        self.gs_optimizer.zero_grad(set_to_none=True)
        self.sdf_optimizer.zero_grad(set_to_none=True)
        if breakdown.total.requires_grad:
            breakdown.total.backward()
        if train_gs:
            self.gs_optimizer.step()
        if train_sdf:
            self.sdf_optimizer.step()

        if phase == JOINT_PHASE and train_gs and raster is not None:
            accumulate_stats(self.gaussians, raster.per_primitive_grad, raster.per_primitive_opacity)
            self._maybe_density_control(it)

        row = breakdown.as_floats()
        row.update({
            "iteration": it, "phase": phase, "view": view.index,
            "mutual_depth": float(mutual.depth) if mutual is not None else 0.0,
            "mutual_normal": float(mutual.normal) if mutual is not None else 0.0,
            "num_gaussians": len(self.gaussians), "active_levels": self.field.active_levels,
            "sharpness": float(self.field.sharpness), "lr_means": self.means_lr(it),
        })
        self.metrics.append(row)
        self.iteration += 1
        return row

    def _maybe_density_control(self, it: int):
        cfg = self.cfg
        if self.gaussians.stats.steps < cfg.density.interval:
            return
        event = apply_density_control(
            self.gaussians, self.field, cfg.density, iteration=it, optimizer=self.gs_optimizer,
            max_gaussians=cfg.init.max_gaussians, event_log=self.density_log,
        )
        log_event(self.run_id, "density_control", **event.summary())

    def _dump_divergence(self, it: int, phase: str, view: View, breakdown):
        path = self.run_dir / f"diverged_{it:06d}.pt"
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({
            "iteration": it, "phase": phase, "view": view.index,
            "components": {k: float(v) for k, v in breakdown.as_floats().items()},
            "gaussians": self.gaussians.state_dict(), "field": self.field.state_dict(),
        }, path)
        log_event(self.run_id, "diverged", iteration=it, phase=phase, dump=str(path))
        raise TrainingDivergedError(f"non-finite loss at iteration {it} ({phase}); diagnostics in {path}")

    # ---------------------------
    # Checkpoints
    # ---------------------------

    def checkpoint_path(self, iteration: int) -> Path:
        return self.run_dir / "checkpoints" / f"iter_{iteration:06d}.pt"

    def save(self, path: Optional[Path] = None) -> Path:
        path = path or self.checkpoint_path(self.iteration)
        save_checkpoint(path, {
            "iteration": self.iteration,
            "config": self.cfg.model_dump(mode="json"),
            "config_hash": self.cfg.config_hash(),
            "field": self.field.state_dict(),
            "gaussians": self.gaussians.state_dict(),
            "sdf_optimizer": self.sdf_optimizer.state_dict(),
            "gs_optimizer": self.gs_optimizer.state_dict(),
            "generator": self.generator.get_state(),
            "torch_rng": torch.get_rng_state(),
            "run_id": self.run_id,
        })
        log_event(self.run_id, "checkpoint", iteration=self.iteration, path=str(path))
        return path

    def restore(self, path: Path):
        """Load weights, optimizer moments, statistics, RNG state and the counter."""
        payload = load_checkpoint(path)
        if payload["config_hash"] != self.cfg.config_hash():
            logger.warning("Resuming with a config that differs from the checkpoint's")
        self.field.load_state_dict(payload["field"])
        self.gaussians = GaussianSet.from_state_dict(payload["gaussians"])
        self.sdf_optimizer = self._build_sdf_optimizer()
        self.sdf_optimizer.load_state_dict(payload["sdf_optimizer"])
        self.gs_optimizer = self._build_gs_optimizer()
        self.gs_optimizer.load_state_dict(payload["gs_optimizer"])
        self.generator.set_state(payload["generator"])
        torch.set_rng_state(payload["torch_rng"])
        self.iteration = int(payload["iteration"])
        self.metrics.truncate_after(self.iteration - 1)
        log_event(self.run_id, "resume", iteration=self.iteration, path=str(path))

    # ---------------------------
    # Driver
    # ---------------------------

    def run(self, until: Optional[int] = None) -> TrainResult:
        total = self.cfg.total_iters if until is None else min(until, self.cfg.total_iters)
        last_phase = None
        row: Dict[str, float] = {}
        while self.iteration < total:
            phase = self.phase(self.iteration)
            if phase != last_phase:
                log_event(self.run_id, "phase_start", phase=phase, iteration=self.iteration)
                if self.iteration == self.cfg.gs_warmup_iters + self.cfg.sdf_warmup_iters:
                    self.gaussians.stats.reset()
                last_phase = phase
            row = self.step()
            if self.iteration % self.cfg.checkpoint_interval == 0 and self.iteration < total:
                self.save()
            if self.iteration % 100 == 0:
                logger.info(f"[{row['phase']}] iter {self.iteration}/{total} loss={row['total']:.5f} gaussians={len(self.gaussians)}")
        checkpoint = self.save()
        return TrainResult(checkpoint, self.metrics.path, self.iteration, row)


def train(
    dataset: SceneDataset,
    cfg: TrainConfig,
    run_dir: Path,
    resume: Optional[Path] = None,
    run_id: Optional[str] = None,
    until: Optional[int] = None,
) -> TrainResult:
    """Train both branches through all phases and write checkpoints plus metrics."""
    if len(dataset.train_indices) < 2:
        raise ValueError("training needs at least 2 training views")
    trainer = Trainer(dataset, cfg, run_dir, run_id)
    if resume is not None:
        trainer.restore(resume)
    else:
        # a fresh run starts its logs from scratch
        for path in (trainer.metrics.path, trainer.density_log):
            if path.exists():
                path.unlink()
    log_event(trainer.run_id, "train_start", name=cfg.name, iterations=cfg.total_iters, seed=cfg.seed)
    result = trainer.run(until)
    log_event(trainer.run_id, "train_finish", iterations=result.iterations, checkpoint=str(result.checkpoint))
    return result


def load_trained(path: Path):
    """Rebuild (config, field, gaussians) from a checkpoint for rendering and evaluation."""
    payload = load_checkpoint(path)
    cfg = TrainConfig.model_validate(payload["config"])
    field = SdfField(cfg.field, seed=cfg.seed)
    field.load_state_dict(payload["field"])
    gaussians = GaussianSet.from_state_dict(payload["gaussians"])
    return cfg, field, gaussians

"""Ablation and baseline variants, evaluation of trained runs and the sampling benchmark."""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional

import torch

from core.mesh import marching_cubes
from core.metrics import image_metrics, mesh_chamfer, psnr_for_csv
from core.rasterizer import rasterize
from core.scenes import AnalyticScene, sphere_trace
from core.sdf_renderer import VolumeRenderOutput, render_image, render_rays
from data.dataset import SceneDataset
from models.camera import Camera, ImageBuffer, image_rays, pixel_cosines
from models.gaussians import GaussianSet
from models.schemas import TrainConfig
from models.sdf_field import SdfField

logger = logging.getLogger(__name__)

FULL = "full"
NO_GUIDED_SAMPLING = "no-guided-sampling"
NO_GEOMETRY_DENSITY_CONTROL = "no-geometry-density-control"
NO_MUTUAL_SUPERVISION = "no-mutual-supervision"
GS_ONLY = "gs-only"
SDF_ONLY = "sdf-only"

ABLATIONS = (NO_GUIDED_SAMPLING, NO_GEOMETRY_DENSITY_CONTROL, NO_MUTUAL_SUPERVISION)
BASELINES = (GS_ONLY, SDF_ONLY)

# nested config updates per variant
_SWITCHES = {
    NO_GUIDED_SAMPLING: {"use_guided_sampling": False},
    NO_GEOMETRY_DENSITY_CONTROL: {"density": {"omega_g": 0.0, "omega_p": 0.0}},
    NO_MUTUAL_SUPERVISION: {"losses": {"lambda_d": 0.0, "lambda_n": 0.0}},
    GS_ONLY: {"train_sdf": False, "sdf_warmup_iters": 0, "density": {"omega_g": 0.0, "omega_p": 0.0}},
    SDF_ONLY: {"train_gs": False, "gs_warmup_iters": 0, "use_guided_sampling": False},
}

EVAL_COLUMNS = [
    "variant", "view", "psnr_gs", "ssim_gs", "psnr_sdf", "ssim_sdf", "depth_gap",
]
SUMMARY_COLUMNS = [
    "variant", "psnr_gs", "ssim_gs", "psnr_sdf", "ssim_sdf", "depth_gap", "chamfer",
    "num_gaussians", "iterations",
]


def _merge(tree: Dict[str, object], update: Dict[str, object]) -> Dict[str, object]:
    out = dict(tree)
    for key, value in update.items():
        if isinstance(value, dict):
            out[key] = _merge(dict(out.get(key, {})), value)
        else:
            out[key] = value
    return out


def apply_switch(cfg: TrainConfig, name: Optional[str] = None) -> TrainConfig:
    """Config of one named variant; no name (or "full") returns the config unchanged."""
    if name is None or name == FULL:
        return cfg
    if name not in _SWITCHES:
        raise ValueError(f"Unknown variant: {name}")
    tree = _merge(cfg.model_dump(), _SWITCHES[name])
    tree["name"] = name
    return TrainConfig.model_validate(tree)


def ablation_switches(cfg: TrainConfig) -> Dict[str, TrainConfig]:
    """The three module ablations of a base config."""
    return {name: apply_switch(cfg, name) for name in ABLATIONS}


def experiment_configs(cfg: TrainConfig, baselines: bool = False) -> Dict[str, TrainConfig]:
    """Full config first, then the ablations, then optionally the single-branch baselines."""
    variants = {FULL: cfg}
    variants.update(ablation_switches(cfg))
    if baselines:
        variants.update({name: apply_switch(cfg, name) for name in BASELINES})
    return variants


# ---------------------------
# Rendering trained branches
# ---------------------------


@dataclass
class BranchRender:
    """(H, W, ...) maps of one branch; depth is distance along the pixel ray."""
    color: torch.Tensor
    depth: torch.Tensor
    normal: torch.Tensor
    alpha: torch.Tensor

    def buffers(self) -> Dict[str, ImageBuffer]:
        return {kind: ImageBuffer(getattr(self, kind), kind=kind) for kind in ("color", "depth", "normal", "alpha")}


def render_gs(gaussians: GaussianSet, camera: Camera, cfg: TrainConfig) -> BranchRender:
    with torch.no_grad():
        out = rasterize(gaussians, camera, cfg.raster)
    cos = pixel_cosines(camera, out.depth.dtype)
    return BranchRender(
        color=out.color.detach(),
        depth=out.normalized_depth(0.0).nan_to_num(0.0) / cos,
        normal=out.normal.detach(),
        alpha=out.alpha.detach(),
    )


def render_sdf(
    field: SdfField,
    camera: Camera,
    cfg: TrainConfig,
    gaussians: Optional[GaussianSet] = None,
) -> BranchRender:
    """SDF branch view, guided by the GS depth when the run trained both branches with guidance."""
    guide = None
    if gaussians is not None and cfg.train_gs and cfg.use_guided_sampling:
        with torch.no_grad():
            raster = rasterize(gaussians, camera, cfg.raster)
        guide = raster.normalized_depth(cfg.foreground_alpha) / pixel_cosines(camera)
    field.set_active_levels(cfg.field.grid.levels)
    out: VolumeRenderOutput = render_image(field, camera, cfg.sampler, guide)
    depth = out.depth / out.alpha.clamp_min(1e-8)
    return BranchRender(
        color=out.color, depth=torch.where(out.alpha > 0, depth, torch.zeros_like(depth)),
        normal=out.normal, alpha=out.alpha,
    )


def render_branch(branch: str, cfg: TrainConfig, field: SdfField, gaussians: GaussianSet, camera: Camera) -> BranchRender:
    if branch == "gs":
        return render_gs(gaussians, camera, cfg)
    if branch == "sdf":
        return render_sdf(field, camera, cfg, gaussians)
    raise ValueError(f"Unknown branch: {branch}")


def depth_gap(a: BranchRender, b: BranchRender, min_alpha: float = 0.5) -> float:
    """Mean absolute depth difference where both branches are opaque; 0 with no overlap."""
    mask = (a.alpha > min_alpha) & (b.alpha > min_alpha)
    if not bool(mask.any()):
        return 0.0
    return float((a.depth[mask].double() - b.depth[mask].double()).abs().mean())


# ---------------------------
# Evaluation
# ---------------------------


def evaluate_run(
    dataset: SceneDataset,
    cfg: TrainConfig,
    field: SdfField,
    gaussians: GaussianSet,
    variant: str = FULL,
    chamfer_points: int = 100_000,
    mesh_resolution: Optional[int] = None,
) -> Dict[str, object]:
    """
    Image metrics of both branches on every held-out view plus mesh Chamfer distance.

    Returns:
        {"views": per-view rows, "summary": averaged row, "mesh": TriangleMesh}
    """
    rows: List[Dict[str, object]] = []
    for index in dataset.test_indices:
        view = dataset.view(index)
        gs = render_gs(gaussians, view.camera, cfg)
        sdf = render_sdf(field, view.camera, cfg, gaussians)
        target = ImageBuffer(view.color)
        gs_metrics = image_metrics(gs.buffers()["color"], target)
        sdf_metrics = image_metrics(sdf.buffers()["color"], target)
        rows.append({
            "variant": variant, "view": index,
            "psnr_gs": psnr_for_csv(gs_metrics["psnr"]), "ssim_gs": gs_metrics["ssim"],
            "psnr_sdf": psnr_for_csv(sdf_metrics["psnr"]), "ssim_sdf": sdf_metrics["ssim"],
            "depth_gap": depth_gap(gs, sdf),
        })
    mesh = marching_cubes(field, mesh_resolution or cfg.mesh_resolution)
    reference = dataset.surface_points(chamfer_points).numpy()
    chamfer = mesh_chamfer(mesh, reference, chamfer_points, seed=cfg.seed) if not mesh.is_empty else float("inf")
    summary: Dict[str, object] = {"variant": variant, "chamfer": chamfer, "num_gaussians": len(gaussians)}
    for key in ("psnr_gs", "ssim_gs", "psnr_sdf", "ssim_sdf", "depth_gap"):
        summary[key] = sum(float(r[key]) for r in rows) / max(1, len(rows))
    logger.info(
        f"[{variant}] PSNR gs={summary['psnr_gs']:.2f} sdf={summary['psnr_sdf']:.2f} "
        f"chamfer={chamfer:.4f} over {len(rows)} test views"
    )
    return {"views": rows, "summary": summary, "mesh": mesh}


# ---------------------------
# Sampling benchmark
# ---------------------------


@dataclass
class SamplingComparison:
    guided_error: float
    stratified_error: float
    rays: int
    guided_samples: int
    stratified_samples: int


def guided_vs_stratified(
    field: SdfField,
    scene: AnalyticScene,
    camera: Camera,
    cfg: TrainConfig,
    rays: int = 512,
    stratified_samples: int = 256,
    seed: int = 0,
) -> SamplingComparison:
    """
    Median per-ray depth error of guided sampling (2 x samples_per_range samples, seeded by the
    true surface distance) against stratified sampling with `stratified_samples` samples.

    Only rays that hit the analytic surface are used.
    """
    origins, directions = image_rays(camera)
    t_true, hit = sphere_trace(scene, origins.double(), directions.double())
    candidates = torch.nonzero(hit, as_tuple=False).reshape(-1)
    if candidates.numel() == 0:
        raise ValueError("no camera ray hits the scene")
    generator = torch.Generator().manual_seed(seed)
    pick = candidates[torch.randperm(candidates.numel(), generator=generator)[:rays]]
    o, d, t = origins[pick], directions[pick], t_true[pick].to(origins.dtype)
    sampler = cfg.sampler.model_copy(update={"perturb": False})
    field.set_active_levels(cfg.field.grid.levels)

    guided, _ = render_rays(field, o, d, sampler, t, create_graph=False)
    stratified, _ = render_rays(field, o, d, sampler, None, stratified_samples, create_graph=False)

    def error(out: VolumeRenderOutput) -> float:
        depth = out.depth.detach() / out.alpha.detach().clamp_min(1e-8)
        return float((depth - t).abs().median())

    result = SamplingComparison(
        error(guided), error(stratified), int(pick.numel()), 2 * sampler.samples_per_range, stratified_samples,
    )
    logger.info(
        f"Depth error (median over {result.rays} rays): guided[{result.guided_samples}]="
        f"{result.guided_error:.5f} stratified[{result.stratified_samples}]={result.stratified_error:.5f}"
    )
    return result


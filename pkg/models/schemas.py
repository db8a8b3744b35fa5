"""Pydantic schemas for every configuration record and run manifest."""
from __future__ import annotations

import hashlib
import math
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from core.errors import ConfigError


class StrictModel(BaseModel):
    """Base model: unknown keys are schema errors."""
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


# ---------------------------
# SDF branch
# ---------------------------


class HashGridConfig(StrictModel):
    """Multi-resolution hash grid layout."""
    levels: int = Field(16, ge=1, description="Number of resolution levels")
    base_resolution: int = Field(32, ge=1, description="Cells per axis at the coarsest level")
    max_resolution: int = Field(2048, ge=1, description="Cells per axis at the finest level")
    feature_dim: int = Field(4, ge=1, description="Scalars per table entry")
    table_size: int = Field(2 ** 15, ge=1, description="Max entries per level (full scale: 2^21)")

    @model_validator(mode="after")
    def _check_layout(self) -> "HashGridConfig":
        if self.base_resolution > self.max_resolution:
            raise ValueError("base_resolution must not exceed max_resolution")
        if self.table_size & (self.table_size - 1):
            raise ValueError("table_size must be a power of two")
        return self

    @property
    def growth_factor(self) -> float:
        """Per-level resolution multiplier, geometric between base and max."""
        if self.levels == 1:
            return 1.0
        return math.exp((math.log(self.max_resolution) - math.log(self.base_resolution)) / (self.levels - 1))

    def resolution(self, level: int) -> int:
        """Cells per axis at `level`."""
        return int(math.floor(self.base_resolution * self.growth_factor ** level + 1e-9))

    @property
    def output_dim(self) -> int:
        return self.levels * self.feature_dim


class SdfFieldConfig(StrictModel):
    """Hash grid plus MLP heads of the SDF branch."""
    grid: HashGridConfig = Field(default_factory=HashGridConfig)
    hidden_dim: int = Field(64, ge=1, description="Width of both SDF-head hidden layers")
    color_hidden_dim: int = Field(64, ge=1, description="Width of both color-head hidden layers")
    geo_feat_dim: int = Field(15, ge=1, description="Geometry feature passed to the color head")
    softplus_beta: float = Field(100.0, gt=0)
    init_sharpness: float = Field(10.0, gt=0, description="Initial logistic steepness of Phi_s")
    init_radius_ratio: float = Field(0.4, gt=0, lt=1, description="Sphere prior radius / domain half-extent")
    domain_min: float = -1.0
    domain_max: float = 1.0
    clamp_epsilon: float = Field(1e-6, ge=0, description="Inset applied when clamping queries into the box")

    @model_validator(mode="after")
    def _check_domain(self) -> "SdfFieldConfig":
        if self.domain_min >= self.domain_max:
            raise ValueError("domain_min must be below domain_max")
        return self

    @property
    def half_extent(self) -> float:
        return 0.5 * (self.domain_max - self.domain_min)


class ProgressiveSchedule(StrictModel):
    """Coarse-to-fine activation of hash-grid levels."""
    initial_active_levels: int = Field(4, ge=1)
    step_iterations: int = Field(2000, ge=1)


class SamplerConfig(StrictModel):
    """Depth-guided and stratified ray sampling."""
    k_coarse: float = Field(3.0, gt=0)
    k_fine: float = Field(1.0, gt=0)
    samples_per_range: int = Field(32, ge=2, description="M samples per guided range")
    near: float = Field(0.5, ge=0)
    far: float = Field(4.5, gt=0)
    window_floor: float = Field(1e-3, gt=0, description="Minimum half-width of a guided window")
    perturb: bool = Field(True, description="Jitter inside each bin; off = bin midpoints")
    clip_to_domain: bool = Field(True, description="Clip stratified bounds to the ray/domain intersection")

    @model_validator(mode="after")
    def _check_ranges(self) -> "SamplerConfig":
        if self.k_coarse < self.k_fine:
            raise ValueError("k_coarse must be >= k_fine")
        if self.near >= self.far:
            raise ValueError("near must be below far")
        return self


# ---------------------------
# GS branch
# ---------------------------


class RasterConfig(StrictModel):
    """Tile rasterizer constants."""
    tile_size: int = Field(16, ge=1)
    cov_floor: float = Field(0.3, ge=0, description="Isotropic low-pass added to cov2d (px^2)")
    cull_sigma: float = Field(3.0, gt=0)
    near_plane: float = Field(0.01, gt=0)
    min_transmittance: float = Field(1e-4, ge=0)
    alpha_visible: float = Field(1.0 / 255.0, ge=0, description="Raw alpha counted as touching a pixel")
    opacity_stat: Literal["mean", "max"] = "mean"
    background: Tuple[float, float, float] = (0.0, 0.0, 0.0)


class GaussianInitConfig(StrictModel):
    """How the initial primitive set is drawn."""
    mode: Literal["surface", "random"] = "surface"
    count: int = Field(2000, ge=1)
    surface_jitter: float = Field(0.01, ge=0)
    initial_opacity: float = Field(0.1, gt=0, lt=1)
    max_gaussians: int = Field(20000, ge=1, description="Growth stops at this many primitives")


class DensityControlConfig(StrictModel):
    """SDF-guided growing and pruning."""
    sigma2: float = Field(0.005, gt=0, description="Proximity kernel variance")
    omega_g: float = Field(0.0002, ge=0)
    omega_p: float = Field(0.05, ge=0)
    tau_g: float = Field(0.00015, description="Growth threshold; defaults to just below omega_g")
    tau_p: float = Field(0.005)
    interval: int = Field(100, ge=1, description="K: iterations between control events")
    child_offset: float = Field(0.5, gt=0, description="Child jitter in units of the parent's largest scale")
    child_scale: float = Field(0.8, gt=0, le=1)

    @model_validator(mode="after")
    def _check_finite(self) -> "DensityControlConfig":
        if not (math.isfinite(self.tau_g) and math.isfinite(self.tau_p)):
            raise ValueError("thresholds must be finite")
        return self


# ---------------------------
# Losses and training
# ---------------------------


class LossWeights(StrictModel):
    """Loss weights, including the scheduled curvature weight."""
    lambda1: float = Field(0.2, ge=0, le=1)
    lambda_vol: float = Field(0.01, ge=0)
    lambda_eik: float = Field(0.1, ge=0)
    lambda_d: float = Field(0.5, ge=0)
    lambda_n: float = Field(0.01, ge=0)
    curv_peak: float = Field(1.0, ge=0, description="lambda_curv at the end of the ramp")
    curv_tail: float = Field(0.05, ge=0, description="lambda_curv after the ramp")
    curv_ramp_iters: int = Field(2000, ge=0)
    curvature_epsilon: float = Field(0.01, gt=0, description="Tangent perturbation length")
    swap_l1_ssim: bool = Field(False, description="Weight SSIM by lambda1 and L1 by 1-lambda1")

    def lambda_curv(self, iteration: int) -> float:
        """Linear ramp 0 -> curv_peak over curv_ramp_iters, then curv_tail."""
        if iteration < self.curv_ramp_iters:
            return self.curv_peak * iteration / self.curv_ramp_iters
        return self.curv_tail


class LearningRates(StrictModel):
    """Per parameter-group learning rates."""
    hash_grid: float = Field(1e-2, gt=0)
    mlp: float = Field(1e-3, gt=0)
    sharpness: float = Field(1e-3, gt=0)
    means: float = Field(1.6e-4, gt=0, description="Multiplied by the scene extent")
    means_final: float = Field(1.6e-6, gt=0, description="Multiplied by the scene extent")
    scales: float = Field(2.5e-3, gt=0)
    rotations: float = Field(5e-3, gt=0)
    opacity: float = Field(5e-2, gt=0)
    colors: float = Field(2.5e-3, gt=0)


class AdamConfig(StrictModel):
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)


class TrainConfig(StrictModel):
    """Full training configuration."""
    name: str = "full"
    seed: int = 0
    gs_warmup_iters: int = Field(1500, ge=0)
    sdf_warmup_iters: int = Field(500, ge=0)
    joint_iters: int = Field(3000, ge=0)
    rays_per_step: int = Field(1024, ge=1)
    views_per_step: Literal[1] = 1
    eikonal_points: int = Field(1024, ge=1, description="Uniform domain samples added to the eikonal batch")
    curvature_points: int = Field(512, ge=1)
    checkpoint_interval: int = Field(1000, ge=1)
    foreground_alpha: float = Field(0.5, ge=0, le=1, description="GS alpha above which a pixel is foreground")
    sdf_background_alpha: float = Field(0.05, ge=0, le=1, description="SDF alpha below which a ray is background")
    use_guided_sampling: bool = True
    train_gs: bool = True
    train_sdf: bool = True
    mesh_resolution: int = Field(128, ge=8)
    lr: LearningRates = Field(default_factory=LearningRates)
    adam: AdamConfig = Field(default_factory=AdamConfig)
    field: SdfFieldConfig = Field(default_factory=SdfFieldConfig)
    schedule: ProgressiveSchedule = Field(default_factory=ProgressiveSchedule)
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    raster: RasterConfig = Field(default_factory=RasterConfig)
    init: GaussianInitConfig = Field(default_factory=GaussianInitConfig)
    density: DensityControlConfig = Field(default_factory=DensityControlConfig)
    losses: LossWeights = Field(default_factory=LossWeights)

    @model_validator(mode="after")
    def _check_branches(self) -> "TrainConfig":
        if not (self.train_gs or self.train_sdf):
            raise ValueError("at least one branch must be trained")
        if self.schedule.initial_active_levels > self.field.grid.levels:
            raise ValueError("initial_active_levels exceeds grid levels")
        return self

    @property
    def total_iters(self) -> int:
        return self.gs_warmup_iters + self.sdf_warmup_iters + self.joint_iters

    def config_hash(self) -> str:
        """Stable sha256 of the canonical JSON dump."""
        return hashlib.sha256(self.model_dump_json().encode("utf-8")).hexdigest()

    @classmethod
    def from_yaml(cls, path: str, overrides: Optional[Dict[str, str]] = None) -> "TrainConfig":
        return load_train_config(path, overrides)


# ---------------------------
# Scenes and runs
# ---------------------------


class SceneConfig(StrictModel):
    """Synthetic dataset generation."""
    preset: Literal["sphere-box", "sphere", "torus", "box"] = "sphere-box"
    n_views: int = Field(16, ge=8)
    resolution: int = Field(64, ge=8)
    orbit_radius: float = Field(2.5, gt=0)
    jitter: float = Field(0.05, ge=0, description="Max radial and angular jitter of camera positions")
    fov_degrees: float = Field(50.0, gt=0, lt=180)
    test_stride: int = Field(8, ge=2, description="Every test_stride-th view is held out")
    seed: int = 0


class RunManifest(BaseModel):
    """One per run directory."""
    command: str
    config_path: Optional[str] = None
    run_dir: str
    version: str
    seed: int
    argv: List[str] = Field(default_factory=list)
    started_at: datetime
    finished_at: Optional[datetime] = None
    exit_status: Optional[int] = None


# ---------------------------
# Loading
# ---------------------------


def _set_dotted(tree: Dict[str, Any], dotted: str, value: Any):
    node = tree
    parts = dotted.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError("Cannot override below scalar key", [dotted])
    node[parts[-1]] = value


def apply_overrides(tree: Dict[str, Any], overrides: Dict[str, str]) -> Dict[str, Any]:
    """Apply `--a.b value` style overrides; values are parsed as YAML scalars."""
    for key, raw in overrides.items():
        _set_dotted(tree, key, yaml.safe_load(raw) if isinstance(raw, str) else raw)
    return tree


def _offending_keys(exc: ValidationError) -> List[str]:
    return sorted({".".join(str(p) for p in err["loc"]) or "<root>" for err in exc.errors()})


def validate_model(model_cls, tree: Dict[str, Any]):
    """Validate a raw tree, mapping pydantic errors to ConfigError."""
    try:
        return model_cls.model_validate(tree)
    except ValidationError as exc:
        raise ConfigError(f"Invalid {model_cls.__name__}", _offending_keys(exc)) from exc


def load_yaml_tree(path: Optional[str]) -> Dict[str, Any]:
    """Read a YAML mapping; a missing file is a config error."""
    if path is None:
        return {}
    config_path = Path(path)
    if not config_path.exists():
        raise ConfigError(f"Config file not found: {config_path}")
    with open(config_path, "r", encoding="utf-8") as f:
        tree = yaml.safe_load(f) or {}
    if not isinstance(tree, dict):
        raise ConfigError(f"Config file must hold a mapping: {config_path}")
    return tree


def load_train_config(path: Optional[str] = None, overrides: Optional[Dict[str, str]] = None) -> TrainConfig:
    """Load a TrainConfig from YAML plus dotted overrides."""
    tree = apply_overrides(load_yaml_tree(path), overrides or {})
    return validate_model(TrainConfig, tree)

"""Tests for experiment variants, branch rendering and the sampling benchmark."""
import pytest
import torch

from core.experiments import (
    ABLATIONS,
    BASELINES,
    FULL,
    BranchRender,
    apply_switch,
    depth_gap,
    evaluate_run,
    experiment_configs,
    guided_vs_stratified,
    render_branch,
)
from core.scenes import make_scene
from models.gaussians import GaussianSet
from models.schemas import GaussianInitConfig, TrainConfig
from models.sdf_field import SdfField


def test_full_variant_is_unchanged():
    cfg = TrainConfig()
    assert apply_switch(cfg) is cfg
    assert apply_switch(cfg, FULL) is cfg


def test_ablation_switches():
    cfg = TrainConfig()
    assert apply_switch(cfg, "no-guided-sampling").use_guided_sampling is False
    density = apply_switch(cfg, "no-geometry-density-control").density
    assert (density.omega_g, density.omega_p) == (0.0, 0.0)
    losses = apply_switch(cfg, "no-mutual-supervision").losses
    assert (losses.lambda_d, losses.lambda_n) == (0.0, 0.0)
    assert losses.lambda_eik == cfg.losses.lambda_eik


def test_baselines_train_one_branch():
    cfg = TrainConfig()
    gs_only = apply_switch(cfg, "gs-only")
    assert (gs_only.train_gs, gs_only.train_sdf, gs_only.sdf_warmup_iters) == (True, False, 0)
    sdf_only = apply_switch(cfg, "sdf-only")
    assert (sdf_only.train_gs, sdf_only.gs_warmup_iters) == (False, 0)
    assert sdf_only.name == "sdf-only"


def test_unknown_variant_is_rejected():
    with pytest.raises(ValueError):
        apply_switch(TrainConfig(), "no-everything")


def test_experiment_configs_order():
    names = list(experiment_configs(TrainConfig(), baselines=True))
    assert names == [FULL, *ABLATIONS, *BASELINES]
    assert list(experiment_configs(TrainConfig())) == [FULL, *ABLATIONS]


def _render(depth, alpha):
    depth, alpha = torch.tensor(depth), torch.tensor(alpha)
    return BranchRender(color=torch.zeros(2, 3), depth=depth, normal=torch.zeros(2, 3), alpha=alpha)


def test_depth_gap_uses_pixels_opaque_in_both():
    a = _render([1.0, 2.0], [0.9, 0.9])
    b = _render([1.5, 9.0], [0.9, 0.1])
    assert depth_gap(a, b) == pytest.approx(0.5)
    assert depth_gap(a, _render([0.0, 0.0], [0.0, 0.0])) == 0.0


def test_render_branch_rejects_unknown_names(sphere_field, front_camera):
    with pytest.raises(ValueError):
        render_branch("nerf", TrainConfig(), sphere_field, None, front_camera)


def test_gs_branch_depth_is_ray_distance(front_camera):
    gaussians = GaussianSet(
        means=torch.zeros(1, 3), log_scales=torch.full((1, 3), -1.6), quats=torch.tensor([[1.0, 0.0, 0.0, 0.0]]),
        opacity_logits=torch.full((1,), 10.0), color_logits=torch.zeros(1, 3),
    )
    out = render_branch("gs", TrainConfig(), None, gaussians, front_camera)
    assert out.color.shape == (16, 16, 3)
    assert float(out.depth[8, 8]) == pytest.approx(2.5, rel=5e-3)
    assert float(out.depth[0, 0]) == 0.0
    buffers = out.buffers()
    assert [buffers[k].channels for k in ("color", "depth", "normal", "alpha")] == [3, 1, 3, 1]
    assert buffers["depth"].numpy()[8, 8] == pytest.approx(2.5, rel=5e-3)


def test_guided_sampling_is_accurate_with_few_samples(sphere_field, front_camera):
    cfg = TrainConfig(sampler={"samples_per_range": 16})
    result = guided_vs_stratified(sphere_field, make_scene("sphere"), front_camera, cfg, rays=16, stratified_samples=64)
    assert result.rays == 16
    assert result.guided_samples == 32
    assert result.guided_error < 0.02


def test_benchmark_needs_a_visible_surface(sphere_field, front_camera):
    scene = make_scene("sphere")
    scene.shapes[0].center = (50.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        guided_vs_stratified(sphere_field, scene, front_camera, TrainConfig())


def test_evaluate_untrained_run(sphere_dataset, tiny_train_config):
    cfg = tiny_train_config
    field = SdfField(cfg.field, seed=0)
    surface = sphere_dataset.surface_points(500)
    gaussians = GaussianSet.initialize(GaussianInitConfig(count=100), surface, generator=torch.Generator().manual_seed(0))
    result = evaluate_run(sphere_dataset, cfg, field, gaussians, chamfer_points=2000)
    assert [row["view"] for row in result["views"]] == [0, 4]
    summary = result["summary"]
    assert summary["num_gaussians"] == 100
    assert summary["psnr_gs"] > 0.0
    assert summary["chamfer"] > 0.0

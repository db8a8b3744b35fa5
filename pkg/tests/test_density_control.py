"""Tests for SDF-guided growing and pruning."""
import math

import pytest
import torch

from core.density_control import apply_density_control, growth_score, proximity_weight, prune_score
from core.errors import DensityControlError
from models.gaussians import GaussianSet, accumulate_stats
from models.schemas import DensityControlConfig
from utils.run_log import read_jsonl

# on the surface, outside and far, inside and near
MEANS = [[0.5, 0.0, 0.0], [0.9, 0.0, 0.0], [0.2, 0.0, 0.0]]
GRADS = [1e-4, 0.0, 1e-3]
OPACITIES = [0.1, 0.04, 0.5]


def three_primitives() -> GaussianSet:
    gaussians = GaussianSet(
        means=torch.tensor(MEANS),
        log_scales=torch.full((3, 3), math.log(0.01)),
        quats=torch.tensor([[1.0, 0.0, 0.0, 0.0]] * 3),
        opacity_logits=torch.zeros(3),
        color_logits=torch.zeros(3, 3),
    )
    accumulate_stats(gaussians, torch.tensor(GRADS), torch.tensor(OPACITIES))
    return gaussians


@pytest.fixture
def control_cfg():
    return DensityControlConfig(interval=1)


def test_proximity_weight_reference_value():
    assert proximity_weight(0.1, 0.005) == pytest.approx(0.367879, abs=1e-6)
    assert proximity_weight(0.0, 0.005) == 1.0


def test_growth_and_prune_scores():
    cfg = DensityControlConfig()
    assert growth_score(0.0001, 0.0, cfg) == pytest.approx(0.0003)
    assert prune_score(0.1, 10.0, cfg) == pytest.approx(0.05)
    assert prune_score(0.1, 0.0, cfg) == pytest.approx(0.1)


def test_surface_primitives_grow_and_far_transparent_ones_prune(sphere_field, control_cfg, tmp_path):
    gaussians = three_primitives()
    log = tmp_path / "events.jsonl"
    event = apply_density_control(gaussians, sphere_field, control_cfg, iteration=7, event_log=log)
    assert event.summary() == {"iteration": 7, "before": 3, "grown": 2, "pruned": 1, "capped": 0, "after": 4}
    assert len(gaussians) == 4
    means = gaussians.means.detach()
    # kept parents first, then children in parent order
    assert torch.allclose(means[0], torch.tensor(MEANS[0]))
    assert torch.allclose(means[1], torch.tensor(MEANS[2]))
    assert torch.allclose(means[2], torch.tensor([0.505, 0.0, 0.0]), atol=1e-6)
    assert torch.allclose(means[3], torch.tensor([0.205, 0.0, 0.0]), atol=1e-6)
    assert torch.allclose(gaussians.scales()[2], torch.full((3,), 0.008), atol=1e-7)
    assert gaussians.stats.steps == 0
    assert gaussians.version == 1
    decisions = [record["decision"] for record in read_jsonl(log)]
    assert decisions == ["grow", "prune", "grow"]


def test_children_move_towards_the_zero_level(sphere_field, control_cfg):
    gaussians = three_primitives()
    apply_density_control(gaussians, sphere_field, control_cfg)
    inside_parent, inside_child = gaussians.means.detach()[1], gaussians.means.detach()[3]
    assert abs(float(inside_child.norm()) - 0.5) < abs(float(inside_parent.norm()) - 0.5)


def test_growth_is_capped_by_score(sphere_field, control_cfg):
    gaussians = three_primitives()
    event = apply_density_control(gaussians, sphere_field, control_cfg, max_gaussians=3)
    assert (event.grown, event.capped, event.after) == (1, 1, 3)
    assert torch.allclose(gaussians.means.detach()[2], torch.tensor([0.205, 0.0, 0.0]), atol=1e-6)
    assert [r["decision"] for r in event.records] == ["grow_capped", "prune", "grow"]


def test_disabled_weights_fall_back_to_plain_thresholds(sphere_field):
    cfg = DensityControlConfig(interval=1, omega_g=0.0, omega_p=0.0)
    gaussians = three_primitives()
    event = apply_density_control(gaussians, sphere_field, cfg)
    # only the inside primitive clears tau_g on gradient alone; nothing is below tau_p
    assert (event.grown, event.pruned) == (1, 0)


def test_control_needs_a_full_interval_of_statistics(sphere_field):
    gaussians = three_primitives()
    with pytest.raises(DensityControlError):
        apply_density_control(gaussians, sphere_field, DensityControlConfig(interval=100))


def test_optimizer_moments_follow_the_primitives(sphere_field, control_cfg):
    gaussians = three_primitives()
    optimizer = torch.optim.Adam(list(gaussians.parameters().values()), lr=0.01)
    gaussians.means.grad = torch.ones(3, 3)
    for name, param in gaussians.parameters().items():
        if param.grad is None:
            param.grad = torch.zeros_like(param)
    optimizer.step()
    before = optimizer.state[gaussians.means]["exp_avg"].clone()
    apply_density_control(gaussians, sphere_field, control_cfg, optimizer=optimizer)
    state = optimizer.state[gaussians.means]
    assert state["exp_avg"].shape == (4, 3)
    assert torch.allclose(state["exp_avg"][:2], before[[0, 2]])
    assert torch.equal(state["exp_avg"][2:], torch.zeros(2, 3))
    assert any(p is gaussians.means for p in optimizer.param_groups[0]["params"])


def test_zero_gradient_surface_primitive_grows_with_defaults(sphere_field):
    cfg = DensityControlConfig(interval=1)
    assert growth_score(0.0, 0.0, cfg) > cfg.tau_g
    gaussians = GaussianSet(
        means=torch.tensor([[0.5, 0.0, 0.0]]),
        log_scales=torch.full((1, 3), math.log(0.01)),
        quats=torch.tensor([[1.0, 0.0, 0.0, 0.0]]),
        opacity_logits=torch.zeros(1),
        color_logits=torch.zeros(1, 3),
    )
    accumulate_stats(gaussians, torch.zeros(1), torch.tensor([0.1]))
    event = apply_density_control(gaussians, sphere_field, cfg)
    assert (event.grown, event.pruned) == (1, 0)
    assert [r["decision"] for r in event.records] == ["grow"]


@pytest.mark.parametrize("sign", [1.0, -1.0])
@pytest.mark.parametrize("cfg", [DensityControlConfig(), DensityControlConfig(sigma2=0.05, omega_g=1e-3, omega_p=0.3)])
def test_scores_never_drop_as_primitives_approach_the_surface(sign, cfg):
    s = sign * torch.linspace(2.0, 0.0, 401, dtype=torch.float64)
    grad = torch.full_like(s, 1e-4)
    opacity = torch.full_like(s, 0.05)
    eps_g = growth_score(grad, s, cfg)
    eps_p = prune_score(opacity, s, cfg)
    assert bool((eps_g[1:] >= eps_g[:-1]).all())
    assert bool((eps_p[1:] >= eps_p[:-1]).all())


def expected_decision(grad: float, opacity: float, s: float, cfg: DensityControlConfig) -> str:
    mu = math.exp(-s * s / (2.0 * cfg.sigma2))
    grow = grad + cfg.omega_g * mu > cfg.tau_g
    prune = opacity - cfg.omega_p * (1.0 - mu) < cfg.tau_p
    if grow and prune:
        return "grow_prune"
    if grow:
        return "grow"
    if prune:
        return "prune"
    return "keep"


def test_decisions_match_the_scoring_rules_on_random_primitives(sphere_field):
    generator = torch.Generator().manual_seed(4)
    count = 50
    means = (torch.rand(count, 3, generator=generator, dtype=torch.float64) * 1.6 - 0.8)
    # a third of the primitives sit close to the sphere so every branch is exercised
    near = torch.nn.functional.normalize(means[:17], dim=-1) * (0.5 + 0.05 * torch.randn(17, 1, generator=generator, dtype=torch.float64))
    means = torch.cat([near, means[17:]])
    grads = torch.rand(count, generator=generator, dtype=torch.float64) * 3e-4
    opacities = torch.rand(count, generator=generator, dtype=torch.float64) * 0.1
    gaussians = GaussianSet(
        means=means,
        log_scales=torch.full((count, 3), math.log(0.01), dtype=torch.float64),
        quats=torch.tensor([[1.0, 0.0, 0.0, 0.0]] * count, dtype=torch.float64),
        opacity_logits=torch.zeros(count, dtype=torch.float64),
        color_logits=torch.zeros(count, 3, dtype=torch.float64),
    )
    accumulate_stats(gaussians, grads, opacities)
    cfg = DensityControlConfig(interval=1)
    expected = [
        expected_decision(float(g), float(o), math.sqrt(sum(float(c) ** 2 for c in m)) - 0.5, cfg)
        for g, o, m in zip(grads, opacities, means)
    ]
    event = apply_density_control(gaussians, sphere_field, cfg)
    assert [r["decision"] for r in event.records] == expected
    assert len(set(expected)) >= 3, f"table only covers {set(expected)}"
    assert event.after == count + sum(d.startswith("grow") for d in expected) - sum(d.endswith("prune") for d in expected)

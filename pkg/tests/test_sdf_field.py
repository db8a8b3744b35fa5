"""Tests for the hash-grid encoder, SDF field and its helpers."""
import math

import pytest
import torch

from core.errors import NonFiniteInputError
from core.sdf_renderer import render_rays
from models.schemas import HashGridConfig, ProgressiveSchedule, SamplerConfig, SdfFieldConfig
from models.sdf_field import (
    HASH_PRIMES,
    HashGridEncoder,
    SdfField,
    activate_levels,
    encode,
    fit_field_to_sdf,
    sdf_gradient,
    sdf_value,
    tangent_perturb,
)


def test_coarse_levels_index_densely(tiny_grid):
    encoder = HashGridEncoder(tiny_grid)
    assert encoder.dense == [True, True]
    assert int(encoder.lattice_index(0, torch.tensor([1, 0, 0]))) == 1
    assert int(encoder.lattice_index(0, torch.tensor([0, 1, 0]))) == 3
    # level 1 starts after the 3^3 entries of level 0
    assert int(encoder.lattice_index(1, torch.tensor([0, 0, 0]))) == 27


def test_fine_levels_use_the_xor_hash():
    cfg = HashGridConfig(levels=1, base_resolution=16, max_resolution=16, feature_dim=2, table_size=2 ** 10)
    encoder = HashGridEncoder(cfg)
    assert encoder.dense == [False]
    expected = (1 * HASH_PRIMES[0] ^ 2 * HASH_PRIMES[1] ^ 3 * HASH_PRIMES[2]) % 2 ** 10
    assert int(encoder.lattice_index(0, torch.tensor([1, 2, 3]))) == expected


def test_inactive_levels_encode_to_exact_zeros(field):
    field.set_active_levels(1)
    features = encode(field, torch.tensor([[0.1, -0.3, 0.7]]))
    dim = field.cfg.grid.feature_dim
    assert features.shape == (1, 2 * dim)
    assert torch.equal(features[:, dim:], torch.zeros(1, dim))


def test_queries_outside_the_domain_are_clamped(field):
    inside = encode(field, torch.tensor([[1.0 - 1e-6, 0.2, 0.0]]))
    outside = encode(field, torch.tensor([[5.0, 0.2, 0.0]]))
    assert torch.equal(inside, outside)


def test_non_finite_query_is_rejected(field):
    with pytest.raises(NonFiniteInputError):
        sdf_value(field, torch.tensor([[float("nan"), 0.0, 0.0]]))


def test_geometric_init_starts_near_a_sphere(field):
    assert float(field.sharpness) == pytest.approx(10.0, rel=1e-5)
    values = sdf_value(field, torch.tensor([[0.0, 0.0, 0.0], [0.95, 0.0, 0.0], [0.0, -0.95, 0.0]]))
    assert values[0] < 0, "origin should start inside"
    assert values[1] > 0 and values[2] > 0, "points near the boundary should start outside"


def test_analytic_gradient_matches_finite_differences(field):
    field = field.double()
    x = torch.tensor([[0.1, 0.2, -0.3]], dtype=torch.float64)
    grad = sdf_gradient(field, x)[0]
    h = 1e-6
    numeric = torch.stack([
        (sdf_value(field, x + h * e) - sdf_value(field, x - h * e))[0] / (2 * h)
        for e in torch.eye(3, dtype=torch.float64)
    ])
    assert torch.allclose(grad, numeric, atol=1e-5), f"{grad} vs {numeric}"


def test_gradient_graph_reaches_parameters(field):
    x = torch.rand(8, 3) - 0.5
    _, grad, _ = field.sdf_and_gradient(x, create_graph=True)
    ((grad.norm(dim=-1) - 1.0) ** 2).mean().backward()
    assert field.sdf_head[0].weight.grad is not None


def test_parameter_gradients_match_finite_differences(field, gradient_checker):
    field = field.double()
    field.set_active_levels(field.cfg.grid.levels)
    generator = torch.Generator().manual_seed(3)
    with torch.no_grad():
        # switch the grid features on so the table receives gradient
        field.sdf_head[0].weight[:, 3:].normal_(0.0, 0.5, generator=generator)
    x = 1.6 * torch.rand(32, 3, dtype=torch.float64, generator=generator) - 0.8
    weights = torch.randn(32, dtype=torch.float64, generator=generator)

    def loss():
        values = sdf_value(field, x)
        return (weights * values).sum() + 0.5 * (values ** 2).sum()

    params = list(field.grid_parameters()) + list(field.sdf_head.parameters())
    gradient_checker(loss, params, count=50, seed=3)


def test_color_is_in_unit_range(field):
    x = torch.rand(5, 3) - 0.5
    _, grad, geo = field.sdf_and_gradient(x, create_graph=False)
    dirs = torch.nn.functional.normalize(torch.randn(5, 3), dim=-1)
    rgb = field.color(geo, dirs, grad)
    assert rgb.shape == (5, 3)
    assert bool(((rgb >= 0) & (rgb <= 1)).all())


@pytest.mark.parametrize("iteration,expected", [(0, 4), (1999, 4), (2000, 5), (100000, 16)])
def test_progressive_schedule(iteration, expected):
    schedule = ProgressiveSchedule(initial_active_levels=4, step_iterations=2000)
    assert activate_levels(schedule, iteration, 16) == expected


def test_progressive_schedule_rejects_negative_iterations():
    with pytest.raises(ValueError):
        activate_levels(ProgressiveSchedule(), -1, 16)


def test_tangent_perturbation_stays_in_the_tangent_plane():
    generator = torch.Generator().manual_seed(0)
    x = torch.randn(64, 3, dtype=torch.float64)
    normal = torch.nn.functional.normalize(torch.randn(64, 3, dtype=torch.float64), dim=-1)
    moved = tangent_perturb(x, normal, 0.01, generator)
    step = moved - x
    assert torch.allclose(step.norm(dim=-1), torch.full((64,), 0.01, dtype=torch.float64))
    assert torch.allclose((step * normal).sum(dim=-1), torch.zeros(64, dtype=torch.float64), atol=1e-12)


@pytest.mark.parametrize("normal,epsilon", [
    ((0.0, 0.0, 0.0), 0.01),
    ((0.0, 0.0, 2.0), 0.01),
    ((0.0, 0.0, 1.0), 0.0),
])
def test_tangent_perturbation_rejects_bad_input(normal, epsilon):
    with pytest.raises(ValueError):
        tangent_perturb(torch.zeros(1, 3), torch.tensor([normal]), epsilon)


def sphere_sdf(x: torch.Tensor) -> torch.Tensor:
    return x.norm(dim=-1) - 0.5


@pytest.fixture(scope="module")
def fitted_sphere():
    grid = HashGridConfig(levels=4, base_resolution=4, max_resolution=24, feature_dim=2, table_size=2 ** 14)
    field = SdfField(SdfFieldConfig(grid=grid, hidden_dim=64, color_hidden_dim=16, geo_feat_dim=7), seed=1)
    fit_field_to_sdf(field, sphere_sdf, iterations=1500, batch_size=2048, seed=1)
    return field


@pytest.mark.slow
def test_fitted_field_keeps_the_sign_of_the_sphere(fitted_sphere):
    with torch.no_grad():
        values = sdf_value(fitted_sphere, torch.tensor([[0.0, 0.0, 0.0], [0.0, 0.0, -0.9]]))
    assert values[0] < 0
    assert values[1] > 0


@pytest.mark.slow
def test_fitted_field_vanishes_on_the_sphere(fitted_sphere):
    generator = torch.Generator().manual_seed(7)
    directions = torch.randn(1000, 3, generator=generator)
    surface = 0.5 * directions / directions.norm(dim=-1, keepdim=True)
    with torch.no_grad():
        error = sdf_value(fitted_sphere, surface).abs().mean()
    assert float(error) < 0.01, f"mean |sdf| on the surface is {float(error)}"


@pytest.mark.slow
def test_fitted_field_gradient_points_outward(fitted_sphere):
    grad = sdf_gradient(fitted_sphere, torch.tensor([[0.5, 0.0, 0.0]]))[0]
    cosine = float(grad[0] / grad.norm())
    assert cosine > 0.99


@pytest.mark.slow
def test_fitted_field_renders_the_sphere_depth(fitted_sphere):
    with torch.no_grad():
        fitted_sphere.log_sharpness.fill_(math.log(200.0))
    origins = torch.tensor([[0.0, 0.0, -2.0]])
    directions = torch.tensor([[0.0, 0.0, 1.0]])
    out, _ = render_rays(
        fitted_sphere, origins, directions, SamplerConfig(perturb=False), stratified_count=256, create_graph=False
    )
    assert float(out.alpha[0]) > 0.99
    assert float(out.depth[0] / out.alpha[0]) == pytest.approx(1.5, abs=0.02)

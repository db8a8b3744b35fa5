"""Tests for ray sampling, SDF-to-alpha conversion and compositing."""
import pytest
import torch

from core.errors import SamplingError
from core.sdf_renderer import (
    MIN_T,
    composite,
    guided_windows,
    neus_alpha,
    ray_box_intersection,
    render_image,
    render_rays,
    sample_ray_guided,
    sample_ray_stratified,
    stratified_t,
    transmittance,
    volume_render,
)
from models.schemas import SamplerConfig


def axis_ray(count: int = 1, dtype=torch.float64):
    """Rays from (0, 0, -2) along +z; they hit the radius-0.5 sphere at t = 1.5."""
    origins = torch.tensor([[0.0, 0.0, -2.0]], dtype=dtype).repeat(count, 1)
    directions = torch.tensor([[0.0, 0.0, 1.0]], dtype=dtype).repeat(count, 1)
    return origins, directions


def test_neus_alpha_reference_value():
    alpha = neus_alpha(torch.tensor(0.5), torch.tensor(-0.5), 1.0)
    assert float(alpha) == pytest.approx(0.393469, abs=1e-6)


def test_neus_alpha_is_zero_when_leaving_the_surface():
    assert float(neus_alpha(torch.tensor(-0.2), torch.tensor(0.3), 10.0)) == 0.0


def test_neus_alpha_stays_finite_deep_inside():
    alpha = neus_alpha(torch.tensor(-100.0), torch.tensor(-101.0), 10.0)
    assert torch.isfinite(alpha)
    assert 0.0 <= float(alpha) <= 1.0


def test_composite_two_intervals():
    alphas = torch.tensor([[0.5, 1.0]])
    depths = torch.tensor([[[2.0], [4.0]]])
    blended, weights, alpha = composite(alphas, depths)
    assert torch.allclose(weights, torch.tensor([[0.5, 0.5]]))
    assert float(blended[0, 0]) == pytest.approx(3.0)
    assert float(alpha[0]) == pytest.approx(1.0)


def test_transmittance_is_exclusive():
    assert torch.allclose(transmittance(torch.tensor([0.5, 0.5, 0.5])), torch.tensor([1.0, 0.5, 0.25]))


def test_unperturbed_stratified_samples_are_bin_midpoints():
    t = stratified_t(torch.tensor([0.0]), torch.tensor([1.0]), 4, perturb=False)
    assert torch.allclose(t, torch.tensor([[0.125, 0.375, 0.625, 0.875]]))


def test_perturbed_stratified_samples_stay_in_their_bins():
    generator = torch.Generator().manual_seed(0)
    t = stratified_t(torch.zeros(16), torch.ones(16), 4, perturb=True, generator=generator)
    bins = torch.floor(t * 4)
    assert torch.equal(bins, torch.arange(4, dtype=t.dtype).expand(16, 4))


def test_stratified_sampling_needs_two_samples():
    origins, directions = axis_ray()
    with pytest.raises(SamplingError):
        sample_ray_stratified(origins, directions, SamplerConfig(), 1)


def test_stratified_sampling_clips_to_the_domain():
    origins, directions = axis_ray()
    samples = sample_ray_stratified(origins, directions, SamplerConfig(perturb=False), 8, domain=(-1.0, 1.0))
    assert float(samples.t_values.min()) > 1.0
    assert float(samples.t_values.max()) < 3.0
    assert not bool(samples.guided.any())


def test_ray_box_intersection():
    origins, directions = axis_ray()
    t_near, t_far, hit = ray_box_intersection(origins, directions, -1.0, 1.0)
    assert bool(hit[0])
    assert float(t_near[0]) == pytest.approx(1.0)
    assert float(t_far[0]) == pytest.approx(3.0)


@pytest.mark.parametrize("sdf,coarse,fine", [
    (0.2, (3.4, 4.6), (3.8, 4.2)),
    (-0.2, (3.4, 4.6), (3.8, 4.2)),
    (0.0, (4.0 - 1e-3, 4.0 + 1e-3), (4.0 - 1e-3, 4.0 + 1e-3)),
])
def test_guided_windows(sdf, coarse, fine):
    c_lo, c_hi, f_lo, f_hi = guided_windows(
        torch.tensor([4.0], dtype=torch.float64), torch.tensor([sdf], dtype=torch.float64), SamplerConfig()
    )
    assert (float(c_lo), float(c_hi)) == pytest.approx(coarse)
    assert (float(f_lo), float(f_hi)) == pytest.approx(fine)


def test_guided_samples_cover_both_windows(sphere_field):
    cfg = SamplerConfig(samples_per_range=16, perturb=False)
    origins, directions = axis_ray()
    # sdf at t = 1.7 is -0.2: coarse [1.1, 2.3], fine [1.5, 1.9]
    samples = sample_ray_guided(origins, directions, torch.tensor([1.7], dtype=torch.float64), sphere_field, cfg)
    t = samples.t_values[0]
    assert t.shape == (32,)
    assert bool(samples.guided[0])
    assert float(t.min()) >= 1.1 - 1e-6 and float(t.max()) <= 2.3 + 1e-4
    assert int(((t >= 1.5) & (t <= 1.9)).sum()) >= 16, "fine window holds at least M samples"


@pytest.mark.parametrize("dtype", [torch.float32, torch.float64])
def test_guided_samples_strictly_increase_on_the_surface(sphere_field, dtype):
    cfg = SamplerConfig(samples_per_range=16, perturb=False)
    origins, directions = axis_ray(dtype=dtype)
    samples = sample_ray_guided(origins, directions, torch.tensor([1.5], dtype=dtype), sphere_field, cfg)
    assert bool((samples.deltas > 0).all()), "coinciding coarse and fine windows must still separate"


def test_guided_samples_are_clamped_near_the_camera(sphere_field):
    cfg = SamplerConfig(samples_per_range=8, perturb=False)
    origins, directions = axis_ray()
    samples = sample_ray_guided(origins, directions, torch.tensor([1e-3], dtype=torch.float64), sphere_field, cfg)
    assert float(samples.t_values.min()) >= MIN_T
    assert float(samples.t_values.max()) <= cfg.far + 1e-3


@pytest.mark.parametrize("depth", [float("nan"), 0.0, -1.0])
def test_invalid_guidance_falls_back_to_stratified(sphere_field, depth):
    cfg = SamplerConfig(samples_per_range=8, perturb=False)
    origins, directions = axis_ray(count=2)
    samples = sample_ray_guided(
        origins, directions, torch.tensor([depth, 1.5], dtype=torch.float64), sphere_field, cfg
    )
    assert samples.guided.tolist() == [False, True]
    assert samples.num_samples == 16
    assert float(samples.t_values[0].min()) >= cfg.near
    assert float(samples.t_values[0].max()) <= cfg.far


@pytest.mark.parametrize("dtype", [torch.float32, torch.float64])
def test_guided_samples_never_pass_far(sphere_field, dtype):
    cfg = SamplerConfig(samples_per_range=32, perturb=False)
    origins, directions = axis_ray(dtype=dtype)
    # sdf at t = 4.49 is 1.99, so both windows run well past far = 4.5
    samples = sample_ray_guided(origins, directions, torch.tensor([4.49], dtype=dtype), sphere_field, cfg)
    t = samples.t_values[0]
    assert float(t.max()) <= cfg.far
    assert float(t.min()) >= MIN_T
    assert bool((samples.deltas > 0).all())


def test_fallback_rays_are_clipped_to_the_domain(sphere_field):
    cfg = SamplerConfig(samples_per_range=8, perturb=False)
    origins, directions = axis_ray(count=2)
    depth = torch.tensor([float("nan"), 1.5], dtype=torch.float64)
    samples = sample_ray_guided(origins, directions, depth, sphere_field, cfg, domain=(-1.0, 1.0))
    fallback = samples.t_values[0]
    # the axis ray crosses the [-1, 1] box for t in [1, 3]
    assert float(fallback.min()) > 1.0
    assert float(fallback.max()) < 3.0


def test_render_rays_clips_unguided_rays_to_the_field_domain(sphere_field):
    cfg = SamplerConfig(samples_per_range=8, perturb=False)
    origins, directions = axis_ray()
    _, samples = render_rays(sphere_field, origins, directions, cfg, gs_depth=torch.tensor([0.0], dtype=torch.float64))
    assert not bool(samples.guided[0])
    assert float(samples.t_values.min()) > 1.0
    assert float(samples.t_values.max()) < 3.0


def test_volume_render_finds_the_sphere(sphere_field):
    origins, directions = axis_ray()
    out, samples = render_rays(sphere_field, origins, directions, SamplerConfig(perturb=False), stratified_count=256)
    assert samples.num_samples == 256
    assert float(out.alpha[0]) > 0.99
    assert float(out.depth[0] / out.alpha[0]) == pytest.approx(1.5, abs=0.02)
    assert torch.allclose(out.normal[0], torch.tensor([0.0, 0.0, -1.0], dtype=torch.float64), atol=1e-2)
    assert float(out.color[0, 0]) == pytest.approx(0.25 * float(out.alpha[0]))
    assert out.weights.shape == (1, 255)


def test_guided_render_matches_the_true_depth(sphere_field):
    origins, directions = axis_ray()
    cfg = SamplerConfig(samples_per_range=16, perturb=False)
    out, _ = render_rays(sphere_field, origins, directions, cfg, gs_depth=torch.tensor([1.52], dtype=torch.float64))
    assert float(out.depth[0] / out.alpha[0]) == pytest.approx(1.5, abs=0.01)


def test_volume_render_with_a_single_sample_is_empty(sphere_field):
    origins, directions = axis_ray()
    samples = sample_ray_stratified(origins, directions, SamplerConfig(), 2)
    samples.t_values = samples.t_values[:, :1]
    out = volume_render(samples, sphere_field)
    assert float(out.alpha[0]) == 0.0


def test_render_image_shapes(sphere_field, front_camera):
    out = render_image(sphere_field, front_camera, SamplerConfig(samples_per_range=16), chunk=100)
    assert out.color.shape == (16, 16, 3)
    assert out.depth.shape == (16, 16)
    assert float(out.alpha[8, 8]) > 0.9, "centre pixel looks at the sphere"
    assert float(out.alpha[0, 0]) < 0.1, "corner pixel misses it"


def test_compositing_conserves_opacity():
    generator = torch.Generator().manual_seed(0)
    alphas = torch.rand(1000, 8, dtype=torch.float64, generator=generator)
    values = torch.ones(1000, 8, 1, dtype=torch.float64)
    blended, weights, alpha = composite(alphas, values)
    assert torch.allclose(alpha, 1.0 - torch.prod(1.0 - alphas, dim=1), atol=1e-12)
    assert torch.allclose(blended[:, 0], alpha)
    trans = transmittance(alphas)
    assert bool((trans[:, 1:] <= trans[:, :-1]).all())


def test_render_gradients_match_finite_differences():
    sdf = torch.tensor([[0.6, 0.35, 0.1, -0.05, -0.2, -0.4, -0.55, -0.7]], dtype=torch.float64, requires_grad=True)
    depths = torch.linspace(1.0, 2.0, 7, dtype=torch.float64).reshape(1, 7, 1)

    def render(values):
        alphas = neus_alpha(values[:, :-1], values[:, 1:], 5.0)
        blended, _, alpha = composite(alphas, depths)
        return blended, alpha

    assert torch.autograd.gradcheck(render, (sdf,))


def test_volume_render_parameter_gradients_match_finite_differences(field, gradient_checker):
    field = field.double()
    field.set_active_levels(field.cfg.grid.levels)
    generator = torch.Generator().manual_seed(5)
    with torch.no_grad():
        field.sdf_head[0].weight[:, 3:].normal_(0.0, 0.5, generator=generator)
    origins = torch.tensor([
        [0.0, 0.0, -2.0], [0.1, 0.0, -2.0], [0.0, -0.1, -2.0], [0.05, 0.05, -2.0],
    ], dtype=torch.float64)
    directions = torch.tensor([[0.0, 0.0, 1.0]], dtype=torch.float64).repeat(4, 1)
    samples = sample_ray_stratified(origins, directions, SamplerConfig(perturb=False), 8, near=1.0, far=3.0)
    color_weights = torch.rand(4, 3, dtype=torch.float64, generator=generator)
    normal_weights = torch.randn(4, 3, dtype=torch.float64, generator=generator)

    def loss():
        out = volume_render(samples, field)
        return (out.color * color_weights).sum() + out.depth.sum() + (out.normal * normal_weights).sum()

    gradient_checker(loss, list(field.parameters()), count=30, seed=5)

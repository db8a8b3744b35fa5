"""Shared fixtures: tiny fields, cameras, an analytic sphere and a generated dataset."""
import math

import pytest
import torch
import torch.nn as nn

from data.dataset import SceneDataset, generate_dataset
from models.camera import camera_from_fov
from models.schemas import HashGridConfig, SceneConfig, SdfFieldConfig, TrainConfig
from models.sdf_field import SdfField
from utils.geometry import look_at


class AnalyticSphereField(nn.Module):
    """Exact sphere SDF with the interface the renderers call; color is a constant grey."""

    def __init__(self, radius: float = 0.5, sharpness: float = 200.0, grey: float = 0.25):
        super().__init__()
        self.cfg = SdfFieldConfig()
        self.radius = radius
        self.grey = grey
        self.log_sharpness = nn.Parameter(torch.tensor(math.log(sharpness)))

    @property
    def sharpness(self) -> torch.Tensor:
        return self.log_sharpness.exp()

    def set_active_levels(self, count: int):
        pass

    def forward(self, x):
        return x.norm(dim=-1) - self.radius, torch.zeros(x.shape[0], 1, dtype=x.dtype)

    def sdf_and_gradient(self, x, create_graph: bool = True):
        norm = x.norm(dim=-1, keepdim=True)
        return norm.squeeze(-1) - self.radius, x / norm.clamp_min(1e-12), torch.zeros(x.shape[0], 1, dtype=x.dtype)

    def color(self, geo, directions, normals):
        return torch.full((geo.shape[0], 3), self.grey, dtype=geo.dtype)


def check_parameter_gradients(loss, params, count: int, seed: int = 0, h: float = 1e-6):
    """
    Compare autograd against central differences on `count` random parameter entries.

    Half of the entries come from those with a non-zero analytic gradient.
    """
    for p in params:
        p.grad = None
    loss().backward()
    generator = torch.Generator().manual_seed(seed)
    flat = torch.cat([p.grad.reshape(-1) if p.grad is not None else torch.zeros(p.numel(), dtype=p.dtype)
                      for p in params])
    owners = torch.cat([torch.full((p.numel(),), k) for k, p in enumerate(params)])
    offsets = torch.cat([torch.arange(p.numel()) for p in params])
    active = torch.nonzero(flat != 0).squeeze(-1)
    assert active.numel() > 0, "loss does not depend on the parameters"
    picks = torch.cat([
        active[torch.randperm(active.numel(), generator=generator)[: count // 2]],
        torch.randperm(flat.numel(), generator=generator)[: count - count // 2],
    ])
    for i in picks.tolist():
        owner, offset, analytic = int(owners[i]), int(offsets[i]), float(flat[i])
        entries = params[owner].data.view(-1)
        with torch.no_grad():
            entries[offset] += h
            plus = float(loss())
            entries[offset] -= 2 * h
            minus = float(loss())
            entries[offset] += h
        numeric = (plus - minus) / (2 * h)
        assert abs(analytic - numeric) <= 1e-3 * abs(numeric) + 1e-7, (
            f"parameter {owner}[{offset}]: autograd {analytic} vs numeric {numeric}"
        )


@pytest.fixture
def gradient_checker():
    return check_parameter_gradients


@pytest.fixture
def tiny_grid():
    return HashGridConfig(levels=2, base_resolution=2, max_resolution=4, feature_dim=2, table_size=2 ** 10)


@pytest.fixture
def field_config(tiny_grid):
    return SdfFieldConfig(grid=tiny_grid, hidden_dim=64, color_hidden_dim=16, geo_feat_dim=7)


@pytest.fixture
def field(field_config):
    return SdfField(field_config, seed=0)


@pytest.fixture
def sphere_field():
    return AnalyticSphereField()


@pytest.fixture
def front_camera():
    """16x16 camera 2.5 units in front of the origin, looking at it along +z."""
    return camera_from_fov(16, 16, 60.0, look_at((0.0, 0.0, -2.5)))


@pytest.fixture
def tiny_train_config(tiny_grid):
    return TrainConfig(
        name="tiny",
        seed=3,
        gs_warmup_iters=4,
        sdf_warmup_iters=2,
        joint_iters=6,
        rays_per_step=64,
        eikonal_points=32,
        curvature_points=16,
        checkpoint_interval=5,
        mesh_resolution=16,
        field=SdfFieldConfig(grid=tiny_grid, hidden_dim=16, color_hidden_dim=16, geo_feat_dim=7),
        schedule={"initial_active_levels": 1, "step_iterations": 4},
        sampler={"samples_per_range": 8},
        init={"count": 200, "max_gaussians": 1000},
        density={"interval": 3},
    )


@pytest.fixture(scope="session")
def sphere_dataset(tmp_path_factory):
    """8 views of the sphere preset at 16x16; views 0 and 4 are held out."""
    root = tmp_path_factory.mktemp("sphere_dataset")
    cfg = SceneConfig(preset="sphere", n_views=8, resolution=16, test_stride=4, seed=0)
    generate_dataset(cfg, root)
    return SceneDataset(root)

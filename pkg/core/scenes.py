"""Procedural scenes with exact analytic SDFs and their ground-truth renderings."""
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from models.camera import Camera, camera_from_fov, image_rays
from models.schemas import SceneConfig
from utils.geometry import look_at, rotation_about

logger = logging.getLogger(__name__)

TRACE_STEPS = 64
TRACE_EPSILON = 1e-4
NORMAL_STEP = 1e-4


@dataclass
class Shape:
    """One analytic primitive; `rotation` maps local to world axes."""
    kind: str
    center: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    size: Tuple[float, ...] = (0.5,)
    albedo: Tuple[float, float, float] = (0.8, 0.8, 0.8)
    rotation: Optional[np.ndarray] = None
    textured: bool = False

    def to_local(self, x: torch.Tensor) -> torch.Tensor:
        local = x - torch.as_tensor(self.center, dtype=x.dtype)
        if self.rotation is not None:
            local = local @ torch.as_tensor(self.rotation, dtype=x.dtype)
        return local

    def to_world(self, local: torch.Tensor) -> torch.Tensor:
        if self.rotation is not None:
            local = local @ torch.as_tensor(self.rotation, dtype=local.dtype).T
        return local + torch.as_tensor(self.center, dtype=local.dtype)


@dataclass
class AnalyticScene:
    """Union of shapes lit by one directional light plus ambient."""
    shapes: List[Shape]
    light: Tuple[float, float, float] = (0.4, -0.7, -0.6)
    ambient: float = 0.25
    name: str = "scene"

    def light_direction(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        """Unit vector pointing towards the light."""
        v = -torch.tensor(self.light, dtype=dtype)
        return v / v.norm()


# ---------------------------
# Distance functions
# ---------------------------


def sphere_sdf(local: torch.Tensor, radius: float) -> torch.Tensor:
    return local.norm(dim=-1) - radius


def box_sdf(local: torch.Tensor, half_extents: Sequence[float]) -> torch.Tensor:
    q = local.abs() - torch.as_tensor(half_extents, dtype=local.dtype)
    outside = q.clamp_min(0.0).norm(dim=-1)
    inside = q.amax(dim=-1).clamp_max(0.0)
    return outside + inside


def torus_sdf(local: torch.Tensor, major: float, minor: float) -> torch.Tensor:
    """Torus around the local y axis."""
    ring = torch.sqrt(local[..., 0] ** 2 + local[..., 2] ** 2) - major
    return torch.sqrt(ring ** 2 + local[..., 1] ** 2) - minor


def shape_sdf(shape: Shape, x: torch.Tensor) -> torch.Tensor:
    local = shape.to_local(x)
    if shape.kind == "sphere":
        return sphere_sdf(local, shape.size[0])
    if shape.kind == "box":
        return box_sdf(local, shape.size)
    if shape.kind == "torus":
        return torus_sdf(local, shape.size[0], shape.size[1])
    raise ValueError(f"Unknown shape kind: {shape.kind}")


def analytic_sdf(scene: AnalyticScene, x: torch.Tensor) -> torch.Tensor:
    """Union by min over the scene's shapes; x is (..., 3)."""
    values = torch.stack([shape_sdf(shape, x) for shape in scene.shapes], dim=-1)
    return values.amin(dim=-1)


def scene_sdf_fn(scene: AnalyticScene):
    """Callable x -> sdf, for fitting and mesh extraction."""
    return lambda x: analytic_sdf(scene, x)


def _albedo(scene: AnalyticScene, x: torch.Tensor) -> torch.Tensor:
    values = torch.stack([shape_sdf(shape, x) for shape in scene.shapes], dim=-1)
    nearest = values.argmin(dim=-1)
    table = torch.tensor([s.albedo for s in scene.shapes], dtype=x.dtype)
    albedo = table[nearest]
    textured = torch.tensor([s.textured for s in scene.shapes])[nearest]
    # world-space checker on textured shapes
    checker = (torch.floor(x * 8.0).sum(dim=-1) % 2).to(x.dtype)
    factor = torch.where(textured, 0.7 + 0.3 * checker, torch.ones_like(checker))
    return albedo * factor.unsqueeze(-1)


def sdf_normals(scene: AnalyticScene, x: torch.Tensor, h: float = NORMAL_STEP) -> torch.Tensor:
    """Normalized central-difference gradient."""
    offsets = torch.eye(3, dtype=x.dtype) * h
    grad = torch.stack([
        analytic_sdf(scene, x + offsets[i]) - analytic_sdf(scene, x - offsets[i]) for i in range(3)
    ], dim=-1) / (2 * h)
    return grad / grad.norm(dim=-1, keepdim=True).clamp_min(1e-12)


# ---------------------------
# Rendering
# ---------------------------


@dataclass
class GroundTruthView:
    """(H, W, ...) maps; depth is distance along the pixel ray, 0 on background."""
    color: torch.Tensor
    depth: torch.Tensor
    normal: torch.Tensor
    mask: torch.Tensor


def sphere_trace(
    scene: AnalyticScene,
    origins: torch.Tensor,
    directions: torch.Tensor,
    far: float = 10.0,
    steps: int = TRACE_STEPS,
    epsilon: float = TRACE_EPSILON,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """March each ray by the SDF value; returns hit distance and hit mask."""
    t = torch.zeros(origins.shape[0], dtype=origins.dtype)
    done = torch.zeros(origins.shape[0], dtype=torch.bool)
    for _ in range(steps):
        d = analytic_sdf(scene, origins + t.unsqueeze(-1) * directions)
        done = done | (d.abs() < epsilon) | (t > far)
        t = torch.where(done, t, t + d)
    d = analytic_sdf(scene, origins + t.unsqueeze(-1) * directions)
    hit = (d.abs() < epsilon) & (t <= far)
    return t, hit


def render_ground_truth(scene: AnalyticScene, camera: Camera) -> GroundTruthView:
    """Sphere-traced, Lambertian-shaded reference view."""
    origins, directions = image_rays(camera, dtype=torch.float64)
    t, hit = sphere_trace(scene, origins, directions)
    points = origins + t.unsqueeze(-1) * directions
    normals = sdf_normals(scene, points)
    # normals facing away from the camera only occur on misses
    lambert = (normals * scene.light_direction(torch.float64)).sum(dim=-1).clamp_min(0.0)
    shade = scene.ambient + (1.0 - scene.ambient) * lambert
    color = _albedo(scene, points) * shade.unsqueeze(-1)
    mask = hit
    zero3 = torch.zeros_like(color)
    h, w = camera.height, camera.width
    return GroundTruthView(
        color=torch.where(mask.unsqueeze(-1), color, zero3).clamp(0.0, 1.0).reshape(h, w, 3).float(),
        depth=torch.where(mask, t, torch.zeros_like(t)).reshape(h, w).float(),
        normal=torch.where(mask.unsqueeze(-1), normals, zero3).reshape(h, w, 3).float(),
        mask=mask.reshape(h, w),
    )


# ---------------------------
# Surface samples
# ---------------------------


def _sample_shape_surface(shape: Shape, n: int, rng: np.random.Generator) -> np.ndarray:
    if shape.kind == "sphere":
        v = rng.normal(size=(n, 3))
        local = shape.size[0] * v / np.linalg.norm(v, axis=1, keepdims=True)
    elif shape.kind == "box":
        half = np.asarray(shape.size, dtype=np.float64)
        areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
        axis = rng.choice(3, size=n, p=areas / areas.sum())
        local = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
        sign = rng.choice([-1.0, 1.0], size=n)
        local[np.arange(n), axis] = sign * half[axis]
    elif shape.kind == "torus":
        major, minor = shape.size[0], shape.size[1]
        points = []
        while sum(len(p) for p in points) < n:
            theta = rng.uniform(0, 2 * math.pi, size=2 * n)
            phi = rng.uniform(0, 2 * math.pi, size=2 * n)
            accept = rng.uniform(0, 1, size=2 * n) < (major + minor * np.cos(theta)) / (major + minor)
            theta, phi = theta[accept], phi[accept]
            ring = major + minor * np.cos(theta)
            points.append(np.stack([ring * np.cos(phi), minor * np.sin(theta), ring * np.sin(phi)], axis=1))
        local = np.concatenate(points)[:n]
    else:
        raise ValueError(f"Unknown shape kind: {shape.kind}")
    return shape.to_world(torch.as_tensor(local, dtype=torch.float64)).numpy()


def shape_area(shape: Shape) -> float:
    if shape.kind == "sphere":
        return 4 * math.pi * shape.size[0] ** 2
    if shape.kind == "box":
        a, b, c = shape.size
        return 8 * (a * b + b * c + a * c)
    if shape.kind == "torus":
        return 4 * math.pi ** 2 * shape.size[0] * shape.size[1]
    raise ValueError(f"Unknown shape kind: {shape.kind}")


def surface_samples(scene: AnalyticScene, n: int, seed: int = 0) -> torch.Tensor:
    """
    Points distributed uniformly by area over the union's visible surface.

    Samples buried inside another shape are dropped, so slightly fewer than n may return.
    """
    rng = np.random.default_rng(seed)
    areas = np.array([shape_area(s) for s in scene.shapes])
    counts = rng.multinomial(n, areas / areas.sum())
    parts = [_sample_shape_surface(s, int(c), rng) for s, c in zip(scene.shapes, counts) if c > 0]
    points = torch.as_tensor(np.concatenate(parts), dtype=torch.float64)
    keep = analytic_sdf(scene, points) > -1e-6
    return points[keep]


# ---------------------------
# Presets and cameras
# ---------------------------


def make_scene(preset: str) -> AnalyticScene:
    """Named scene presets."""
    if preset == "sphere-box":
        shapes = [
            Shape("sphere", (-0.4, 0.0, 0.0), (0.35,), (0.85, 0.35, 0.3), textured=True),
            Shape("box", (0.4, 0.0, 0.0), (0.25, 0.25, 0.25), (0.3, 0.55, 0.85),
                  rotation=rotation_about((0.0, 1.0, 0.0), math.radians(30.0))),
        ]
    elif preset == "sphere":
        shapes = [Shape("sphere", (0.0, 0.0, 0.0), (0.5,), (0.8, 0.6, 0.4), textured=True)]
    elif preset == "torus":
        shapes = [Shape("torus", (0.0, 0.0, 0.0), (0.45, 0.15), (0.5, 0.8, 0.4), textured=True,
                        rotation=rotation_about((1.0, 0.0, 0.0), math.radians(60.0)))]
    elif preset == "box":
        shapes = [Shape("box", (0.0, 0.0, 0.0), (0.35, 0.25, 0.3), (0.7, 0.7, 0.75),
                        rotation=rotation_about((0.0, 1.0, 0.0), math.radians(20.0)))]
    else:
        raise ValueError(f"Unknown scene preset: {preset}")
    return AnalyticScene(shapes=shapes, name=preset)


def orbit_cameras(cfg: SceneConfig) -> List[Camera]:
    """
    Cameras on a Fibonacci spiral around the origin, jittered in radius and angle.

    Every position stays within jitter * orbit_radius of the orbit sphere.
    """
    rng = np.random.default_rng(cfg.seed)
    cameras = []
    golden = math.pi * (3.0 - math.sqrt(5.0))
    for i in range(cfg.n_views):
        y = 0.8 - 1.4 * (i + 0.5) / cfg.n_views
        ring = math.sqrt(max(0.0, 1.0 - y * y))
        direction = np.array([ring * math.cos(golden * i), y, ring * math.sin(golden * i)])
        direction = direction + rng.uniform(-cfg.jitter, cfg.jitter, size=3)
        direction /= np.linalg.norm(direction)
        radius = cfg.orbit_radius * (1.0 + rng.uniform(-cfg.jitter, cfg.jitter))
        pose = look_at(radius * direction)
        cameras.append(camera_from_fov(cfg.resolution, cfg.resolution, cfg.fov_degrees, pose))
    return cameras


def split_indices(n_views: int, stride: int = 8) -> Tuple[List[int], List[int]]:
    """Every stride-th view (starting at 0) is a test view."""
    test = [i for i in range(n_views) if i % stride == 0]
    train = [i for i in range(n_views) if i % stride != 0]
    return train, test

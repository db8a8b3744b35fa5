"""Pinhole cameras, rays and image buffers shared by both branches.

Convention: right-handed, camera looks down +z, x right, y down. Pixel (px, py)
has its centre at image coordinates (px + 0.5, py + 0.5).
"""
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Tuple

import numpy as np
import torch
from pydantic import BaseModel, Field

from core.errors import PixelOutOfRangeError, ShapeMismatchError


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with a camera-to-world pose."""
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: np.ndarray = field(default_factory=lambda: np.eye(3, 4))

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("resolution must be positive")
        pose = np.asarray(self.pose, dtype=np.float64).reshape(3, 4)
        rot = pose[:, :3]
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-6) or abs(np.linalg.det(rot) - 1.0) > 1e-6:
            raise ValueError("pose rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "pose", pose)

    def rotation(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        """Camera-to-world rotation."""
        return torch.as_tensor(self.pose[:, :3], dtype=dtype)

    def position(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        """Camera centre in world space."""
        return torch.as_tensor(self.pose[:, 3], dtype=dtype)

    def intrinsics(self) -> Tuple[float, float, float, float]:
        return self.fx, self.fy, self.cx, self.cy


@dataclass(frozen=True)
class Ray:
    """Ray with unit direction."""
    origin: torch.Tensor
    direction: torch.Tensor

    def __post_init__(self):
        norm = float(self.direction.detach().norm())
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"ray direction must be unit length, got norm {norm}")

    def at(self, t: float) -> torch.Tensor:
        return self.origin + t * self.direction


class Projection(NamedTuple):
    """Result of projecting one world point."""
    px: float
    py: float
    depth: float
    visible: bool


IMAGE_KINDS = ("color", "depth", "normal", "alpha", "mask")


@dataclass
class ImageBuffer:
    """Row-major (H, W, C) image with C = 1 (depth/alpha/mask) or 3 (color/normal)."""
    data: torch.Tensor
    kind: str = "color"

    def __post_init__(self):
        if self.kind not in IMAGE_KINDS:
            raise ValueError(f"unknown image kind {self.kind!r}; expected one of {IMAGE_KINDS}")
        if self.data.dim() == 2:
            self.data = self.data.unsqueeze(-1)
        if self.data.dim() != 3 or self.data.shape[-1] not in (1, 3):
            raise ShapeMismatchError(f"image buffer must be (H, W, 1|3), got {tuple(self.data.shape)}")
        values = self.data.detach()
        if self.kind == "depth" and bool((values < 0).any()):
            raise ValueError("depth values must be non-negative")
        if self.kind == "normal" and bool((values.abs() > 1 + 1e-6).any()):
            raise ValueError("normal channels must lie in [-1, 1]")

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def channels(self) -> int:
        return int(self.data.shape[2])

    def numpy(self) -> np.ndarray:
        """(H, W) for single-channel buffers, (H, W, 3) otherwise."""
        array = self.data.detach().cpu().numpy()
        return array[..., 0] if self.channels == 1 else array


# ---------------------------
# Operations
# ---------------------------


def ray_for_pixel(camera: Camera, px: float, py: float, dtype: torch.dtype = torch.float64) -> Ray:
    """
    Back-project the centre of pixel (px, py) into a world-space ray.

    Args:
        camera: Camera
        px: column, 0 <= px < width
        py: row, 0 <= py < height

    Returns:
        Ray from the camera centre through the pixel centre
    """
    if not (0 <= px < camera.width and 0 <= py < camera.height):
        raise PixelOutOfRangeError(
            f"pixel ({px}, {py}) outside {camera.width}x{camera.height} image"
        )
    origins, directions = pixel_rays(
        camera, torch.tensor([float(px)], dtype=dtype), torch.tensor([float(py)], dtype=dtype)
    )
    return Ray(origin=origins[0], direction=directions[0])


def pixel_rays(camera: Camera, px: torch.Tensor, py: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Batched back-projection of pixel centres.

    Args:
        camera: Camera
        px, py: (N,) pixel indices (float or int)

    Returns:
        origins (N, 3), unit directions (N, 3), in the dtype of px (float32 for ints)
    """
    dtype = px.dtype if px.is_floating_point() else torch.float32
    x = (px.to(dtype) + 0.5 - camera.cx) / camera.fx
    y = (py.to(dtype) + 0.5 - camera.cy) / camera.fy
    dirs_cam = torch.stack([x, y, torch.ones_like(x)], dim=-1)
    dirs = dirs_cam @ camera.rotation(dtype).T
    dirs = dirs / dirs.norm(dim=-1, keepdim=True)
    origins = camera.position(dtype).expand_as(dirs)
    return origins, dirs


def image_rays(camera: Camera, dtype: torch.dtype = torch.float32) -> Tuple[torch.Tensor, torch.Tensor]:
    """Rays for every pixel, row-major: (H*W, 3) origins and directions."""
    ys, xs = torch.meshgrid(
        torch.arange(camera.height, dtype=dtype),
        torch.arange(camera.width, dtype=dtype),
        indexing="ij",
    )
    return pixel_rays(camera, xs.reshape(-1), ys.reshape(-1))


def world_to_camera(camera: Camera, points: torch.Tensor) -> torch.Tensor:
    """Transform (N, 3) world points into camera space."""
    rot = camera.rotation(points.dtype)
    return (points - camera.position(points.dtype)) @ rot


def project_points(camera: Camera, points: torch.Tensor, min_depth: float = 1e-6):
    """
    Batched perspective projection.

    Returns:
        uv (N, 2) continuous image coordinates, depth (N,) camera-space z, visible (N,) bool
    """
    cam = world_to_camera(camera, points)
    z = cam[:, 2]
    visible = z > min_depth
    safe_z = torch.where(visible, z, torch.ones_like(z))
    u = camera.fx * cam[:, 0] / safe_z + camera.cx
    v = camera.fy * cam[:, 1] / safe_z + camera.cy
    return torch.stack([u, v], dim=-1), z, visible


def project_point(camera: Camera, x) -> Projection:
    """
    Project one world point.

    Points with camera-space z <= 1e-6 come back with visible=False.
    """
    point = torch.as_tensor(x, dtype=torch.float64).reshape(1, 3)
    uv, depth, visible = project_points(camera, point)
    return Projection(float(uv[0, 0]), float(uv[0, 1]), float(depth[0]), bool(visible[0]))


# ---------------------------
# Serialization
# ---------------------------


class CameraRecord(BaseModel):
    """One structured-text record per view."""
    index: int
    fx: float = Field(..., gt=0)
    fy: float = Field(..., gt=0)
    cx: float
    cy: float
    width: int = Field(..., gt=0)
    height: int = Field(..., gt=0)
    pose: List[float] = Field(..., min_length=12, max_length=12, description="3x4 camera-to-world, row-major")

    @classmethod
    def from_camera(cls, index: int, camera: Camera) -> "CameraRecord":
        return cls(
            index=index, fx=camera.fx, fy=camera.fy, cx=camera.cx, cy=camera.cy,
            width=camera.width, height=camera.height,
            pose=[float(v) for v in camera.pose.reshape(-1)],
        )

    def to_camera(self) -> Camera:
        return Camera(
            fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy,
            width=self.width, height=self.height,
            pose=np.asarray(self.pose, dtype=np.float64).reshape(3, 4),
        )


def camera_from_fov(width: int, height: int, fov_degrees: float, pose: Optional[np.ndarray] = None) -> Camera:
    """Camera with square pixels and the given horizontal field of view."""
    focal = 0.5 * width / np.tan(0.5 * np.deg2rad(fov_degrees))
    return Camera(
        fx=float(focal), fy=float(focal), cx=0.5 * width, cy=0.5 * height,
        width=width, height=height, pose=np.eye(3, 4) if pose is None else pose,
    )


def pixel_cosines(camera: Camera, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """
    (H, W) camera-space z of each unit pixel ray.

    Ray distance t and camera depth z relate by z = t * cosine.
    """
    ys, xs = torch.meshgrid(
        torch.arange(camera.height, dtype=dtype),
        torch.arange(camera.width, dtype=dtype),
        indexing="ij",
    )
    x = (xs + 0.5 - camera.cx) / camera.fx
    y = (ys + 0.5 - camera.cy) / camera.fy
    return 1.0 / torch.sqrt(x * x + y * y + 1.0)

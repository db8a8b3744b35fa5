"""Rotation and frame helpers shared by cameras, Gaussians and scenes."""
import math
from typing import Optional, Tuple

import numpy as np
import torch


def quaternion_to_rotation(q: torch.Tensor) -> torch.Tensor:
    """
    Convert unit quaternions (w, x, y, z) to rotation matrices.

    Args:
        q: (..., 4) quaternions, assumed normalized

    Returns:
        (..., 3, 3) rotation matrices
    """
    w, x, y, z = q.unbind(-1)
    return torch.stack([
        torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], dim=-1),
        torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], dim=-1),
        torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], dim=-1),
    ], dim=-2)


def axis_angle_quaternion(axis, angle: float) -> Tuple[float, float, float, float]:
    """Quaternion (w, x, y, z) rotating by `angle` radians about `axis`."""
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    half = 0.5 * angle
    s = math.sin(half)
    return (math.cos(half), float(a[0] * s), float(a[1] * s), float(a[2] * s))


def rotation_about(axis, angle: float) -> np.ndarray:
    """3x3 rotation matrix about `axis` (numpy, float64)."""
    q = torch.tensor(axis_angle_quaternion(axis, angle), dtype=torch.float64)
    return quaternion_to_rotation(q).numpy()


def look_at(position, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """
    Camera-to-world pose looking from `position` at `target`.

    Camera frame: x right, y down, z forward (+z is the viewing direction).

    Returns:
        (3, 4) float64 pose [R | t]
    """
    eye = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    up_vec = np.asarray(up, dtype=np.float64)
    if abs(float(np.dot(forward, up_vec))) > 0.999:
        up_vec = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, up_vec)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    pose = np.zeros((3, 4), dtype=np.float64)
    pose[:, 0] = right
    pose[:, 1] = down
    pose[:, 2] = forward
    pose[:, 3] = eye
    return pose


def tangent_basis(normal: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Two unit vectors spanning the plane orthogonal to each normal.

    Args:
        normal: (..., 3) unit normals

    Returns:
        (u, v) each (..., 3), with u, v, normal orthonormal
    """
    # pick the world axis least aligned with the normal
    helper = torch.zeros_like(normal)
    idx = normal.abs().argmin(dim=-1, keepdim=True)
    helper.scatter_(-1, idx, 1.0)
    u = torch.linalg.cross(normal, helper, dim=-1)
    u = u / u.norm(dim=-1, keepdim=True)
    v = torch.linalg.cross(normal, u, dim=-1)
    return u, v


def random_unit_vectors(n: int, generator: Optional[torch.Generator] = None,
                        dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Uniform directions on the unit sphere."""
    v = torch.randn(n, 3, generator=generator, dtype=dtype)
    return v / v.norm(dim=-1, keepdim=True).clamp_min(1e-12)

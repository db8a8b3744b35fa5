"""Evaluation metrics: PSNR, SSIM and Chamfer distance."""
import logging
import math
from typing import Dict

import numpy as np
import torch
from scipy.spatial import cKDTree

from core.errors import EmptyPointSetError, ShapeMismatchError
from core.losses import ssim
from core.mesh import TriangleMesh
from models.camera import ImageBuffer

logger = logging.getLogger(__name__)

PSNR_CSV_CAP = 99.0


def psnr(a: torch.Tensor, b: torch.Tensor, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE); +inf when the images are identical."""
    if a.shape != b.shape:
        raise ShapeMismatchError(f"psnr: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")
    mse = float(((a.double() - b.double()) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def psnr_for_csv(value: float) -> float:
    return min(value, PSNR_CSV_CAP)


def ssim_value(a: torch.Tensor, b: torch.Tensor) -> float:
    return float(ssim(a.double(), b.double()))


def chamfer_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric mean of nearest-neighbour distances in both directions."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise EmptyPointSetError("chamfer distance needs two non-empty point sets")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


def mesh_chamfer(mesh: TriangleMesh, reference: np.ndarray, n: int = 100_000, seed: int = 0) -> float:
    """Chamfer distance between area-uniform mesh samples and reference surface samples."""
    if mesh.is_empty:
        raise EmptyPointSetError("cannot evaluate an empty mesh")
    return chamfer_distance(mesh.sample_points(n, seed), reference)


def image_metrics(rendered: ImageBuffer, target: ImageBuffer) -> Dict[str, float]:
    if rendered.kind != target.kind:
        raise ShapeMismatchError(f"cannot compare a {rendered.kind} buffer with a {target.kind} buffer")
    return {"psnr": psnr(rendered.data, target.data), "ssim": ssim_value(rendered.data, target.data)}

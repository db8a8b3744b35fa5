"""Zero-level-set extraction and triangle mesh utilities."""
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Tuple, Union

import mcubes
import numpy as np
import torch

from core.errors import NonFiniteInputError
from models.sdf_field import SdfField

logger = logging.getLogger(__name__)

DEGENERATE_AREA = 1e-12

SdfSource = Union[SdfField, Callable[[torch.Tensor], torch.Tensor]]


@dataclass
class TriangleMesh:
    """Indexed triangle mesh in world units."""
    vertices: np.ndarray
    triangles: np.ndarray
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def edge_counts(self) -> np.ndarray:
        """Number of triangles sharing each undirected edge."""
        edges = np.concatenate([self.triangles[:, [0, 1]], self.triangles[:, [1, 2]], self.triangles[:, [2, 0]]])
        edges = np.sort(edges, axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        return counts

    def is_watertight(self) -> bool:
        return not self.is_empty and bool(np.all(self.edge_counts() == 2))

    def sample_points(self, n: int, seed: int = 0) -> np.ndarray:
        """n points uniformly distributed by triangle area."""
        if self.is_empty:
            return np.zeros((0, 3))
        rng = np.random.default_rng(seed)
        areas = self.areas()
        faces = rng.choice(len(self.triangles), size=n, p=areas / areas.sum())
        u = rng.uniform(size=(n, 1))
        v = rng.uniform(size=(n, 1))
        flip = (u + v) > 1.0
        u = np.where(flip, 1.0 - u, u)
        v = np.where(flip, 1.0 - v, v)
        a, b, c = (self.vertices[self.triangles[faces, i]] for i in range(3))
        return a + u * (b - a) + v * (c - a)


def _as_function(source: SdfSource) -> Callable[[torch.Tensor], torch.Tensor]:
    if isinstance(source, SdfField):
        dtype = source.encoder.table.dtype
        return lambda x: source(x.to(dtype))[0]
    return source


def evaluate_grid(
    source: SdfSource,
    resolution: int,
    domain: Tuple[float, float] = (-1.0, 1.0),
    chunk: int = 65536,
) -> np.ndarray:
    """
    SDF samples on the (resolution + 1)^3 lattice of the domain box, indexed [i, j, k] = (x, y, z).
    """
    fn = _as_function(source)
    lo, hi = domain
    axis = torch.linspace(lo, hi, resolution + 1, dtype=torch.float64)
    grid = torch.stack(torch.meshgrid(axis, axis, axis, indexing="ij"), dim=-1).reshape(-1, 3)
    values = []
    with torch.no_grad():
        for start in range(0, grid.shape[0], chunk):
            values.append(fn(grid[start:start + chunk]).double())
    volume = torch.cat(values).reshape(resolution + 1, resolution + 1, resolution + 1).numpy()
    bad = ~np.isfinite(volume)
    if bad.any():
        i, j, k = (int(v) for v in np.argwhere(bad)[0])
        point = [float(axis[i]), float(axis[j]), float(axis[k])]
        raise NonFiniteInputError(f"non-finite SDF sample at grid index ({i}, {j}, {k}), world point {point}")
    return volume


def weld_vertices(vertices: np.ndarray, triangles: np.ndarray, tolerance: float = 1e-9):
    """Merge coincident vertices and drop degenerate or unreferenced geometry."""
    if len(triangles) == 0:
        return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)
    keys = np.round(vertices / tolerance).astype(np.int64)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    vertices = vertices[first]
    triangles = inverse.reshape(-1)[triangles]
    distinct = (triangles[:, 0] != triangles[:, 1]) & (triangles[:, 1] != triangles[:, 2]) & (triangles[:, 0] != triangles[:, 2])
    triangles = triangles[distinct]
    if len(triangles):
        mesh = TriangleMesh(vertices, triangles)
        triangles = triangles[mesh.areas() > DEGENERATE_AREA]
    used, remap = np.unique(triangles.reshape(-1), return_inverse=True)
    return vertices[used], remap.reshape(-1, 3)


def vertex_normals(source: SdfSource, vertices: np.ndarray, chunk: int = 65536) -> np.ndarray:
    """Normalized SDF gradients at the vertices."""
    fn = _as_function(source)
    out = []
    for start in range(0, len(vertices), chunk):
        x = torch.as_tensor(vertices[start:start + chunk], dtype=torch.float64).requires_grad_(True)
        with torch.enable_grad():
            (grad,) = torch.autograd.grad(fn(x).sum(), x)
        grad = grad.double()
        out.append((grad / grad.norm(dim=-1, keepdim=True).clamp_min(1e-12)).numpy())
    return np.concatenate(out) if out else np.zeros((0, 3))


def marching_cubes(
    source: SdfSource,
    resolution: int,
    iso: float = 0.0,
    domain: Optional[Tuple[float, float]] = None,
) -> TriangleMesh:
    """
    Extract the iso level of an SDF field (or any x -> sdf callable) over the domain box.

    A field with uniform sign yields an empty mesh.
    """
    if resolution < 8:
        raise ValueError("marching cubes resolution must be at least 8")
    if domain is None:
        domain = (source.cfg.domain_min, source.cfg.domain_max) if isinstance(source, SdfField) else (-1.0, 1.0)
    volume = evaluate_grid(source, resolution, domain)
    if volume.min() > iso or volume.max() < iso:
        logger.info("SDF has uniform sign on the grid; mesh is empty")
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    # negated so triangles wind outward for an outside-positive SDF
    verts, tris = mcubes.marching_cubes(-volume, -iso)
    lo, hi = domain
    verts = lo + verts * (hi - lo) / resolution
    verts, tris = weld_vertices(np.asarray(verts, dtype=np.float64), np.asarray(tris, dtype=np.int64))
    normals = vertex_normals(source, verts) if len(verts) else None
    logger.info(f"Marching cubes @ {resolution}: {len(verts)} vertices, {len(tris)} triangles")
    return TriangleMesh(verts, tris, normals)

"""Mesh (PLY / OBJ) and Gaussian-set (PLY) files."""
import logging
from pathlib import Path

import numpy as np
import torch
from plyfile import PlyData, PlyElement

from core.mesh import TriangleMesh
from models.gaussians import GaussianSet

logger = logging.getLogger(__name__)

# per-vertex Gaussian attributes, in file order
GAUSSIAN_FIELDS = (
    ["x", "y", "z"]
    + [f"scale_{i}" for i in range(3)]
    + [f"rot_{i}" for i in range(4)]
    + ["opacity"]
    + [f"color_{i}" for i in range(3)]
)


def write_mesh_ply(path: Path, mesh: TriangleMesh, text: bool = True):
    vertex_dtype = [("x", "f4"), ("y", "f4"), ("z", "f4")]
    if mesh.normals is not None:
        vertex_dtype += [("nx", "f4"), ("ny", "f4"), ("nz", "f4")]
    vertices = np.empty(len(mesh.vertices), dtype=vertex_dtype)
    vertices["x"], vertices["y"], vertices["z"] = mesh.vertices.T
    if mesh.normals is not None:
        vertices["nx"], vertices["ny"], vertices["nz"] = mesh.normals.T
    faces = np.empty(len(mesh.triangles), dtype=[("vertex_indices", "i4", (3,))])
    faces["vertex_indices"] = mesh.triangles
    PlyData(
        [PlyElement.describe(vertices, "vertex"), PlyElement.describe(faces, "face")], text=text
    ).write(str(path))


def read_mesh_ply(path: Path) -> TriangleMesh:
    ply = PlyData.read(str(path))
    v = ply["vertex"]
    vertices = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
    normals = None
    if "nx" in v.data.dtype.names:
        normals = np.stack([v["nx"], v["ny"], v["nz"]], axis=1).astype(np.float64)
    triangles = np.stack(ply["face"]["vertex_indices"]).astype(np.int64) if len(ply["face"].data) else np.zeros((0, 3))
    return TriangleMesh(vertices, triangles, normals)


def write_mesh_obj(path: Path, mesh: TriangleMesh):
    with open(path, "w", encoding="utf-8") as f:
        for x, y, z in mesh.vertices:
            f.write(f"v {x:.6f} {y:.6f} {z:.6f}\n")
        if mesh.normals is not None:
            for x, y, z in mesh.normals:
                f.write(f"vn {x:.6f} {y:.6f} {z:.6f}\n")
        for a, b, c in mesh.triangles + 1:
            if mesh.normals is not None:
                f.write(f"f {a}//{a} {b}//{b} {c}//{c}\n")
            else:
                f.write(f"f {a} {b} {c}\n")


def write_gaussians_ply(path: Path, gaussians: GaussianSet):
    """Binary PLY with raw attributes: log-scales, quaternion, opacity logit, color logits."""
    columns = torch.cat([
        gaussians.means.detach(), gaussians.log_scales.detach(), gaussians.quats.detach(),
        gaussians.opacity_logits.detach().unsqueeze(-1), gaussians.color_logits.detach(),
    ], dim=1).cpu().numpy().astype(np.float32)
    elements = np.empty(len(columns), dtype=[(name, "f4") for name in GAUSSIAN_FIELDS])
    for i, name in enumerate(GAUSSIAN_FIELDS):
        elements[name] = columns[:, i]
    PlyData([PlyElement.describe(elements, "vertex")]).write(str(path))
    logger.info(f"Wrote {len(columns)} Gaussians to {path}")


def read_gaussians_ply(path: Path) -> GaussianSet:
    v = PlyData.read(str(path))["vertex"]
    columns = torch.as_tensor(np.stack([np.asarray(v[name]) for name in GAUSSIAN_FIELDS], axis=1))
    return GaussianSet(
        means=columns[:, 0:3], log_scales=columns[:, 3:6], quats=columns[:, 6:10],
        opacity_logits=columns[:, 10], color_logits=columns[:, 11:14],
    )

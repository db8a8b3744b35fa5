"""extract-mesh: marching cubes on the trained SDF."""
import logging
from pathlib import Path

from commands.common import finish_manifest, reject_overrides, write_manifest
from core.mesh import marching_cubes
from core.trainer import load_trained
from data.ply import write_mesh_obj, write_mesh_ply
from utils.run_log import generate_run_id, log_event

logger = logging.getLogger(__name__)

HELP = "Extract the SDF zero level set as an ASCII PLY or OBJ mesh"


def add_arguments(parser):
    parser.add_argument("--checkpoint", required=True)
    parser.add_argument("--out", required=True, help="Mesh path; .obj writes OBJ, anything else PLY")
    parser.add_argument("--resolution", type=int, help="Cells per axis (default: mesh_resolution of the run)")
    parser.add_argument("--iso", type=float, default=0.0)


def run(args, overrides) -> int:
    reject_overrides("extract-mesh", overrides)
    cfg, field, _ = load_trained(args.checkpoint)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest = write_manifest(out.parent, "extract-mesh", cfg.seed)
    run_id = generate_run_id()
    field.set_active_levels(cfg.field.grid.levels)
    mesh = marching_cubes(field, args.resolution or cfg.mesh_resolution, args.iso)
    if mesh.is_empty:
        logger.warning("Extracted mesh is empty; the SDF has uniform sign on the grid")
    if out.suffix.lower() == ".obj":
        write_mesh_obj(out, mesh)
    else:
        write_mesh_ply(out, mesh)
    log_event(run_id, "mesh_extracted", path=str(out), vertices=len(mesh.vertices),
              triangles=len(mesh.triangles), watertight=mesh.is_watertight())
    finish_manifest(out.parent, manifest, 0)
    return 0

"""eval: PSNR / SSIM per held-out view and mesh Chamfer distance."""
import logging
from pathlib import Path

from commands.common import finish_manifest, reject_overrides, write_manifest
from core.experiments import EVAL_COLUMNS, SUMMARY_COLUMNS, evaluate_run
from core.trainer import load_trained
from data.checkpoint import load_checkpoint
from data.dataset import SceneDataset
from data.ply import write_mesh_ply
from utils.run_log import generate_run_id, log_event, write_csv

logger = logging.getLogger(__name__)

HELP = "Evaluate a checkpoint: per-view image metrics and mesh Chamfer distance (CSV)"


def add_arguments(parser):
    parser.add_argument("--checkpoint", required=True)
    parser.add_argument("--data", required=True)
    parser.add_argument("--out", required=True, help="Directory for views.csv, summary.csv and mesh.ply")
    parser.add_argument("--variant", default="full", help="Label written into the CSV rows")
    parser.add_argument("--chamfer-points", type=int, default=100_000)
    parser.add_argument("--resolution", type=int, help="Marching-cubes resolution override")


def run(args, overrides) -> int:
    reject_overrides("eval", overrides)
    cfg, field, gaussians = load_trained(args.checkpoint)
    dataset = SceneDataset(args.data)
    out = Path(args.out)
    manifest = write_manifest(out, "eval", cfg.seed)
    run_id = generate_run_id()
    log_event(run_id, "command_start", command="eval", checkpoint=str(args.checkpoint))
    report = evaluate_run(
        dataset, cfg, field, gaussians, variant=args.variant,
        chamfer_points=args.chamfer_points, mesh_resolution=args.resolution,
    )
    summary = dict(report["summary"], iterations=load_checkpoint(args.checkpoint)["iteration"])
    write_csv(out / "views.csv", EVAL_COLUMNS, report["views"])
    write_csv(out / "summary.csv", SUMMARY_COLUMNS, [summary])
    if not report["mesh"].is_empty:
        write_mesh_ply(out / "mesh.ply", report["mesh"])
    log_event(run_id, "command_finish", command="eval", chamfer=summary["chamfer"], psnr_gs=summary["psnr_gs"])
    finish_manifest(out, manifest, 0)
    return 0

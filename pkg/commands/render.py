"""render: write color, depth and normal maps of either branch from a checkpoint."""
import logging
from pathlib import Path

from commands.common import finish_manifest, reject_overrides, write_manifest
from core.experiments import render_branch
from core.trainer import load_trained
from data.dataset import SceneDataset
from data.image_io import write_pfm, write_ppm
from utils.run_log import generate_run_id, log_event

logger = logging.getLogger(__name__)

HELP = "Render views of the GS or SDF branch (PPM color, PFM depth and normals)"


def add_arguments(parser):
    parser.add_argument("--checkpoint", required=True)
    parser.add_argument("--data", required=True, help="Dataset whose cameras are rendered")
    parser.add_argument("--branch", choices=["gs", "sdf"], default="gs")
    parser.add_argument("--out", required=True, help="Output directory")
    parser.add_argument("--views", choices=["test", "train", "all"], default="test")


def select_views(dataset: SceneDataset, which: str):
    if which == "test":
        return list(dataset.test_indices)
    if which == "train":
        return list(dataset.train_indices)
    return list(range(len(dataset)))


def run(args, overrides) -> int:
    reject_overrides("render", overrides)
    cfg, field, gaussians = load_trained(args.checkpoint)
    dataset = SceneDataset(args.data)
    out = Path(args.out)
    manifest = write_manifest(out, "render", cfg.seed)
    run_id = generate_run_id()
    indices = select_views(dataset, args.views)
    log_event(run_id, "command_start", command="render", branch=args.branch, views=len(indices))
    for index in indices:
        image = render_branch(args.branch, cfg, field, gaussians, dataset.cameras[index])
        for kind, buffer in image.buffers().items():
            stem = out / f"{args.branch}_{index:03d}_{kind}"
            if kind == "color":
                write_ppm(stem.with_suffix(".ppm"), buffer.numpy())
            else:
                write_pfm(stem.with_suffix(".pfm"), buffer.numpy())
    logger.info(f"Rendered {len(indices)} {args.branch} views to {out}")
    log_event(run_id, "command_finish", command="render")
    finish_manifest(out, manifest, 0)
    return 0

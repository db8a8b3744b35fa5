"""train: run the three-phase optimization on a generated dataset."""
import logging
from pathlib import Path

import config
from commands.common import finish_manifest, schema_help, write_json, write_manifest
from core.trainer import load_trained, train
from data.checkpoint import latest_checkpoint
from data.dataset import SceneDataset
from data.ply import write_gaussians_ply
from models.schemas import TrainConfig, load_train_config
from utils.run_log import generate_run_id, log_event

logger = logging.getLogger(__name__)

HELP = "Train both branches and write checkpoints plus metrics.csv"


def add_arguments(parser):
    parser.add_argument("--data", required=True, help="Dataset directory from gen-scene")
    parser.add_argument("--run-dir", help="Run directory for all artifacts (default: $GSDF_RUNS_DIR/<name>)")
    parser.add_argument("--config", help="YAML TrainConfig (configs/desk_scale.yaml, ...)")
    parser.add_argument("--resume", nargs="?", const="latest",
                        help="Checkpoint to continue from; bare flag picks the newest in --run-dir")
    parser.add_argument("--until", type=int, help="Stop after this many total iterations")
    parser.epilog = schema_help(TrainConfig)


def run(args, overrides) -> int:
    cfg = load_train_config(args.config, overrides)
    run_dir = Path(args.run_dir) if args.run_dir else Path(config.RUNS_DIR) / cfg.name
    dataset = SceneDataset(args.data)
    resume = None
    if args.resume == "latest":
        resume = latest_checkpoint(run_dir)
    elif args.resume:
        resume = Path(args.resume)
    manifest = write_manifest(run_dir, "train", cfg.seed, args.config)
    write_json(run_dir / "config.json", cfg.model_dump(mode="json"))
    run_id = generate_run_id()
    log_event(run_id, "command_start", command="train", data=str(dataset.root), resume=str(resume) if resume else None)
    result = train(dataset, cfg, run_dir, resume=resume, run_id=run_id, until=args.until)
    _, _, gaussians = load_trained(result.checkpoint)
    write_gaussians_ply(run_dir / "gaussians.ply", gaussians)
    logger.info(f"Training finished at iteration {result.iterations}; checkpoint {result.checkpoint}")
    finish_manifest(run_dir, manifest, 0)
    return 0

"""ablate: train and evaluate the full method and its module ablations."""
import logging
from pathlib import Path

import config
from commands.common import finish_manifest, schema_help, write_json, write_manifest
from core.errors import ConfigError
from core.experiments import BASELINES, EVAL_COLUMNS, SUMMARY_COLUMNS, evaluate_run, experiment_configs
from core.trainer import load_trained, train
from data.dataset import SceneDataset
from models.schemas import TrainConfig, load_train_config
from utils.run_log import generate_run_id, log_event, write_csv

logger = logging.getLogger(__name__)

HELP = "Run full / no-guided-sampling / no-geometry-density-control / no-mutual-supervision and compare"


def add_arguments(parser):
    parser.add_argument("--data", required=True)
    parser.add_argument("--run-dir", help="Parent directory, one sub-run per variant (default: $GSDF_RUNS_DIR/<name>)")
    parser.add_argument("--config", help="Base YAML TrainConfig")
    parser.add_argument("--baselines", action="store_true", help=f"Also run {', '.join(BASELINES)}")
    parser.add_argument("--only", nargs="+", help="Restrict to these variant names")
    parser.add_argument("--chamfer-points", type=int, default=100_000)
    parser.epilog = schema_help(TrainConfig)


def run(args, overrides) -> int:
    base = load_train_config(args.config, overrides)
    dataset = SceneDataset(args.data)
    run_dir = Path(args.run_dir) if args.run_dir else Path(config.RUNS_DIR) / base.name
    manifest = write_manifest(run_dir, "ablate", base.seed, args.config)
    run_id = generate_run_id()
    wants_baselines = args.baselines or bool(set(args.only or []) & set(BASELINES))
    variants = experiment_configs(base, baselines=wants_baselines)
    if args.only:
        unknown = sorted(set(args.only) - set(variants))
        if unknown:
            raise ConfigError(f"Unknown variants: {', '.join(unknown)}", unknown)
        variants = {name: cfg for name, cfg in variants.items() if name in args.only}

    summaries, views = [], []
    for name, cfg in variants.items():
        sub_dir = run_dir / name
        log_event(run_id, "variant_start", variant=name)
        write_json(sub_dir / "config.json", cfg.model_dump(mode="json"))
        result = train(dataset, cfg, sub_dir, run_id=run_id)
        _, field, gaussians = load_trained(result.checkpoint)
        report = evaluate_run(dataset, cfg, field, gaussians, variant=name, chamfer_points=args.chamfer_points)
        summaries.append(dict(report["summary"], iterations=result.iterations))
        views.extend(report["views"])
        log_event(run_id, "variant_finish", variant=name, chamfer=report["summary"]["chamfer"])

    write_csv(run_dir / "ablation.csv", SUMMARY_COLUMNS, summaries)
    write_csv(run_dir / "ablation_views.csv", EVAL_COLUMNS, views)
    logger.info(f"Wrote comparison of {len(summaries)} variants to {run_dir / 'ablation.csv'}")
    finish_manifest(run_dir, manifest, 0)
    return 0

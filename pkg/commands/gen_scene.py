"""gen-scene: render a synthetic analytic-scene dataset."""
import logging
from pathlib import Path

from commands.common import finish_manifest, schema_help, write_manifest
from data.dataset import generate_dataset
from models.schemas import SceneConfig, apply_overrides, load_yaml_tree, validate_model
from utils.run_log import generate_run_id, log_event

logger = logging.getLogger(__name__)

HELP = "Render a synthetic multi-view dataset of an analytic scene"


def add_arguments(parser):
    parser.add_argument("--out", required=True, help="Dataset directory to write")
    parser.add_argument("--config", help="YAML file with SceneConfig keys")
    parser.add_argument("--preset", help="sphere-box | sphere | torus | box")
    parser.add_argument("--views", type=int, help="Number of views")
    parser.add_argument("--res", type=int, help="Square image resolution")
    parser.add_argument("--seed", type=int)
    parser.epilog = schema_help(SceneConfig)


def build_config(args, overrides) -> SceneConfig:
    tree = load_yaml_tree(args.config)
    flags = {"preset": args.preset, "n_views": args.views, "resolution": args.res, "seed": args.seed}
    tree.update({k: v for k, v in flags.items() if v is not None})
    return validate_model(SceneConfig, apply_overrides(tree, overrides))


def run(args, overrides) -> int:
    cfg = build_config(args, overrides)
    out = Path(args.out)
    manifest = write_manifest(out, "gen-scene", cfg.seed, args.config)
    run_id = generate_run_id()
    log_event(run_id, "command_start", command="gen-scene", preset=cfg.preset, out=str(out))
    generate_dataset(cfg, out)
    log_event(run_id, "command_finish", command="gen-scene", views=cfg.n_views)
    finish_manifest(out, manifest, 0)
    return 0

"""Helpers shared by the CLI commands: overrides, schema help, manifests."""
import json
import logging
import sys
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Type

from pydantic import BaseModel

import config
from core.errors import ConfigError
from models.schemas import RunManifest

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


def parse_overrides(tokens: List[str]) -> Dict[str, str]:
    """Turn leftover `--a.b value` tokens into {"a.b": "value"}."""
    overrides: Dict[str, str] = {}
    i = 0
    while i < len(tokens):
        token = tokens[i]
        if not token.startswith("--") or len(token) <= 2:
            raise ConfigError(f"Unexpected argument: {token}", [token])
        key = token[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"Override --{key} needs a value", [key])
            value = tokens[i + 1]
            i += 2
        overrides[key.replace("-", "_")] = value
    return overrides


def schema_lines(model: Type[BaseModel], prefix: str = "") -> List[str]:
    """Dotted keys with defaults and descriptions, nested models expanded."""
    lines = []
    for name, info in model.model_fields.items():
        key = f"{prefix}{name}"
        annotation = info.annotation
        if isinstance(annotation, type) and issubclass(annotation, BaseModel):
            lines.extend(schema_lines(annotation, key + "."))
            continue
        default = info.default
        text = f"  --{key} (default: {default})"
        if info.description:
            text += f"  {info.description}"
        lines.append(text)
    return lines


def schema_help(model: Type[BaseModel]) -> str:
    return "config keys (override with --key value):\n" + "\n".join(schema_lines(model))


def write_manifest(run_dir: Path, command: str, seed: int, config_path: Optional[str] = None,
                   argv: Optional[List[str]] = None) -> RunManifest:
    """Write (or replace) the single manifest of a run directory."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        command=command, config_path=config_path, run_dir=str(run_dir), version=config.VERSION,
        seed=seed, argv=list(sys.argv[1:] if argv is None else argv), started_at=datetime.utcnow(),
    )
    _dump(run_dir / MANIFEST_NAME, manifest)
    return manifest


def finish_manifest(run_dir: Path, manifest: RunManifest, status: int):
    manifest.finished_at = datetime.utcnow()
    manifest.exit_status = status
    _dump(Path(run_dir) / MANIFEST_NAME, manifest)


def _dump(path: Path, manifest: RunManifest):
    with open(path, "w", encoding="utf-8") as f:
        f.write(manifest.model_dump_json(indent=2))
        f.write("\n")


def write_json(path: Path, payload: Any):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True, default=str)
        f.write("\n")


def reject_overrides(command: str, overrides: Dict[str, str]):
    """Commands that read their config from a checkpoint take no overrides."""
    if overrides:
        raise ConfigError(f"{command} does not accept config overrides", sorted(overrides))

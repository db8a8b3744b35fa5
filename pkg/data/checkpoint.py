"""Versioned checkpoint files written with torch.save."""
import logging
from pathlib import Path
from typing import Any, Dict

import torch

from core.errors import ConfigError

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


def save_checkpoint(path: Path, payload: Dict[str, Any]):
    """Write atomically: temp file first, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = dict(payload, format_version=CHECKPOINT_VERSION)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    logger.info(f"Saved checkpoint {path} (iteration {payload.get('iteration')})")


def load_checkpoint(path: Path) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"Unsupported checkpoint version {version} in {path}")
    return payload


def latest_checkpoint(run_dir: Path) -> Path:
    """Newest `checkpoints/iter_*.pt` of a run, by iteration."""
    candidates = sorted(
        Path(run_dir).glob("checkpoints/iter_*.pt"),
        key=lambda p: int(p.stem.split("_")[-1]),
    )
    if not candidates:
        raise ConfigError(f"No checkpoints under {run_dir}")
    return candidates[-1]

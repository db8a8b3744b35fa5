"""Structured run logging: JSON event records, NDJSON files and CSV tables."""
import csv
import json
import logging
import math
import uuid
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

logger = logging.getLogger(__name__)


def generate_run_id() -> str:
    """Generate unique run ID."""
    return uuid.uuid4().hex[:12]


def log_event(run_id: str, event: str, **fields: Any):
    """
    Log one pipeline event as a JSON record.

    Args:
        run_id: Run ID
        event: Event name (phase_start, checkpoint, density_control, ...)
        **fields: Event payload
    """
    log_data = {
        "run_id": run_id,
        "event": event,
        "timestamp": datetime.utcnow().isoformat(),
    }
    if fields:
        log_data["payload"] = fields
    logger.info(json.dumps(log_data, default=str))


def append_jsonl(path: Path, records: Iterable[Dict[str, Any]]):
    """Append newline-delimited JSON records."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record, default=float) + "\n")


def read_jsonl(path: Path) -> List[Dict[str, Any]]:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def format_value(value: Any) -> str:
    """Fixed formatting so identical runs give identical CSV bytes."""
    if isinstance(value, float):
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return f"{value:.8g}"
    return str(value)


class CsvLog:
    """Append-only CSV with a fixed header, written on first use."""

    def __init__(self, path: Path, columns: List[str]):
        self.path = Path(path)
        self.columns = list(columns)

    def append(self, row: Dict[str, Any]):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        new_file = not self.path.exists()
        with open(self.path, "a", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            if new_file:
                writer.writerow(self.columns)
            writer.writerow([format_value(row.get(col, "")) for col in self.columns])

    def truncate_after(self, iteration: int, key: str = "iteration"):
        """Drop rows past `iteration` (resume from an earlier checkpoint)."""
        if not self.path.exists():
            return
        rows = read_csv(self.path)
        kept = [r for r in rows if int(r[key]) <= iteration]
        with open(self.path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(self.columns)
            for r in kept:
                writer.writerow([r.get(col, "") for col in self.columns])


def read_csv(path: Path) -> List[Dict[str, str]]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


def write_csv(path: Path, columns: List[str], rows: Iterable[Dict[str, Any]], mode: Optional[str] = "w"):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, mode, encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_value(row.get(col, "")) for col in columns])

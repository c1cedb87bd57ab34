# src/utils/file_io.py

import csv
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import yaml

from src.utils.versioning import SCHEMA_VERSION

METRICS_COLUMNS = ["run_id", "seed", "mu", "variant", "epoch", "step", "train_loss", "val_error"]
MODAL_COLUMNS = ["run_id", "layer", "step", "lambda_min", "lambda_max", "mu_max", "tau_max", "block_energy_ratio"]
PMD_COLUMNS = ["run_id", "layer", "step", "residual_rms", "update_norm_sq"]
CHANNEL_COLUMNS = ["run_id", "layer", "step", "channel", "input_variance"]

SERIES = {
    "metrics.csv": ("metrics", METRICS_COLUMNS),
    "modal.csv": ("modal", MODAL_COLUMNS),
    "pmd.csv": ("pmd", PMD_COLUMNS),
    "channel_variances.csv": ("channels", CHANNEL_COLUMNS),
}

COMPLETED = "completed"


@dataclass
class RunRecord:
    run_id: str
    config: dict
    seed: int
    mu: float
    variant: str
    alpha: float = 0.0
    metrics: List[dict] = field(default_factory=list)
    modal: List[dict] = field(default_factory=list)
    pmd: List[dict] = field(default_factory=list)
    channels: List[dict] = field(default_factory=list)
    outcome: str = COMPLETED
    diverged_at: Optional[int] = None
    topology: List[str] = field(default_factory=list)
    fingerprint: str = ""
    code_version: str = ""
    notes: Dict[str, object] = field(default_factory=dict)

    @staticmethod
    def unstable(step: int) -> str:
        return f"unstable at step {step}"

    def metadata(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "code_version": self.code_version,
            "run_id": self.run_id,
            "seed": self.seed,
            "mu": self.mu,
            "variant": self.variant,
            "alpha": self.alpha,
            "outcome": self.outcome,
            "diverged_at": self.diverged_at,
            "topology": self.topology,
            "topology_fingerprint": self.fingerprint,
            "notes": self.notes,
            "config": self.config,
        }


# -----------------------------
# Formatting
# -----------------------------
def format_cell(value) -> str:
    """Deterministic cell text: repr for floats (round-trips exactly), '' for None."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return repr(value)
    if hasattr(value, "item"):
        return format_cell(value.item())
    return str(value)


def parse_cell(text: str):
    if text == "":
        return None
    if text in ("true", "false"):
        return text == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            continue
    return text


def atomic_write(path: Path, content: str | bytes) -> None:
    """Write via temp file + rename so readers never see a partial file. The temp file never outlives a failure."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        if isinstance(content, bytes):
            with os.fdopen(fd, "wb") as f:
                f.write(content)
        else:
            with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
                f.write(content)
        os.replace(tmp, path)
    except OSError as e:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise OSError(f"Failed to write {path}: {e}") from e


# -----------------------------
# CSV
# -----------------------------
def render_csv(columns: Sequence[str], rows: Iterable[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([format_cell(row.get(c)) for c in columns])
    return buf.getvalue()


def write_csv_rows(path: Path, columns: Sequence[str], rows: Iterable[dict]) -> Path:
    atomic_write(Path(path), render_csv(columns, rows))
    return Path(path)


def read_csv_rows(path: Path) -> List[dict]:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8", newline="") as f:
            return [{k: parse_cell(v) for k, v in row.items()} for row in csv.DictReader(f)]
    except OSError as e:
        raise OSError(f"Failed to read {path}: {e}") from e


def csv_columns(path: Path) -> List[str]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        return next(csv.reader(f), [])


# -----------------------------
# JSON / YAML
# -----------------------------
def _json_safe(value):
    if isinstance(value, float) and not math.isfinite(value):
        return format_cell(value)
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    return value


def write_json(path: Path, data: dict) -> Path:
    atomic_write(Path(path), json.dumps(_json_safe(data), indent=2, sort_keys=True) + "\n")
    return Path(path)


def read_json(path: Path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def save_yaml_file(path: Path, data: dict) -> Path:
    """Dump YAML in insertion order, block style."""
    text = yaml.safe_dump(data, sort_keys=False, default_flow_style=False, indent=2, width=80)
    atomic_write(Path(path), text)
    return Path(path)


# -----------------------------
# Records
# -----------------------------
def metadata_name(record: RunRecord, many: bool) -> str:
    return f"run-{record.run_id}.json" if many else "run.json"


def write_records(records: Sequence[RunRecord], out_dir: str | Path) -> List[Path]:
    """
    One CSV per series (rows of every record, in record order) plus one JSON per run.
    A single record gets run.json; several get run-<run_id>.json.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for filename, (attr, columns) in SERIES.items():
        rows = [row for record in records for row in getattr(record, attr)]
        written.append(write_csv_rows(out_dir / filename, columns, rows))
    many = len(records) > 1
    for record in records:
        written.append(write_json(out_dir / metadata_name(record, many), record.metadata()))
    return written

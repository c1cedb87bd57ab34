# src/services/experiment_runner.py
"""
Experiment commands: train, sweep, analyze, noise.

Output directory layout:
    config.yaml                      resolved config echo
    metrics.csv modal.csv pmd.csv channel_variances.csv
    run.json | run-<run_id>.json     per-run metadata
    sweep.csv sweep_curves.csv       (sweep / noise)
    checkpoints/<run_id>/checkpoint_step<n>.mlns
    analysis/                        (analyze)
"""

import logging
import re
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from prefect import flow, get_run_logger, task
from prefect.cache_policies import NO_CACHE
from prefect.task_runners import ThreadPoolTaskRunner

from src.schemas.experiment import ExperimentConfig, Variant
from src.services.trainer import RunSpec, TrainingRun, load_datasets, probe_batch, restore_run
from src.utils.config_loader import config_snapshot, load_config, load_snapshot
from src.utils.errors import AggregationError, MissingAnalysisError
from src.utils.file_io import (
    CHANNEL_COLUMNS,
    COMPLETED,
    MODAL_COLUMNS,
    RunRecord,
    read_csv_rows,
    read_json,
    save_yaml_file,
    write_csv_rows,
    write_records,
)
from src.utils.logging_setup import trace
from src.utils.mnist_reader import Dataset
from src.utils.versioning import parse_run_id

logger = logging.getLogger("mlns.experiments")

SWEEP_COLUMNS = ["variant", "mu", "alpha", "n_seeds", "q25", "median", "q75", "band_width", "n_unstable"]
CURVE_COLUMNS = ["variant", "mu", "alpha", "epoch", "n_seeds", "q25", "median", "q75", "band_width", "n_unstable"]

CHECKPOINT_DIR = "checkpoints"
ANALYSIS_DIR = "analysis"
CHECKPOINT_PATTERN = re.compile(r"^checkpoint_step(\d+)\.mlns$")


# -----------------------------
# Run fan-out
# -----------------------------
def expand_runs(config: ExperimentConfig, alphas: Optional[Sequence[float]] = None) -> List[RunSpec]:
    """variant x mu x alpha x seed in config order; repeated entries run once."""
    specs, seen = [], set()
    for variant in config.variants:
        for mu in config.mu_conv:
            for alpha in (alphas if alphas is not None else [None]):
                for seed in config.seeds:
                    spec = RunSpec(Variant(variant), seed, mu, alpha)
                    if spec.run_id not in seen:
                        seen.add(spec.run_id)
                        specs.append(spec)
    return specs


@task(cache_policy=NO_CACHE)
def run_training(config: ExperimentConfig, spec: RunSpec, train: Dataset, val: Dataset,
                 batch: np.ndarray, checkpoint_root: Optional[Path]) -> RunRecord:
    """One (variant, mu, alpha, seed) run. The datasets are shared read-only across tasks."""
    run_logger = get_run_logger()
    record = TrainingRun(config, spec, train, val, probe=batch, checkpoint_root=checkpoint_root).run()
    run_logger.info(f"{record.run_id}: {record.outcome}")
    return record


@flow(name="MLNS Runs", validate_parameters=False)
def run_flow(config: ExperimentConfig, specs: Sequence[RunSpec],
             checkpoint_root: Optional[Path] = None) -> List[RunRecord]:
    train, val = load_datasets(config)
    batch = probe_batch(train, config.probe_batch_size, config.probe_seed)
    futures = [
        run_training.with_options(name=spec.run_id).submit(config, spec, train, val, batch, checkpoint_root)
        for spec in specs
    ]
    return [future.result() for future in futures]


def execute_runs(config: ExperimentConfig, specs: Sequence[RunSpec],
                 checkpoint_root: Optional[Path] = None) -> List[RunRecord]:
    """Records come back in expand_runs order whatever the completion order."""
    runner = ThreadPoolTaskRunner(max_workers=config.workers)
    return run_flow.with_options(task_runner=runner)(config, specs, checkpoint_root)


def _prepare_out(config: ExperimentConfig) -> Path:
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_yaml_file(out_dir / "config.yaml", config_snapshot(config))
    return out_dir


def _run_and_write(config: ExperimentConfig, alphas: Optional[Sequence[float]] = None) -> List[RunRecord]:
    out_dir = _prepare_out(config)
    specs = expand_runs(config, alphas)
    trace("Runs scheduled", {"count": len(specs), "workers": config.workers, "out_dir": out_dir}, logger)
    records = execute_runs(config, specs, out_dir / CHECKPOINT_DIR)
    write_records(records, out_dir)
    return records


# -----------------------------
# Aggregation
# -----------------------------
def _band(values: Sequence[float]) -> Dict[str, Optional[float]]:
    if not values:
        return {"q25": None, "median": None, "q75": None, "band_width": None}
    q25, median, q75 = (float(q) for q in np.percentile(np.asarray(values, dtype=np.float64), [25, 50, 75]))
    return {"q25": q25, "median": median, "q75": q75, "band_width": q75 - q25}


def _load_run_meta(out_dir: Path, run_ids: Sequence[str]) -> Dict[str, dict]:
    """Metadata for the given run ids only; other run files in out_dir are ignored."""
    if len(run_ids) == 1:
        paths = [out_dir / "run.json"]
    else:
        paths = [out_dir / f"run-{run_id}.json" for run_id in run_ids]
    meta = {}
    for path in paths:
        if path.exists():
            record = read_json(path)
            if record.get("run_id") in run_ids:
                meta[record["run_id"]] = record
    return meta


def _val_curves(metrics: Iterable[dict]) -> Dict[str, Dict[int, float]]:
    curves: Dict[str, Dict[int, float]] = {}
    for row in metrics:
        if row["val_error"] is not None:
            curves.setdefault(str(row["run_id"]), {})[int(row["epoch"])] = float(row["val_error"])
    return curves


def aggregate_sweep(out_dir: str | Path, alphas: Optional[Sequence[float]] = None) -> Tuple[List[dict], List[dict]]:
    """
    Quartile bands over seeds per (variant, mu, alpha), from the files in out_dir only.

    Unstable runs are excluded from the band and counted in n_unstable. Any absent
    run refuses the aggregation with the list of (seed, mu).
    """
    out_dir = Path(out_dir)
    config = load_snapshot(str(out_dir / "config.yaml"))
    meta = _load_run_meta(out_dir, [spec.run_id for spec in expand_runs(config, alphas)])
    curves = _val_curves(read_csv_rows(out_dir / "metrics.csv"))

    summary, curve_rows, missing = [], [], []
    for variant in config.variants:
        for mu in config.mu_conv:
            for alpha in (alphas if alphas is not None else [None]):
                runs = [RunSpec(Variant(variant), seed, mu, alpha) for seed in config.seeds]
                absent = [(r.seed, r.mu) for r in runs if r.run_id not in meta]
                if absent:
                    missing.extend(absent)
                    continue
                stable = [r for r in runs if meta[r.run_id]["outcome"] == COMPLETED]
                n_unstable = len(runs) - len(stable)
                key = {"variant": Variant(variant).value, "mu": mu, "alpha": alpha or 0.0}

                final = [curves[r.run_id][max(curves[r.run_id])] for r in stable if curves.get(r.run_id)]
                summary.append({**key, "n_seeds": len(final), **_band(final), "n_unstable": n_unstable})
                for epoch in range(1, config.epochs + 1):
                    values = [curves[r.run_id][epoch] for r in stable if epoch in curves.get(r.run_id, {})]
                    curve_rows.append({**key, "epoch": epoch, "n_seeds": len(values), **_band(values),
                                       "n_unstable": n_unstable})
    if missing:
        raise AggregationError(missing, str(out_dir))
    write_csv_rows(out_dir / "sweep.csv", SWEEP_COLUMNS, summary)
    write_csv_rows(out_dir / "sweep_curves.csv", CURVE_COLUMNS, curve_rows)
    return summary, curve_rows


# -----------------------------
# Commands
# -----------------------------
def cmd_train(config: ExperimentConfig) -> List[RunRecord]:
    """One run per (variant, seed, mu); metrics/modal/pmd/channel CSVs and run metadata in out_dir."""
    records = _run_and_write(config)
    for record in records:
        logger.info("%s: %s", record.run_id, record.outcome)
    return records


def cmd_sweep(config: ExperimentConfig) -> List[dict]:
    _run_and_write(config)
    summary, _ = aggregate_sweep(config.out_dir)
    return summary


def cmd_noise(config: ExperimentConfig) -> List[RunRecord]:
    """Each run with and without gradient noise on the target conv layer; bands per alpha."""
    alphas = sorted({0.0, float(config.noise_alpha)})
    records = _run_and_write(config, alphas)
    aggregate_sweep(config.out_dir, alphas)
    return records


def _find_checkpoints(target: Path) -> List[Tuple[str, int, Path]]:
    if target.is_file():
        files = [target]
    else:
        files = sorted((target / CHECKPOINT_DIR).glob("*/checkpoint_step*.mlns"))
    found = []
    for path in files:
        m = CHECKPOINT_PATTERN.match(path.name)
        if m:
            found.append((path.parent.name, int(m.group(1)), path))
    return sorted(found, key=lambda item: (item[0], item[1]))


def _run_dir_for(target: Path) -> Path:
    # <out>/checkpoints/<run_id>/checkpoint_step<n>.mlns
    return target.parents[2] if target.is_file() else target


def cmd_analyze(target: str | Path, steps: Optional[Sequence[int]] = None,
                overrides: Optional[dict] = None, out_dir: Optional[str | Path] = None) -> List[dict]:
    """Modal rows and channel variance tables for every (run, step) checkpoint under target."""
    target = Path(target)
    if not target.exists():
        raise FileNotFoundError(f"{target} does not exist")
    run_dir = _run_dir_for(target)
    checkpoints = [c for c in _find_checkpoints(target) if not steps or c[1] in steps]
    if not checkpoints:
        raise MissingAnalysisError(
            f"No analysis checkpoints under {target}; rerun train with analysis_steps set "
            f"and save_checkpoints: true"
        )

    config = load_config("analyze", str(run_dir / "config.yaml"), overrides)
    train, val = load_datasets(config)
    probe = probe_batch(train, config.probe_batch_size, config.probe_seed)

    modal, channels = [], []
    for run_id, step, path in checkpoints:
        parsed = parse_run_id(run_id)
        if parsed is None:
            raise MissingAnalysisError(f"Cannot recover run settings from directory name {run_id}")
        spec = RunSpec(Variant(parsed["variant"]), parsed["seed"], parsed["mu"], parsed["alpha"])
        run = restore_run(config, spec, path, train, val, probe)
        run.step = step
        run.analyze()
        modal.extend(run.record.modal)
        channels.extend(run.record.channels)
        logger.info("Analyzed %s at step %d", run_id, step)

    dest = Path(out_dir) if out_dir else run_dir / ANALYSIS_DIR
    write_csv_rows(dest / "modal.csv", MODAL_COLUMNS, modal)
    write_csv_rows(dest / "channel_variances.csv", CHANNEL_COLUMNS, channels)
    return modal

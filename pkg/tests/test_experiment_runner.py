import os
import sys

import pytest
from prefect import Flow

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from src.schemas.experiment import ExperimentConfig, Variant
from src.services.experiment_runner import (
    SWEEP_COLUMNS,
    aggregate_sweep,
    cmd_analyze,
    cmd_noise,
    cmd_sweep,
    cmd_train,
    execute_runs,
    expand_runs,
    run_flow,
)
from src.utils.errors import AggregationError, MissingAnalysisError
from src.utils.file_io import csv_columns, read_csv_rows, read_json, write_json

pytestmark = pytest.mark.usefixtures("prefect_backend")


def small_config(out_dir, **kw):
    base = dict(dataset="synthetic", synthetic_train=32, synthetic_val=16, batch_size=16, epochs=1,
                probe_batch_size=8, analysis_steps=[], seeds=[0], mu_conv=[0.05], mu_other=0.05,
                out_dir=str(out_dir))
    base.update(kw)
    return ExperimentConfig(**base)


def test_expand_runs_order_and_dedup(tmp_path):
    config = small_config(tmp_path, variants=["Baseline", "NLMS_L2"], mu_conv=[0.1, 0.01], seeds=[1, 1, 0])
    ids = [spec.run_id for spec in expand_runs(config)]
    assert ids == ["Baseline_mu0.1_seed1", "Baseline_mu0.1_seed0", "Baseline_mu0.01_seed1", "Baseline_mu0.01_seed0",
                   "NLMS_L2_mu0.1_seed1", "NLMS_L2_mu0.1_seed0", "NLMS_L2_mu0.01_seed1", "NLMS_L2_mu0.01_seed0"]


def test_train_writes_output_files(tmp_path):
    records = cmd_train(small_config(tmp_path))
    assert len(records) == 1
    for name in ("config.yaml", "metrics.csv", "modal.csv", "pmd.csv", "channel_variances.csv", "run.json"):
        assert (tmp_path / name).exists()
    meta = read_json(tmp_path / "run.json")
    assert meta["run_id"] == "Baseline_mu0.05_seed0"
    assert meta["topology"][0].startswith("conv1:Conv(1->6")


def test_train_is_byte_stable(tmp_path):
    cmd_train(small_config(tmp_path / "a", seeds=[0, 1]))
    cmd_train(small_config(tmp_path / "b", seeds=[0, 1]))
    for name in ("metrics.csv", "modal.csv", "pmd.csv", "channel_variances.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_parallel_workers_match_sequential(tmp_path):
    cmd_train(small_config(tmp_path / "seq", seeds=[0, 1, 2]))
    cmd_train(small_config(tmp_path / "par", seeds=[0, 1, 2], workers=2))
    assert (tmp_path / "seq" / "metrics.csv").read_bytes() == (tmp_path / "par" / "metrics.csv").read_bytes()


def test_flow_returns_records_in_expand_order(tmp_path):
    config = small_config(tmp_path, variants=["Baseline", "BatchNorm"], seeds=[2, 1, 0], workers=3)
    specs = expand_runs(config)
    records = execute_runs(config, specs)
    assert [r.run_id for r in records] == [spec.run_id for spec in specs]
    assert isinstance(run_flow, Flow)


def test_unstable_run_still_writes_files(tmp_path):
    records = cmd_train(small_config(tmp_path, mu_conv=[1e300], mu_other=1e300, epochs=2))
    assert records[0].outcome.startswith("unstable at step")
    assert read_json(tmp_path / "run.json")["outcome"] == records[0].outcome
    assert csv_columns(tmp_path / "metrics.csv")[0] == "run_id"


def test_sweep_rows_per_mu(tmp_path):
    summary = cmd_sweep(small_config(tmp_path, mu_conv=[0.0, 0.01, 0.05, 0.1], seeds=[0, 1]))
    assert [(row["variant"], row["mu"]) for row in summary] == [
        ("Baseline", 0.0), ("Baseline", 0.01), ("Baseline", 0.05), ("Baseline", 0.1)]
    rows = read_csv_rows(tmp_path / "sweep.csv")
    assert csv_columns(tmp_path / "sweep.csv") == SWEEP_COLUMNS
    assert len(rows) == 4
    for row in rows:
        assert row["n_seeds"] == 2 and row["n_unstable"] == 0
        assert row["q25"] <= row["median"] <= row["q75"]
        assert row["band_width"] == pytest.approx(row["q75"] - row["q25"])


def test_identical_seeds_give_zero_width_band(tmp_path):
    summary = cmd_sweep(small_config(tmp_path, seeds=[0, 0, 0]))
    assert summary[0]["n_seeds"] == 3
    assert summary[0]["band_width"] == 0.0


def test_unstable_runs_leave_the_band(tmp_path):
    summary = cmd_sweep(small_config(tmp_path, mu_conv=[1e300], mu_other=1e300, seeds=[0, 1], epochs=2))
    assert summary[0]["n_unstable"] == 2
    assert summary[0]["n_seeds"] == 0 and summary[0]["median"] is None


def test_missing_run_refuses_aggregation(tmp_path):
    cmd_sweep(small_config(tmp_path, mu_conv=[0.01, 0.05], seeds=[0, 1]))
    (tmp_path / "run-Baseline_mu0.05_seed1.json").unlink()
    with pytest.raises(AggregationError) as exc:
        aggregate_sweep(tmp_path)
    assert exc.value.missing == [(1, 0.05)]


def test_aggregation_ignores_stale_run_files(tmp_path):
    cmd_sweep(small_config(tmp_path, seeds=[0, 1]))
    stale = {"run_id": "Baseline_mu0.05_seed0", "outcome": "unstable at step 1"}
    write_json(tmp_path / "run.json", stale)
    write_json(tmp_path / "run-Baseline_mu9_seed9.json", {**stale, "run_id": "Baseline_mu9_seed9"})
    summary, _ = aggregate_sweep(tmp_path)
    assert summary[0]["n_unstable"] == 0 and summary[0]["n_seeds"] == 2


def test_noise_study_pairs_alphas(tmp_path):
    config = small_config(tmp_path, variants=["Baseline"], noise_alpha=1.0, freeze_fc=True)
    records = cmd_noise(config)
    assert [r.run_id for r in records] == ["Baseline_mu0.05_seed0_alpha0", "Baseline_mu0.05_seed0_alpha1"]
    curves = read_csv_rows(tmp_path / "sweep_curves.csv")
    assert [(row["alpha"], row["epoch"]) for row in curves] == [(0.0, 1), (1.0, 1)]


def test_analyze_recomputes_modal_rows(tmp_path):
    records = cmd_train(small_config(tmp_path, analysis_steps=[1, 2], variants=[Variant.BATCHNORM]))
    rows = cmd_analyze(tmp_path)
    assert (tmp_path / "analysis" / "modal.csv").exists()
    assert (tmp_path / "analysis" / "channel_variances.csv").exists()
    assert [(row["layer"], row["step"]) for row in rows] == [
        ("conv1", 1), ("conv2", 1), ("conv1", 2), ("conv2", 2)]
    for fresh, saved in zip(rows, records[0].modal):
        assert fresh["lambda_max"] == pytest.approx(saved["lambda_max"], rel=1e-12)


def test_analyze_single_step_and_file(tmp_path):
    cmd_train(small_config(tmp_path, analysis_steps=[1, 2]))
    assert [row["step"] for row in cmd_analyze(tmp_path, steps=[2])] == [2, 2]
    ckpt = tmp_path / "checkpoints" / "Baseline_mu0.05_seed0" / "checkpoint_step1.mlns"
    assert [row["step"] for row in cmd_analyze(ckpt, out_dir=tmp_path / "one")] == [1, 1]
    assert (tmp_path / "one" / "modal.csv").exists()


def test_analyze_without_checkpoints(tmp_path):
    cmd_train(small_config(tmp_path))
    with pytest.raises(MissingAnalysisError, match="analysis_steps"):
        cmd_analyze(tmp_path)


def test_analyze_missing_target(tmp_path):
    with pytest.raises(FileNotFoundError):
        cmd_analyze(tmp_path / "nowhere")

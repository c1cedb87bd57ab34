import os
import sys

import pytest
import yaml

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from src.schemas.experiment import NOISE_STUDY_VARIANTS, Variant
from src.utils.config_loader import config_snapshot, load_config, load_defaults, load_snapshot, merge_layers
from src.utils.errors import ConfigError


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for var in ("MLNS_MNIST_DIR", "MLNS_OUT_DIR"):
        monkeypatch.delenv(var, raising=False)


def write_config(tmp_path, data, name="exp.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data))
    return str(path)


def test_defaults_file_matches_schema():
    config = load_config("train", overrides={"dataset": "synthetic"})
    defaults = load_defaults()
    assert config.epochs == defaults["epochs"]
    assert [v.value for v in config.variants] == defaults["variants"]


def test_precedence_file_env_cli(tmp_path, monkeypatch):
    path = write_config(tmp_path, {"epochs": 7, "batch_size": 16, "out_dir": "from_file", "dataset": "synthetic"})
    config = load_config("train", path)
    assert (config.epochs, config.batch_size, config.out_dir) == (7, 16, "from_file")

    monkeypatch.setenv("MLNS_OUT_DIR", "from_env")
    assert load_config("train", path).out_dir == "from_env"

    config = load_config("train", path, {"epochs": 9, "out_dir": "from_cli", "batch_size": None})
    assert (config.epochs, config.batch_size, config.out_dir) == (9, 16, "from_cli")


def test_mnist_dir_from_environment(monkeypatch):
    monkeypatch.setenv("MLNS_MNIST_DIR", "/data/mnist")
    assert load_config("train").mnist_dir == "/data/mnist"


def test_every_problem_reported_at_once(tmp_path):
    path = write_config(tmp_path, {"epochs": 0, "batch_size": 0, "mu_conv": [-1.0], "bogus_key": 1})
    with pytest.raises(ConfigError) as exc:
        load_config("train", path)
    joined = "\n".join(exc.value.errors)
    for key in ("epochs", "batch_size", "mu_conv", "bogus_key"):
        assert key in joined
    assert len(exc.value.errors) >= 4


def test_cross_checks_collected():
    with pytest.raises(ConfigError) as exc:
        load_config("noise", overrides={"variants": ["BN_Amplify"], "noise_layer": "fc"})
    joined = "\n".join(exc.value.errors)
    assert "mnist_dir" in joined
    assert "noise_layer" in joined
    assert "BN_Amplify" in joined


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read config"):
        load_config("train", str(tmp_path / "absent.yaml"))


def test_non_mapping_config_file(tmp_path):
    path = tmp_path / "list.yaml"
    path.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError, match="mapping"):
        load_config("train", str(path))


def test_paper_scale():
    config = load_config("sweep", overrides={"paper_scale": True, "dataset": "synthetic"})
    assert (config.epochs, config.seeds, config.train_limit, config.val_limit) == (20, [0, 1, 2, 3, 4], None, None)
    assert load_config("noise", overrides={"paper_scale": True, "dataset": "synthetic"}).epochs == 40
    assert load_config("sweep", overrides={"paper_scale": True, "epochs": 2, "dataset": "synthetic"}).epochs == 2


def test_noise_command_defaults():
    config = load_config("noise", overrides={"dataset": "synthetic"})
    assert tuple(config.variants) == NOISE_STUDY_VARIANTS
    assert config.freeze_fc and config.noise_layer == "conv2" and config.norm_layers == ["conv2"]
    assert config.noise_alpha == 1.0


def test_command_defaults_yield_to_user_file(tmp_path):
    path = write_config(tmp_path, {"variants": ["Baseline"], "dataset": "synthetic"})
    assert load_config("noise", path).variants == [Variant.BASELINE]


def test_merge_keeps_none_overrides_unset():
    merged = merge_layers("train", overrides={"epochs": None})
    assert merged["epochs"] == load_defaults()["epochs"]


def test_snapshot_reads_back_without_environment(tmp_path, monkeypatch):
    config = load_config("train", overrides={"dataset": "synthetic", "seeds": [3], "out_dir": "x"})
    path = write_config(tmp_path, config_snapshot(config), "config.yaml")
    monkeypatch.setenv("MLNS_OUT_DIR", "elsewhere")
    assert load_snapshot(path) == config

import os
from typing import Any, Dict, List, Optional

import yaml
from pydantic import ValidationError

from src.schemas.experiment import NOISE_STUDY_VARIANTS, ExperimentConfig
from src.utils.errors import ConfigError

CONFIG_PATH = os.path.join(
    os.path.dirname(__file__), "../../config/experiment.yaml"
)

ENV_KEYS = {
    "MLNS_MNIST_DIR": "mnist_dir",
    "MLNS_OUT_DIR": "out_dir",
}

# Applied on top of the YAML defaults for the noise study, below any user file.
COMMAND_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "noise": {
        "variants": [v.value for v in NOISE_STUDY_VARIANTS],
        "norm_layers": ["conv2"],
        "noise_layer": "conv2",
        "freeze_fc": True,
        "noise_alpha": 1.0,
        "epochs": 10,
    },
}

PAPER_SCALE = {"train_limit": None, "val_limit": None, "epochs": 20, "seeds": [0, 1, 2, 3, 4]}
PAPER_SCALE_NOISE_EPOCHS = 40


def _read_yaml(path: str, errors: List[str]) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
    except OSError as e:
        errors.append(f"cannot read config {path}: {e}")
        return {}
    except yaml.YAMLError as e:
        errors.append(f"cannot parse config {path}: {e}")
        return {}
    if not isinstance(data, dict):
        errors.append(f"config {path} must be a mapping of flat keys")
        return {}
    return data


def load_defaults() -> Dict[str, Any]:
    errors: List[str] = []
    data = _read_yaml(CONFIG_PATH, errors)
    if errors:
        raise ConfigError(errors)
    return data


def env_overrides() -> Dict[str, Any]:
    return {key: os.environ[var] for var, key in ENV_KEYS.items() if os.getenv(var)}


def merge_layers(command: str = "train", config_path: Optional[str] = None,
                 overrides: Optional[Dict[str, Any]] = None, errors: Optional[List[str]] = None) -> Dict[str, Any]:
    """YAML defaults < command defaults < --config file < environment < CLI overrides (None = unset)."""
    errors = errors if errors is not None else []
    merged = dict(_read_yaml(CONFIG_PATH, errors))
    merged.update(COMMAND_DEFAULTS.get(command, {}))
    if config_path:
        merged.update(_read_yaml(config_path, errors))
    merged.update(env_overrides())
    cli = {k: v for k, v in (overrides or {}).items() if v is not None}

    if cli.get("paper_scale", merged.get("paper_scale")):
        merged.update(PAPER_SCALE)
        if command == "noise":
            merged["epochs"] = PAPER_SCALE_NOISE_EPOCHS
    merged.update(cli)
    return merged


def _format_validation(e: ValidationError) -> List[str]:
    out = []
    for err in e.errors():
        where = ".".join(str(p) for p in err["loc"]) or "config"
        out.append(f"{where}: {err['msg']}")
    return out


def load_config(command: str = "train", config_path: Optional[str] = None,
                overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """Resolve and validate; every problem found is reported in one ConfigError."""
    errors: List[str] = []
    merged = merge_layers(command, config_path, overrides, errors)
    try:
        config = ExperimentConfig(**merged)
    except ValidationError as e:
        raise ConfigError(errors + _format_validation(e))
    errors.extend(config.cross_check(command))
    if errors:
        raise ConfigError(errors)
    return config


def config_snapshot(config: ExperimentConfig) -> Dict[str, Any]:
    """Plain dict in field order, suitable for config.yaml and run.json."""
    return config.model_dump(mode="json")


def load_snapshot(path: str) -> ExperimentConfig:
    """A config.yaml echo read back as-is: no environment, no command defaults, no cross checks."""
    errors: List[str] = []
    data = _read_yaml(path, errors)
    if errors:
        raise ConfigError(errors)
    try:
        return ExperimentConfig(**data)
    except ValidationError as e:
        raise ConfigError(_format_validation(e))

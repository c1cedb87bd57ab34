# src/schemas/experiment.py

from enum import Enum
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class Variant(str, Enum):
    BASELINE = "Baseline"
    BATCHNORM = "BatchNorm"
    BN_AMPLIFY = "BN_Amplify"
    BN_SUPPRESS = "BN_Suppress"
    BN_PRIOR = "BN_Prior"
    NLMS_L1 = "NLMS_L1"
    NLMS_L2 = "NLMS_L2"


NOISE_STUDY_VARIANTS = (Variant.BASELINE, Variant.BATCHNORM, Variant.BN_PRIOR, Variant.NLMS_L1, Variant.NLMS_L2)


class NormKind(str, Enum):
    L1 = "L1"
    L2 = "L2"


class NlmsConfig(BaseModel):
    norm_kind: NormKind = Field(NormKind.L2, description="L2 divides by the squared channel-patch norm, L1 by the sum of |x|")
    stabilizer: float = Field(1e-8, gt=0, description="eps_n added to the denominator")
    per_channel: Literal[True] = Field(True, description="Normalize per input-channel block")
    mu: float = Field(0.1, ge=0)


class NoiseConfig(BaseModel):
    alpha: float = Field(0.0, ge=0, description="Multiplier on the local-error standard deviation")
    seed: int = 0
    target_layer: int = Field(0, ge=0, description="Index of the conv layer in the layer graph")
    propagate_upstream: bool = True


class SyntheticSpec(BaseModel):
    channels: int = Field(2, ge=1)
    powers: List[float] = Field(default_factory=lambda: [1.0, 1.0])
    rho: float = 0.0
    samples: int = Field(10000, ge=2)
    block_size: int = Field(4, ge=1, description="Z: rows per channel block")
    seed: int = 0
    true_weights: Optional[List[float]] = None
    noise_std: float = Field(0.0, ge=0)

    @field_validator("powers")
    @classmethod
    def _positive_powers(cls, v):
        if any(p <= 0 for p in v):
            raise ValueError("channel powers must be > 0")
        return v

    @field_validator("rho")
    @classmethod
    def _rho_range(cls, v):
        if not -1.0 < v < 1.0:
            raise ValueError("|rho| must be < 1")
        return v

    @model_validator(mode="after")
    def _lengths(self):
        if len(self.powers) != self.channels:
            raise ValueError(f"powers has {len(self.powers)} entries for {self.channels} channels")
        if self.true_weights is not None and len(self.true_weights) != self.channels * self.block_size:
            raise ValueError("true_weights length must equal channels * block_size")
        return self


class ExperimentConfig(BaseModel):
    """Flat experiment definition; every key maps 1:1 to config/experiment.yaml."""

    model_config = ConfigDict(extra="forbid", use_enum_values=False)

    variants: List[Variant] = Field(default_factory=lambda: [Variant.BASELINE], min_length=1)
    mu_conv: List[float] = Field(default_factory=lambda: [0.1], min_length=1)
    mu_other: float = Field(0.1, ge=0)
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2], min_length=1)
    epochs: int = Field(5, ge=1)
    batch_size: int = Field(64, ge=1)

    analysis_steps: List[int] = Field(default_factory=lambda: [5])
    probe_batch_size: int = Field(256, ge=2)
    probe_seed: int = 1234
    save_checkpoints: bool = True

    norm_layers: List[str] = Field(default_factory=lambda: ["conv1", "conv2"])
    threshold: float = Field(1.0, gt=0)
    threshold_reading: Literal["names", "prose"] = "names"
    norm_eps: float = Field(1e-5, ge=0)
    norm_momentum: float = Field(0.1, gt=0, le=1)

    nlms_stabilizer: float = Field(1e-8, gt=0)
    pmd_exact: bool = False
    pmd_audit_steps: List[int] = Field(default_factory=list)

    noise_alpha: float = Field(0.0, ge=0)
    noise_layer: str = "conv2"
    noise_propagate_upstream: bool = True
    freeze_fc: bool = False

    dataset: Literal["mnist", "synthetic"] = "mnist"
    mnist_dir: Optional[str] = None
    train_limit: Optional[int] = Field(10000, ge=1)
    val_limit: Optional[int] = Field(2000, ge=1)
    synthetic_train: int = Field(2000, ge=1)
    synthetic_val: int = Field(500, ge=1)
    synthetic_seed: int = 0

    out_dir: str = "output/runs"
    paper_scale: bool = False
    fail_on_divergence: bool = False
    workers: int = Field(1, ge=1)

    @field_validator("mu_conv")
    @classmethod
    def _nonnegative_mu(cls, v):
        if any(mu < 0 for mu in v):
            raise ValueError("learning rates must be >= 0")
        return v

    @field_validator("analysis_steps", "pmd_audit_steps")
    @classmethod
    def _nonnegative_steps(cls, v):
        if any(s < 0 for s in v):
            raise ValueError("steps must be >= 0")
        return sorted(set(v))

    @field_validator("norm_layers")
    @classmethod
    def _known_layers(cls, v):
        unknown = [name for name in v if name not in ("conv1", "conv2")]
        if unknown:
            raise ValueError(f"unknown conv layers {unknown}; expected conv1/conv2")
        return v

    def cross_check(self, command: str = "train") -> List[str]:
        """Cross-field problems, all of them at once."""
        errors = []
        if self.dataset == "mnist" and not self.mnist_dir:
            errors.append("dataset 'mnist' needs mnist_dir (or MLNS_MNIST_DIR)")
        if self.noise_layer not in ("conv1", "conv2"):
            errors.append(f"noise_layer must be conv1 or conv2, got {self.noise_layer}")
        if command == "noise":
            bad = [v.value for v in self.variants if v not in NOISE_STUDY_VARIANTS]
            if bad:
                errors.append(f"noise study does not support variants {bad}")
        if command == "sweep" and len(self.seeds) < 1:
            errors.append("sweep needs at least one seed")
        return errors

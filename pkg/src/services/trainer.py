# src/services/trainer.py
"""
One training run: variant wiring, seeded epochs, analysis snapshots and the
per-run record. Everything that varies between runs comes from
(ExperimentConfig, variant, seed, mu_conv, alpha).

Random streams:
    init      default_rng(seed)
    shuffle   default_rng([seed, epoch])
    noise     default_rng(NOISE_SEED_OFFSET + seed)
    probe     default_rng(probe_seed), shared by every run of a config
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from src.schemas.experiment import ExperimentConfig, NlmsConfig, NoiseConfig, NormKind, Variant
from src.services.modal_analyzer import ModalReport, analyze_layer
from src.services.network import (
    CONV_GROUP,
    OTHER_GROUP,
    AvgPool,
    Conv,
    FullyConnected,
    LayerGraph,
    Norm,
    ParamSet,
    ReLU,
    RunContext,
    backward,
    forward,
    init_params,
    predict,
    sgd_step,
)
from src.services.nlms import (
    NoiseInjector,
    PmdLedger,
    conv_constraint_residuals,
    learned_param_denominator,
    nlms_direction,
    variance_normalized_direction,
)
from src.services.normalization import NormState, NormVariant, Placement, ThresholdReading
from src.utils.checkpoint import load_checkpoint, save_checkpoint
from src.utils.errors import CheckpointError, DivergenceError
from src.utils.file_io import RunRecord
from src.utils.logging_setup import trace
from src.utils.mnist_reader import PADDED_SIZE, Dataset, load_mnist
from src.utils.synthetic import synth_image_dataset
from src.utils.tensor_ops import ConvGeometry
from src.utils.versioning import code_version, make_run_id

logger = logging.getLogger("mlns.trainer")

NOISE_SEED_OFFSET = 10_000
EVAL_CHUNK = 1000

NORM_VARIANTS = {
    Variant.BATCHNORM: NormVariant.STANDARD,
    Variant.BN_AMPLIFY: NormVariant.AMPLIFY,
    Variant.BN_SUPPRESS: NormVariant.SUPPRESS,
    Variant.BN_PRIOR: NormVariant.STANDARD,
}
NLMS_VARIANTS = {Variant.NLMS_L1: NormKind.L1, Variant.NLMS_L2: NormKind.L2}

# LeNet-style: conv(1->6, 5x5) / pool / conv(6->16, 5x5) / pool / fc(400->10)
CONV_SPECS = (("conv1", ConvGeometry(1, 6, 5, 5)), ("conv2", ConvGeometry(6, 16, 5, 5)))
FC_IN, NUM_CLASSES = 16 * 5 * 5, 10


# -----------------------------
# Topology
# -----------------------------
def _norm_state(channels: int, variant: Variant, placement: Placement, config: ExperimentConfig) -> NormState:
    return NormState(
        channels,
        momentum=config.norm_momentum,
        eps=config.norm_eps,
        variant=NORM_VARIANTS[variant],
        threshold=config.threshold,
        placement=placement,
        reading=ThresholdReading(config.threshold_reading),
    )


def build_graph(variant: Variant | str, config: ExperimentConfig) -> LayerGraph:
    """Baseline topology with the variant's norm layers after (or, for BN_Prior, before) the chosen convs."""
    variant = Variant(variant)
    normed = set(config.norm_layers) if variant in NORM_VARIANTS else set()
    layers = []
    for position, (name, geom) in enumerate(CONV_SPECS, start=1):
        if name in normed and variant == Variant.BN_PRIOR:
            layers.append(Norm(f"{name}_norm", _norm_state(geom.in_channels, variant, Placement.BEFORE_CONV, config)))
            layers.append(Conv(name, geom, bias=True))
        elif name in normed:
            layers.append(Conv(name, geom, bias=False))
            layers.append(Norm(f"{name}_norm", _norm_state(geom.out_channels, variant, Placement.AFTER_CONV, config)))
        else:
            layers.append(Conv(name, geom, bias=True))
        layers.append(ReLU(f"relu{position}"))
        layers.append(AvgPool(f"pool{position}"))
    layers.append(FullyConnected("fc", FC_IN, NUM_CLASSES))
    return LayerGraph((1, PADDED_SIZE, PADDED_SIZE), layers, NUM_CLASSES)


def update_rules(variant: Variant | str, config: ExperimentConfig) -> Dict[str, str]:
    """Which rule updates each conv layer's weights."""
    variant = Variant(variant)
    rules = {}
    for name, _ in CONV_SPECS:
        if variant in NLMS_VARIANTS and name in config.norm_layers:
            rules[name] = f"nlms_{NLMS_VARIANTS[variant].value}"
        elif variant == Variant.BN_PRIOR and config.pmd_exact and name in config.norm_layers:
            rules[name] = "variance_normalized"
        else:
            rules[name] = "sgd"
    return rules


# -----------------------------
# Data
# -----------------------------
def load_datasets(config: ExperimentConfig) -> Tuple[Dataset, Dataset]:
    if config.dataset == "synthetic":
        train = synth_image_dataset(config.synthetic_train, config.synthetic_seed, "train")
        val = synth_image_dataset(config.synthetic_val, config.synthetic_seed + 1, "val",
                                  stats=(train.mean, train.std))
        return train, val
    return load_mnist(config.mnist_dir, config.train_limit, config.val_limit)


def probe_batch(train: Dataset, size: int, seed: int) -> np.ndarray:
    """Fixed analysis batch drawn once from the training split."""
    idx = np.random.default_rng(seed).choice(len(train), size=min(size, len(train)), replace=False)
    return train.images[idx]


def evaluate(graph: LayerGraph, params: ParamSet, dataset: Dataset) -> float:
    """Classification error on the dataset in eval mode."""
    wrong = 0
    for start in range(0, len(dataset), EVAL_CHUNK):
        logits = predict(graph, params, dataset.images[start:start + EVAL_CHUNK])
        wrong += int(np.sum(np.argmax(logits, axis=1) != dataset.labels[start:start + EVAL_CHUNK]))
    return wrong / len(dataset)


# -----------------------------
# State for checkpoints
# -----------------------------
def network_state(graph: LayerGraph, params: ParamSet) -> Dict[str, np.ndarray]:
    state = {name: value for name, value in params.tensors.items()}
    for layer in graph.norm_layers():
        state[f"{layer.name}.running_mean"] = layer.state.running_mean
        state[f"{layer.name}.running_var"] = layer.state.running_var
        state[f"{layer.name}.steps"] = np.array([layer.state.steps], dtype=np.float64)
    return state


def restore_state(graph: LayerGraph, params: ParamSet, tensors: Dict[str, np.ndarray]) -> None:
    missing = [name for name in network_state(graph, params) if name not in tensors]
    if missing:
        raise CheckpointError(f"Checkpoint lacks tensors {missing}")
    for name, value in params.tensors.items():
        if tensors[name].shape != value.shape:
            raise CheckpointError(f"{name}: checkpoint shape {tensors[name].shape}, graph shape {value.shape}")
        # in place so norm layers keep sharing gamma/beta with the param set
        value[...] = tensors[name]
    for layer in graph.norm_layers():
        layer.state.running_mean = tensors[f"{layer.name}.running_mean"].copy()
        layer.state.running_var = tensors[f"{layer.name}.running_var"].copy()
        layer.state.steps = int(tensors[f"{layer.name}.steps"][0])


def checkpoint_path(root: Path, run_id: str, step: int) -> Path:
    return Path(root) / run_id / f"checkpoint_step{step}.mlns"


# -----------------------------
# Run
# -----------------------------
@dataclass
class RunSpec:
    variant: Variant
    seed: int
    mu: float
    alpha: Optional[float] = None

    @property
    def run_id(self) -> str:
        return make_run_id(self.variant.value, self.mu, self.seed, self.alpha)


class TrainingRun:
    def __init__(self, config: ExperimentConfig, spec: RunSpec, train: Dataset, val: Dataset,
                 probe: Optional[np.ndarray] = None, checkpoint_root: Optional[Path] = None):
        self.config = config
        self.spec = spec
        self.train = train
        self.val = val
        self.probe = probe if probe is not None else probe_batch(train, config.probe_batch_size, config.probe_seed)
        self.checkpoint_root = checkpoint_root

        self.graph = build_graph(spec.variant, config)
        frozen = {"fc.W", "fc.b"} if config.freeze_fc else set()
        self.params = init_params(self.graph, spec.seed, frozen)
        self.lr_map = {CONV_GROUP: spec.mu, OTHER_GROUP: config.mu_other}
        self.rules = update_rules(spec.variant, config)

        kind = NLMS_VARIANTS.get(spec.variant)
        self.nlms_cfg = NlmsConfig(norm_kind=kind, stabilizer=config.nlms_stabilizer, mu=spec.mu) if kind else None

        self.ctx = RunContext(propagate_noisy_error=config.noise_propagate_upstream)
        if spec.alpha:
            target, _ = self.graph.layer_named(config.noise_layer)
            noise_cfg = NoiseConfig(alpha=spec.alpha, seed=NOISE_SEED_OFFSET + spec.seed, target_layer=target,
                                    propagate_upstream=config.noise_propagate_upstream)
            self.ctx.error_hooks[target] = NoiseInjector(noise_cfg)

        self.step = 0
        self.ledger = PmdLedger()
        self.reports: List[ModalReport] = []
        self.record = RunRecord(
            run_id=spec.run_id,
            config=config.model_dump(mode="json"),
            seed=spec.seed,
            mu=spec.mu,
            variant=spec.variant.value,
            alpha=spec.alpha or 0.0,
            topology=self.graph.describe(),
            fingerprint=self.graph.fingerprint(),
            code_version=code_version(),
            notes={
                "analysis_batch": f"fixed probe batch (seed {config.probe_seed}, size {self.probe.shape[0]})",
                "update_rules": self.rules,
                "frozen": sorted(frozen),
            },
        )

    # ----- updates -----
    def _conv_direction(self, index: int, conv: Conv, cache, local_error: np.ndarray, grads) -> np.ndarray:
        rule = self.rules[conv.name]
        unrolled = cache.unrolled(index)
        if rule.startswith("nlms"):
            return nlms_direction(unrolled, local_error, self.nlms_cfg)
        if rule == "variance_normalized":
            _, norm = self.graph.layer_named(f"{conv.name}_norm")
            power = learned_param_denominator(norm.state.gamma, norm.state.beta, self.config.nlms_stabilizer)
            return variance_normalized_direction(unrolled, local_error, power, self.config.nlms_stabilizer)
        return grads[f"{conv.name}.W"]

    def _audit(self, index: int, conv: Conv, cache, local_error: np.ndarray, direction: np.ndarray) -> None:
        W = self.params[f"{conv.name}.W"]
        W_new = W - self.spec.mu * direction
        bias = self.params.tensors.get(f"{conv.name}.b")
        residuals = conv_constraint_residuals(W_new, cache.unrolled(index), cache.outputs[index], local_error, bias)
        self.ledger.record(conv.name, self.step + 1, residuals, float(np.sum((W_new - W) ** 2)))

    def train_step(self, images: np.ndarray, labels: np.ndarray) -> float:
        loss, cache = forward(self.graph, self.params, images, labels, self.ctx)
        record = backward(self.graph, self.params, cache, labels, self.ctx)
        grads = dict(record.grads)
        audit = (self.step + 1) in self.config.pmd_audit_steps
        for index in self.graph.conv_indices():
            conv = self.graph.layers[index]
            direction = self._conv_direction(index, conv, cache, record.local_errors[index], grads)
            grads[f"{conv.name}.W"] = direction
            if audit and self.rules[conv.name] != "sgd":
                self._audit(index, conv, cache, record.local_errors[index], direction)
        sgd_step(self.params, grads, self.lr_map)
        self.step += 1
        return loss

    # ----- analysis -----
    def analyze(self) -> List[ModalReport]:
        """Modal reports for every conv input on the probe batch; norm running stats stay untouched."""
        labels = np.zeros(self.probe.shape[0], dtype=np.int64)
        _, cache = forward(self.graph, self.params, self.probe, labels, RunContext(train=True, track_running=False))
        reports = []
        for index in self.graph.conv_indices():
            name = self.graph.layers[index].name
            report = analyze_layer(cache.unrolled(index), self.spec.mu, name, self.step)
            reports.append(report)
            self.record.modal.append(report.row(self.record.run_id))
            for channel, variance in enumerate(report.channel_variances):
                self.record.channels.append({
                    "run_id": self.record.run_id, "layer": name, "step": self.step,
                    "channel": channel, "input_variance": float(variance),
                })
        self.reports.extend(reports)
        if self.checkpoint_root is not None and self.config.save_checkpoints:
            path = save_checkpoint(checkpoint_path(self.checkpoint_root, self.record.run_id, self.step),
                                   network_state(self.graph, self.params))
            trace("Checkpoint written", {"run_id": self.record.run_id, "step": self.step, "path": path}, logger)
        return reports

    def _maybe_analyze(self) -> None:
        if self.step in self.config.analysis_steps:
            self.analyze()

    # ----- epochs -----
    def train_epoch(self, epoch: int) -> float:
        order = np.random.default_rng([self.spec.seed, epoch]).permutation(len(self.train))
        size = self.config.batch_size
        for start in range(0, len(order), size):
            idx = order[start:start + size]
            try:
                loss = self.train_step(self.train.images[idx], self.train.labels[idx])
            except DivergenceError as e:
                e.step = self.step + 1
                raise
            self.record.metrics.append({
                "run_id": self.record.run_id, "seed": self.spec.seed, "mu": self.spec.mu,
                "variant": self.spec.variant.value, "epoch": epoch, "step": self.step,
                "train_loss": loss, "val_error": None,
            })
            self._maybe_analyze()
        val_error = evaluate(self.graph, self.params, self.val)
        self.record.metrics[-1]["val_error"] = val_error
        return val_error

    def run(self) -> RunRecord:
        trace("Run started", {"run_id": self.record.run_id, "fingerprint": self.record.fingerprint[:12]}, logger)
        try:
            self._maybe_analyze()
            for epoch in range(1, self.config.epochs + 1):
                val_error = self.train_epoch(epoch)
                logger.info("%s epoch %d/%d: val_error %.4f", self.record.run_id, epoch, self.config.epochs, val_error)
        except DivergenceError as e:
            step = e.step if e.step is not None else max(self.step, 1)
            self.record.outcome = RunRecord.unstable(step)
            self.record.diverged_at = step
            trace("Run diverged", {"run_id": self.record.run_id, "step": step, "layer": e.layer_index}, logger)
        self.record.pmd = [
            {"run_id": self.record.run_id, "layer": row["layer"], "step": row["step"],
             "residual_rms": row["residual_rms"], "update_norm_sq": row["update_norm_sq"]}
            for row in self.ledger.rows
        ]
        trace("Run finished", {"run_id": self.record.run_id, "outcome": self.record.outcome}, logger)
        return self.record


def restore_run(config: ExperimentConfig, spec: RunSpec, checkpoint: Path, train: Dataset, val: Dataset,
                probe: Optional[np.ndarray] = None) -> TrainingRun:
    """A TrainingRun whose network is loaded from a checkpoint file."""
    run = TrainingRun(config, spec, train, val, probe=probe)
    restore_state(run.graph, run.params, load_checkpoint(checkpoint))
    return run

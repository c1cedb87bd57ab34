# src/services/network.py
"""
Forward / backward / SGD for the small conv-net family used in the experiments.

Convolutions run as W (OC x K) times the unrolled input (K x M), so the
weight gradient of every conv layer is literally X . E with E = dJ/dY.
Caches keep X, the unrolled X and Y per layer for the modal analysis.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from src.services.normalization import (
    NormCache,
    NormState,
    norm_backward,
    norm_forward_eval,
    norm_forward_train,
)
from src.utils.errors import ConfigError, DivergenceError, GeometryError, ShapeError, StaleCacheError
from src.utils.tensor_ops import (
    DTYPE,
    ConvGeometry,
    Tensor4,
    UnrolledInput,
    col2im_batch,
    im2col_batch,
)

logger = logging.getLogger("mlns.network")

CONV_GROUP = "conv"
OTHER_GROUP = "other"

ErrorHook = Callable[[np.ndarray], np.ndarray]


@dataclass
class RunContext:
    """Per-call switches threaded through the layers."""

    train: bool = True
    track_running: bool = True
    error_hooks: Dict[int, ErrorHook] = field(default_factory=dict)
    propagate_noisy_error: bool = True


# -----------------------------
# Layers
# -----------------------------
@dataclass
class Conv:
    name: str
    geom: ConvGeometry
    bias: bool = True

    kind = "Conv"

    def describe(self) -> str:
        g = self.geom
        return (f"{self.name}:Conv({g.in_channels}->{g.out_channels},{g.kernel_h}x{g.kernel_w},"
                f"s{g.stride},p{g.padding},{'bias' if self.bias else 'nobias'})")

    def output_shape(self, shape):
        c, h, w = shape
        if c != self.geom.in_channels:
            raise GeometryError(f"{self.name} expects {self.geom.in_channels} channels", {"got": c})
        return (self.geom.out_channels, *self.geom.output_hw(h, w))

    def init_params(self, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        g = self.geom
        bound = np.sqrt(6.0 / g.rows)
        params = {f"{self.name}.W": rng.uniform(-bound, bound, size=(g.out_channels, g.in_channels, g.kernel_h, g.kernel_w))}
        if self.bias:
            params[f"{self.name}.b"] = np.zeros(g.out_channels, dtype=DTYPE)
        return params

    def weight(self, params) -> np.ndarray:
        return params[f"{self.name}.W"].reshape(self.geom.out_channels, -1)

    def forward(self, x, params, ctx: RunContext):
        unrolled = im2col_batch(x, self.geom)
        y = np.einsum("ok,bkm->bom", self.weight(params), unrolled.data)
        if self.bias:
            y = y + params[f"{self.name}.b"][None, :, None]
        oh, ow = unrolled.out_hw
        return y.reshape(x.shape[0], self.geom.out_channels, oh, ow), {"unrolled": unrolled, "in_hw": x.shape[2:]}

    def backward(self, g, cache, params, ctx: RunContext, index: int):
        unrolled: UnrolledInput = cache["unrolled"]
        local_error = g.reshape(g.shape[0], self.geom.out_channels, -1)
        hook = ctx.error_hooks.get(index)
        upstream_error = local_error
        if hook is not None:
            local_error = hook(local_error)
            if ctx.propagate_noisy_error:
                upstream_error = local_error

        grads = {f"{self.name}.W": np.einsum("bkm,bom->ok", unrolled.data, local_error).reshape(params[f"{self.name}.W"].shape)}
        if self.bias:
            grads[f"{self.name}.b"] = local_error.sum(axis=(0, 2))
        grad_cols = np.einsum("ok,bom->bkm", self.weight(params), upstream_error)
        grad_x = col2im_batch(grad_cols, self.geom, tuple(cache["in_hw"]))
        return grad_x, grads, local_error


@dataclass
class ReLU:
    name: str = "relu"

    kind = "ReLU"

    def describe(self) -> str:
        return f"{self.name}:ReLU"

    def output_shape(self, shape):
        return shape

    def init_params(self, rng):
        return {}

    def forward(self, x, params, ctx):
        mask = x > 0
        return np.where(mask, x, 0.0), {"mask": mask}

    def backward(self, g, cache, params, ctx, index):
        return np.where(cache["mask"], g, 0.0), {}, None


@dataclass
class AvgPool:
    name: str
    kernel: int = 2
    stride: int = 2

    kind = "AvgPool"

    def describe(self) -> str:
        return f"{self.name}:AvgPool({self.kernel}x{self.kernel},s{self.stride})"

    def _geom(self) -> ConvGeometry:
        return ConvGeometry(1, 1, self.kernel, self.kernel, self.stride, 0)

    def output_shape(self, shape):
        c, h, w = shape
        return (c, *self._geom().output_hw(h, w))

    def init_params(self, rng):
        return {}

    def forward(self, x, params, ctx):
        b, c, h, w = x.shape
        unrolled = im2col_batch(x.reshape(b * c, 1, h, w), self._geom())
        oh, ow = unrolled.out_hw
        return unrolled.data.mean(axis=1).reshape(b, c, oh, ow), {"shape": x.shape, "out_hw": (oh, ow)}

    def backward(self, g, cache, params, ctx, index):
        b, c, h, w = cache["shape"]
        k2 = self.kernel * self.kernel
        spread = np.broadcast_to(g.reshape(b * c, 1, -1) / k2, (b * c, k2, g.shape[2] * g.shape[3]))
        return col2im_batch(spread, self._geom(), (h, w)).reshape(b, c, h, w), {}, None


@dataclass
class FullyConnected:
    name: str
    in_features: int
    out_features: int

    kind = "FullyConnected"

    def describe(self) -> str:
        return f"{self.name}:FullyConnected({self.in_features}->{self.out_features})"

    def output_shape(self, shape):
        flat = int(np.prod(shape))
        if flat != self.in_features:
            raise GeometryError(f"{self.name} expects {self.in_features} inputs", {"got": flat, "shape": shape})
        return (self.out_features,)

    def init_params(self, rng):
        bound = np.sqrt(6.0 / self.in_features)
        return {
            f"{self.name}.W": rng.uniform(-bound, bound, size=(self.out_features, self.in_features)),
            f"{self.name}.b": np.zeros(self.out_features, dtype=DTYPE),
        }

    def forward(self, x, params, ctx):
        flat = x.reshape(x.shape[0], -1)
        return flat @ params[f"{self.name}.W"].T + params[f"{self.name}.b"], {"flat": flat, "shape": x.shape}

    def backward(self, g, cache, params, ctx, index):
        grads = {f"{self.name}.W": g.T @ cache["flat"], f"{self.name}.b": g.sum(axis=0)}
        return (g @ params[f"{self.name}.W"]).reshape(cache["shape"]), grads, None


@dataclass
class Norm:
    name: str
    state: NormState

    kind = "Norm"

    def describe(self) -> str:
        s = self.state
        return f"{self.name}:Norm({s.channels},{s.variant.value},{s.placement.value},thr={s.threshold:g},{s.reading.value})"

    def output_shape(self, shape):
        if shape[0] != self.state.channels:
            raise GeometryError(f"{self.name} expects {self.state.channels} channels", {"got": shape[0]})
        return shape

    def init_params(self, rng):
        # gamma/beta are the state's own arrays so SGD updates reach the layer in place
        return {f"{self.name}.gamma": self.state.gamma, f"{self.name}.beta": self.state.beta}

    def forward(self, x, params, ctx):
        if ctx.train:
            y, cache = norm_forward_train(x, self.state, track_running=ctx.track_running)
            return y, {"norm": cache}
        return norm_forward_eval(x, self.state), {}

    def backward(self, g, cache, params, ctx, index):
        norm_cache: NormCache = cache["norm"]
        grad_x, grad_gamma, grad_beta = norm_backward(g, norm_cache, self.state)
        return grad_x, {f"{self.name}.gamma": grad_gamma, f"{self.name}.beta": grad_beta}, None


Layer = Conv | ReLU | AvgPool | FullyConnected | Norm


# -----------------------------
# Graph / params / caches
# -----------------------------
@dataclass
class LayerGraph:
    input_shape: Tuple[int, int, int]
    layers: List[Layer]
    num_classes: int = 10
    loss: str = "softmax_cross_entropy"

    def __post_init__(self):
        shape = tuple(self.input_shape)
        for layer in self.layers:
            shape = layer.output_shape(shape)
        if shape != (self.num_classes,):
            raise GeometryError("Graph output does not match class count", {"output": shape, "classes": self.num_classes})

    def describe(self) -> List[str]:
        return [layer.describe() for layer in self.layers]

    def fingerprint(self) -> str:
        text = "|".join([f"input{tuple(self.input_shape)}", *self.describe(), self.loss])
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def conv_indices(self) -> List[int]:
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, Conv)]

    def norm_layers(self) -> List[Norm]:
        return [layer for layer in self.layers if isinstance(layer, Norm)]

    def layer_named(self, name: str) -> Tuple[int, Layer]:
        for i, layer in enumerate(self.layers):
            if layer.name == name:
                return i, layer
        raise KeyError(name)


@dataclass
class ParamSet:
    tensors: Dict[str, np.ndarray]
    groups: Dict[str, str]
    frozen: set = field(default_factory=set)
    version: int = 0

    def names(self) -> List[str]:
        return list(self.tensors)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def copy_arrays(self) -> Dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.tensors.items()}


@dataclass
class ForwardCache:
    inputs: List[np.ndarray]
    outputs: List[np.ndarray]
    entries: List[dict]
    probs: np.ndarray
    param_version: int
    consumed: bool = False

    def unrolled(self, index: int) -> UnrolledInput:
        return self.entries[index]["unrolled"]


@dataclass
class BackwardRecord:
    local_errors: Dict[int, np.ndarray]
    grads: Dict[str, np.ndarray]
    output_error: np.ndarray


def init_params(graph: LayerGraph, seed: int, frozen: Optional[set] = None) -> ParamSet:
    """Fan-in scaled uniform init; norm layers draw nothing, so variants with the same seed share weights."""
    rng = np.random.default_rng(seed)
    tensors, groups = {}, {}
    for layer in graph.layers:
        for name, value in layer.init_params(rng).items():
            tensors[name] = value
            groups[name] = CONV_GROUP if isinstance(layer, Conv) and name.endswith(".W") else OTHER_GROUP
    return ParamSet(tensors, groups, set(frozen or ()))


# -----------------------------
# Loss
# -----------------------------
def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    picked = probs[np.arange(labels.shape[0]), labels]
    return float(-np.mean(np.log(np.maximum(picked, np.finfo(DTYPE).tiny))))


def softmax_ce_error(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """(softmax - onehot) / B."""
    err = probs.copy()
    err[np.arange(labels.shape[0]), labels] -= 1.0
    return err / labels.shape[0]


# -----------------------------
# Operations
# -----------------------------
def _as_array(batch) -> np.ndarray:
    return batch.data if isinstance(batch, Tensor4) else np.asarray(batch, dtype=DTYPE)


def run_layers(graph: LayerGraph, params: ParamSet, batch, ctx: RunContext):
    x = _as_array(batch)
    if x.shape[1:] != tuple(graph.input_shape):
        raise ShapeError(f"Batch shape {x.shape[1:]} does not match graph input {tuple(graph.input_shape)}")
    inputs, outputs, entries = [], [], []
    for index, layer in enumerate(graph.layers):
        inputs.append(x)
        x, entry = layer.forward(x, params.tensors, ctx)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(index)
        outputs.append(x)
        entries.append(entry)
    return x, inputs, outputs, entries


def forward(graph: LayerGraph, params: ParamSet, batch, labels: np.ndarray,
            ctx: Optional[RunContext] = None) -> Tuple[float, ForwardCache]:
    ctx = ctx or RunContext()
    logits, inputs, outputs, entries = run_layers(graph, params, batch, ctx)
    probs = softmax(logits)
    loss = cross_entropy(probs, np.asarray(labels))
    if not np.isfinite(loss):
        raise DivergenceError(-1)
    return loss, ForwardCache(inputs, outputs, entries, probs, params.version)


def predict(graph: LayerGraph, params: ParamSet, batch) -> np.ndarray:
    logits, _, _, _ = run_layers(graph, params, batch, RunContext(train=False, track_running=False))
    return logits


def backward(graph: LayerGraph, params: ParamSet, cache: ForwardCache, labels: np.ndarray,
             ctx: Optional[RunContext] = None) -> BackwardRecord:
    if cache.consumed or cache.param_version != params.version:
        raise StaleCacheError("Forward cache is stale or already consumed")
    ctx = ctx or RunContext()
    output_error = softmax_ce_error(cache.probs, np.asarray(labels))

    g = output_error
    grads: Dict[str, np.ndarray] = {}
    local_errors: Dict[int, np.ndarray] = {}
    for index in range(len(graph.layers) - 1, -1, -1):
        layer = graph.layers[index]
        g, layer_grads, local_error = layer.backward(g, cache.entries[index], params.tensors, ctx, index)
        grads.update(layer_grads)
        if local_error is not None:
            local_errors[index] = local_error
    cache.consumed = True
    return BackwardRecord(local_errors, grads, output_error)


def sgd_step(params: ParamSet, grads: Dict[str, np.ndarray], lr_map: Dict[str, float]) -> ParamSet:
    """w <- w - mu_group * g, in place; frozen tensors are skipped. Nothing moves if any check fails."""
    live = [(name, grad) for name, grad in grads.items() if name not in params.frozen]
    for name, grad in live:
        tensor = params.tensors[name]
        if grad.shape != tensor.shape:
            raise ShapeError(f"Gradient for {name} has shape {grad.shape}, expected {tensor.shape}")
    missing = sorted({params.groups[name] for name, _ in live} - set(lr_map))
    if missing:
        raise ConfigError([f"No step size for parameter group {group!r}" for group in missing])
    for name, grad in live:
        mu = lr_map[params.groups[name]]
        if mu:
            params.tensors[name] -= mu * grad
    params.version += 1
    return params

# src/services/normalization.py
"""
BatchNorm and the thresholded variants BN_Amplify / BN_Suppress.

Only channels selected by the variant mask are normalized (and carry gamma/beta);
the rest pass through untouched. The mask is recomputed on every forward pass
from the batch variance (train) or the running variance (eval).
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Tuple

import numpy as np

from src.utils.errors import NormStateError, ShapeError, StaleCacheError
from src.utils.tensor_ops import DTYPE, Tensor4

logger = logging.getLogger("mlns.norm")

DEFAULT_EPS = 1e-5
DEFAULT_MOMENTUM = 0.1


class NormVariant(str, Enum):
    STANDARD = "standard"
    AMPLIFY = "amplify"
    SUPPRESS = "suppress"


class Placement(str, Enum):
    AFTER_CONV = "after_conv"
    BEFORE_CONV = "before_conv"


class ThresholdReading(str, Enum):
    # "names": Amplify normalizes weak channels, Suppress normalizes strong ones.
    # "prose": the literal sentence reading, with the comparisons swapped.
    NAMES = "names"
    PROSE = "prose"


# -----------------------------
# State
# -----------------------------
@dataclass
class NormState:
    channels: int
    gamma: np.ndarray = None
    beta: np.ndarray = None
    running_mean: np.ndarray = None
    running_var: np.ndarray = None
    momentum: float = DEFAULT_MOMENTUM
    eps: float = DEFAULT_EPS
    variant: NormVariant = NormVariant.STANDARD
    threshold: float = 1.0
    placement: Placement = Placement.AFTER_CONV
    reading: ThresholdReading = ThresholdReading.NAMES
    steps: int = 0
    forward_count: int = field(default=0, repr=False)

    def __post_init__(self):
        c = self.channels
        self.gamma = np.ones(c, dtype=DTYPE) if self.gamma is None else np.asarray(self.gamma, dtype=DTYPE)
        self.beta = np.zeros(c, dtype=DTYPE) if self.beta is None else np.asarray(self.beta, dtype=DTYPE)
        self.running_mean = np.zeros(c, dtype=DTYPE) if self.running_mean is None else np.asarray(self.running_mean, dtype=DTYPE)
        self.running_var = np.ones(c, dtype=DTYPE) if self.running_var is None else np.asarray(self.running_var, dtype=DTYPE)
        self.variant = NormVariant(self.variant)
        self.placement = Placement(self.placement)
        self.reading = ThresholdReading(self.reading)

        if self.gamma.shape != (c,) or self.beta.shape != (c,):
            raise NormStateError(f"gamma/beta must have length {c}")
        if np.any(self.running_var < 0):
            raise NormStateError("running_var must be nonnegative")
        if not 0.0 < self.momentum <= 1.0:
            raise NormStateError(f"momentum must be in (0, 1], got {self.momentum}")
        if self.eps < 0:
            raise NormStateError(f"eps must be nonnegative, got {self.eps}")
        if self.variant != NormVariant.STANDARD and self.threshold <= 0:
            raise NormStateError(f"threshold must be > 0 for {self.variant.value}")


@dataclass
class NormCache:
    batch_mean: np.ndarray
    batch_var: np.ndarray
    x_hat: np.ndarray
    mask: np.ndarray
    inv_std: np.ndarray
    generation: int
    consumed: bool = False


# -----------------------------
# Operations
# -----------------------------
def variant_mask(batch_var: np.ndarray, variant: NormVariant | str, threshold: float,
                 reading: ThresholdReading | str = ThresholdReading.NAMES) -> np.ndarray:
    var = np.asarray(batch_var, dtype=DTYPE)
    variant = NormVariant(variant)
    if variant == NormVariant.STANDARD:
        return np.ones(var.shape, dtype=bool)

    weak, strong = var < threshold, var > threshold
    if ThresholdReading(reading) == ThresholdReading.PROSE:
        weak, strong = strong, weak
    return weak if variant == NormVariant.AMPLIFY else strong


def _unwrap(x) -> Tuple[np.ndarray, bool]:
    if isinstance(x, Tensor4):
        return x.data, True
    return np.asarray(x, dtype=DTYPE), False


def _check_channels(x: np.ndarray, state: NormState) -> None:
    if x.ndim != 4 or x.shape[1] != state.channels:
        raise ShapeError(f"Norm layer expects {state.channels} channels, got input shape {x.shape}")


def _affine(x, mean, var, gamma, beta, eps, mask):
    # eps = 0 with a constant channel only produces nan on channels the mask may drop
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_std = 1.0 / np.sqrt(var + eps)
        x_hat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    normalized = gamma[None, :, None, None] * x_hat + beta[None, :, None, None]
    return np.where(mask[None, :, None, None], normalized, x), x_hat, inv_std


def norm_forward_train(x, state: NormState, track_running: bool = True):
    """Batch-statistics forward. Running stats advance for every channel when track_running is set."""
    data, wrapped = _unwrap(x)
    _check_channels(data, state)

    mean = data.mean(axis=(0, 2, 3))
    var = data.var(axis=(0, 2, 3))
    mask = variant_mask(var, state.variant, state.threshold, state.reading)
    y, x_hat, inv_std = _affine(data, mean, var, state.gamma, state.beta, state.eps, mask)

    if track_running:
        m = state.momentum
        state.running_mean = (1.0 - m) * state.running_mean + m * mean
        state.running_var = (1.0 - m) * state.running_var + m * var
        state.steps += 1

    state.forward_count += 1
    cache = NormCache(mean, var, x_hat, mask, inv_std, generation=state.forward_count)
    return (Tensor4(y) if wrapped else y), cache


def norm_forward_eval(x, state: NormState):
    data, wrapped = _unwrap(x)
    _check_channels(data, state)
    if state.steps == 0:
        raise NormStateError("Running statistics are uninitialized; take a training step first")

    mask = variant_mask(state.running_var, state.variant, state.threshold, state.reading)
    y, _, _ = _affine(data, state.running_mean, state.running_var, state.gamma, state.beta, state.eps, mask)
    return Tensor4(y) if wrapped else y


def norm_backward(grad_y, cache: NormCache, state: NormState):
    """Exact gradient of the batch-statistics forward, including the mean and variance paths."""
    if cache.consumed or cache.generation != state.forward_count:
        raise StaleCacheError("Norm cache does not belong to the latest forward pass")
    g, wrapped = _unwrap(grad_y)
    if g.shape != cache.x_hat.shape:
        raise ShapeError(f"grad_y shape {g.shape} does not match forward shape {cache.x_hat.shape}")

    n = g.shape[0] * g.shape[2] * g.shape[3]
    x_hat = cache.x_hat
    grad_gamma = np.sum(g * x_hat, axis=(0, 2, 3))
    grad_beta = np.sum(g, axis=(0, 2, 3))

    dx_hat = g * state.gamma[None, :, None, None]
    sum_dx_hat = dx_hat.sum(axis=(0, 2, 3))[None, :, None, None]
    sum_dx_hat_x_hat = (dx_hat * x_hat).sum(axis=(0, 2, 3))[None, :, None, None]
    normalized_grad = (cache.inv_std[None, :, None, None] / n) * (n * dx_hat - sum_dx_hat - x_hat * sum_dx_hat_x_hat)

    mask = cache.mask
    grad_x = np.where(mask[None, :, None, None], normalized_grad, g)
    cache.consumed = True
    return (Tensor4(grad_x) if wrapped else grad_x), np.where(mask, grad_gamma, 0.0), np.where(mask, grad_beta, 0.0)

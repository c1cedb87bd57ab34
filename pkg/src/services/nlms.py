# src/services/nlms.py
"""
NLMS weight update for convolution layers, derived from the principle of
minimum disturbance, plus the gradient-noise injection harness.

Sign convention: the local error delta is dJ/dy as delivered by backprop, so the
desired response is d = y - delta and every update is subtracted.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from src.schemas.experiment import NlmsConfig, NoiseConfig, NormKind
from src.utils.errors import ShapeError
from src.utils.tensor_ops import DTYPE, UnrolledInput

logger = logging.getLogger("mlns.nlms")


# -----------------------------
# Conv-layer updates
# -----------------------------
def _channel_view(unrolled: UnrolledInput) -> np.ndarray:
    """(B, IC, Z, M) view of the unrolled input."""
    g = unrolled.geom
    if g.patch_size == 0:
        raise ShapeError("Zero-length patch: kernel has no elements")
    b, _, m = unrolled.data.shape
    return unrolled.data.reshape(b, g.in_channels, g.patch_size, m)


def channel_patch_norms(unrolled: UnrolledInput, norm_kind: NormKind | str) -> np.ndarray:
    """Per (sample, channel, output pixel) patch norm: squared L2 or plain L1. Shape (B, IC, M)."""
    blocks = _channel_view(unrolled)
    if NormKind(norm_kind) == NormKind.L1:
        return np.abs(blocks).sum(axis=2)
    return np.square(blocks).sum(axis=2)


def nlms_direction(unrolled: UnrolledInput, local_error: np.ndarray, cfg: NlmsConfig) -> np.ndarray:
    """
    (1/M) sum_b sum_m delta^(m,b) x_i^(m,b) / (||X_i^(m,b)|| + eps_n), per channel block i.

    Returns an array shaped like the conv weights (OC, IC, H, W) without mu applied.
    """
    blocks = _channel_view(unrolled)
    b, ic, z, m = blocks.shape
    e = np.asarray(local_error, dtype=DTYPE)
    if e.ndim != 3 or e.shape[0] != b or e.shape[2] != m:
        raise ShapeError(f"Local error shape {e.shape} does not match unrolled input (B={b}, M={m})")

    denom = channel_patch_norms(unrolled, cfg.norm_kind) + cfg.stabilizer
    normalized = blocks / denom[:, :, None, :]
    direction = np.einsum("bizm,bom->oiz", normalized, e) / m
    g = unrolled.geom
    return direction.reshape(e.shape[1], ic, g.kernel_h, g.kernel_w)


def nlms_conv_update(W: np.ndarray, unrolled: UnrolledInput, local_error: np.ndarray, cfg: NlmsConfig) -> np.ndarray:
    return W - cfg.mu * nlms_direction(unrolled, local_error, cfg)


def variance_normalized_direction(unrolled: UnrolledInput, local_error: np.ndarray,
                                  channel_power: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """
    sum_b sum_m delta^(m,b) x_i^(m,b) / sigma_i^2 with one power per input channel.

    With channel_power = 1 this is exactly the plain SGD conv gradient; with
    gamma_i^2 + beta_i^2 of a preceding norm layer it is the learned-parameter corrected update.
    """
    blocks = _channel_view(unrolled)
    power = np.maximum(np.asarray(channel_power, dtype=DTYPE), floor)
    if power.shape != (blocks.shape[1],):
        raise ShapeError(f"channel_power needs {blocks.shape[1]} entries, got {power.shape}")
    direction = np.einsum("bizm,bom->oiz", blocks / power[None, :, None, None], local_error)
    g = unrolled.geom
    return direction.reshape(local_error.shape[1], g.in_channels, g.kernel_h, g.kernel_w)


def learned_param_denominator(gamma_i, beta_i, floor: Optional[float] = None):
    """gamma^2 + beta^2; degenerate (zero) entries are logged since the update then needs the floor."""
    denom = np.square(np.asarray(gamma_i, dtype=DTYPE)) + np.square(np.asarray(beta_i, dtype=DTYPE))
    if np.any(denom == 0.0):
        logger.warning("gamma^2 + beta^2 is zero on %d channel(s); denominator floor %g applies",
                       int(np.sum(denom == 0.0)), floor if floor is not None else NlmsConfig().stabilizer)
    return float(denom) if denom.ndim == 0 else denom


# -----------------------------
# Scalar PMD audit
# -----------------------------
@dataclass
class PmdAudit:
    residual: float
    update_norm_sq: float
    min_probe_norm_sq: Optional[float] = None

    @property
    def is_minimal(self) -> bool:
        return self.min_probe_norm_sq is None or self.update_norm_sq <= self.min_probe_norm_sq + 1e-10


@dataclass
class PmdLedger:
    """Per audited step: constraint residuals per output pixel and the update energy."""

    rows: List[dict] = field(default_factory=list)

    def record(self, layer: str, step: int, residuals: np.ndarray, update_norm_sq: float) -> None:
        residuals = np.asarray(residuals, dtype=DTYPE)
        self.rows.append({
            "layer": layer,
            "step": step,
            "residual_rms": float(np.sqrt(np.mean(residuals ** 2))) if residuals.size else 0.0,
            "update_norm_sq": float(update_norm_sq),
            "residuals": residuals,
        })


def nlms_scalar_step(W: np.ndarray, x: np.ndarray, d: float, mu: float = 1.0, stabilizer: float = 0.0) -> np.ndarray:
    """One NLMS step on a scalar-output filter: delta = W^T x - d, W' = W - mu delta x / (||x||^2 + eps)."""
    W = np.asarray(W, dtype=DTYPE)
    x = np.asarray(x, dtype=DTYPE)
    delta = float(W @ x) - d
    return W - mu * delta * x / (float(x @ x) + stabilizer)


def probe_minimality(W: np.ndarray, x: np.ndarray, d: float, W_new: np.ndarray,
                     n_probes: int = 100, rng: Optional[np.random.Generator] = None) -> float:
    """Smallest ||dW||^2 among random updates that also satisfy W'^T x = d."""
    rng = rng or np.random.default_rng(0)
    x = np.asarray(x, dtype=DTYPE)
    base = np.asarray(W_new, dtype=DTYPE) - np.asarray(W, dtype=DTYPE)
    # any constraint-satisfying update is base plus a component orthogonal to x
    probes = rng.standard_normal((n_probes, x.shape[0]))
    probes -= np.outer(probes @ x, x) / float(x @ x)
    candidates = base[None, :] + probes
    return float(np.min(np.sum(candidates ** 2, axis=1)))


def pmd_audit_scalar(W: np.ndarray, x: np.ndarray, d: float, W_new: np.ndarray,
                     n_probes: int = 100, rng: Optional[np.random.Generator] = None) -> PmdAudit:
    W_new = np.asarray(W_new, dtype=DTYPE)
    residual = d - float(W_new @ np.asarray(x, dtype=DTYPE))
    update = W_new - np.asarray(W, dtype=DTYPE)
    min_probe = probe_minimality(W, x, d, W_new, n_probes, rng) if n_probes > 0 else None
    return PmdAudit(residual, float(update @ update), min_probe)


def conv_constraint_residuals(W_new: np.ndarray, unrolled: UnrolledInput, outputs: np.ndarray,
                              local_error: np.ndarray, bias: Optional[np.ndarray] = None) -> np.ndarray:
    """d - W'^T X per output pixel with d = y - delta; shape (B, OC, M)."""
    y = outputs.reshape(local_error.shape)
    desired = y - local_error
    new_y = np.einsum("ok,bkm->bom", W_new.reshape(W_new.shape[0], -1), unrolled.data)
    if bias is not None:
        new_y = new_y + bias[None, :, None]
    return desired - new_y


# -----------------------------
# Noise injection
# -----------------------------
class NoiseInjector:
    """Seeded Gaussian noise on the local error, scaled by its standard deviation."""

    def __init__(self, cfg: NoiseConfig):
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)

    def __call__(self, local_error: np.ndarray) -> np.ndarray:
        return inject_noise(local_error, self.cfg, self.rng)


def inject_noise(local_error: np.ndarray, cfg: NoiseConfig, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    e = np.asarray(local_error, dtype=DTYPE)
    if e.size == 0:
        raise ShapeError("Cannot inject noise into an empty local error")
    sigma = float(e.std())
    if cfg.alpha == 0.0 or sigma == 0.0:
        return e
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    return e + cfg.alpha * sigma * rng.standard_normal(e.shape)

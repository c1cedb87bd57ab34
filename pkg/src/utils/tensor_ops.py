# src/utils/tensor_ops.py
"""
Dense tensors and the im2col / col2im restructuring.

A convolution with weights of shape (OC, IC, H, W) becomes a matrix product
between the flattened weights (OC x K) and the unrolled input (K x M), where
K = IC*H*W and M = OH*OW. Rows of the unrolled input are ordered
(channel, kernel row, kernel col), so each input channel owns a contiguous
block of Z = H*W rows.
"""

from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from src.utils.errors import GeometryError, ShapeError

DTYPE = np.float64


# -----------------------------
# Types
# -----------------------------
@dataclass(frozen=True)
class ConvGeometry:
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel_h", "kernel_w", "padding"):
            if getattr(self, name) < 0:
                raise GeometryError(f"{name} must be nonnegative", {name: getattr(self, name)})
        if self.stride < 1:
            raise GeometryError("stride must be >= 1", {"stride": self.stride})

    @property
    def patch_size(self) -> int:
        """Z: rows contributed by one input channel."""
        return self.kernel_h * self.kernel_w

    @property
    def rows(self) -> int:
        """K = IC*H*W."""
        return self.in_channels * self.patch_size

    def output_hw(self, in_h: int, in_w: int) -> Tuple[int, int]:
        oh = (in_h + 2 * self.padding - self.kernel_h) // self.stride + 1
        ow = (in_w + 2 * self.padding - self.kernel_w) // self.stride + 1
        if in_h + 2 * self.padding < self.kernel_h or in_w + 2 * self.padding < self.kernel_w or oh < 1 or ow < 1:
            raise GeometryError(
                "Kernel does not fit input",
                {"in_h": in_h, "in_w": in_w, "kernel_h": self.kernel_h, "kernel_w": self.kernel_w,
                 "stride": self.stride, "padding": self.padding},
            )
        return oh, ow

    def channel_blocks(self) -> List[Tuple[int, range]]:
        z = self.patch_size
        return [(i, range(i * z, (i + 1) * z)) for i in range(self.in_channels)]


@dataclass
class Tensor4:
    """Activations in layout form, shape (B, C, H, W)."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=DTYPE)
        if self.data.ndim != 4:
            raise ShapeError(f"Tensor4 needs 4 dims, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ShapeError("Tensor4 entries must be finite")

    @property
    def dims(self) -> Tuple[int, int, int, int]:
        return tuple(self.data.shape)

    def sample(self, b: int) -> np.ndarray:
        return self.data[b]


@dataclass
class UnrolledInput:
    """
    Unrolled receptive-field patches.

    data has shape (B, K, M); a single-sample unroll has B = 1.
    Column m of sample b is the flattened patch of output pixel m.
    """

    data: np.ndarray
    geom: ConvGeometry
    out_hw: Tuple[int, int]
    channel_blocks: List[Tuple[int, range]] = field(default_factory=list)

    def __post_init__(self):
        if self.data.ndim == 2:
            self.data = self.data[None]
        b, k, m = self.data.shape
        if k != self.geom.rows or m != self.out_hw[0] * self.out_hw[1]:
            raise ShapeError(f"Unrolled shape {(k, m)} does not match geometry K={self.geom.rows}, "
                             f"M={self.out_hw[0] * self.out_hw[1]}")
        if not self.channel_blocks:
            self.channel_blocks = self.geom.channel_blocks()

    @property
    def rows(self) -> int:
        return self.data.shape[1]

    @property
    def cols(self) -> int:
        return self.data.shape[2]

    @property
    def batch(self) -> int:
        return self.data.shape[0]

    def matrix(self) -> np.ndarray:
        """Single-sample K x M matrix."""
        if self.batch != 1:
            raise ShapeError(f"matrix() needs a single-sample unroll, got batch {self.batch}")
        return self.data[0]

    def columns(self) -> np.ndarray:
        """All B*M columns side by side, K x (B*M), sample-major."""
        return self.data.transpose(1, 0, 2).reshape(self.rows, -1)


# -----------------------------
# Index plumbing
# -----------------------------
def _gather_indices(geom: ConvGeometry, in_h: int, in_w: int):
    """Source (c, h, w) for every (row, col) of the unrolled matrix plus the in-bounds mask."""
    oh, ow = geom.output_hw(in_h, in_w)
    c = np.repeat(np.arange(geom.in_channels), geom.patch_size)
    kh = np.tile(np.repeat(np.arange(geom.kernel_h), geom.kernel_w), geom.in_channels)
    kw = np.tile(np.arange(geom.kernel_w), geom.kernel_h * geom.in_channels)
    oy = np.repeat(np.arange(oh), ow) * geom.stride - geom.padding
    ox = np.tile(np.arange(ow), oh) * geom.stride - geom.padding

    rows_h = kh[:, None] + oy[None, :]
    rows_w = kw[:, None] + ox[None, :]
    valid = (rows_h >= 0) & (rows_h < in_h) & (rows_w >= 0) & (rows_w < in_w)
    chan = np.broadcast_to(c[:, None], rows_h.shape)
    flat = (chan * in_h + np.clip(rows_h, 0, in_h - 1)) * in_w + np.clip(rows_w, 0, in_w - 1)
    return flat, valid, (oh, ow)


def _check_sample(x: np.ndarray, geom: ConvGeometry) -> None:
    if x.ndim != 3 or x.shape[0] != geom.in_channels:
        raise GeometryError(
            "Input does not match convolution geometry",
            {"input_shape": tuple(x.shape), "in_channels": geom.in_channels},
        )


# -----------------------------
# Operations
# -----------------------------
def im2col(x: np.ndarray, geom: ConvGeometry) -> UnrolledInput:
    """Unroll one (C, H, W) sample; padding is implicit zeros."""
    x = np.asarray(x, dtype=DTYPE)
    _check_sample(x, geom)
    flat, valid, out_hw = _gather_indices(geom, x.shape[1], x.shape[2])
    cols = np.where(valid, x.reshape(-1)[flat], 0.0)
    return UnrolledInput(cols, geom, out_hw)


def im2col_batch(x: Tensor4 | np.ndarray, geom: ConvGeometry) -> UnrolledInput:
    """Unroll every sample of a (B, C, H, W) batch; same layout as im2col per sample."""
    data = x.data if isinstance(x, Tensor4) else np.asarray(x, dtype=DTYPE)
    if data.ndim != 4:
        raise GeometryError("Batch must be 4-D", {"input_shape": tuple(data.shape)})
    _check_sample(data[0], geom)
    flat, valid, out_hw = _gather_indices(geom, data.shape[2], data.shape[3])
    gathered = data.reshape(data.shape[0], -1)[:, flat]
    return UnrolledInput(np.where(valid[None], gathered, 0.0), geom, out_hw)


def col2im(grad: np.ndarray, geom: ConvGeometry, in_hw: Tuple[int, int]) -> np.ndarray:
    """Adjoint of im2col: scatter-add a K x M matrix back to a (C, H, W) sample."""
    grad = np.asarray(grad, dtype=DTYPE)
    flat, valid, out_hw = _gather_indices(geom, *in_hw)
    if grad.shape != flat.shape:
        raise ShapeError(f"col2im expects shape {flat.shape}, got {grad.shape}")
    out = np.zeros(geom.in_channels * in_hw[0] * in_hw[1], dtype=DTYPE)
    np.add.at(out, flat[valid], grad[valid])
    return out.reshape(geom.in_channels, *in_hw)


def col2im_batch(grad: np.ndarray, geom: ConvGeometry, in_hw: Tuple[int, int]) -> np.ndarray:
    """Per-sample col2im over a (B, K, M) stack; returns (B, C, H, W)."""
    grad = np.asarray(grad, dtype=DTYPE)
    flat, valid, _ = _gather_indices(geom, *in_hw)
    if grad.ndim != 3 or grad.shape[1:] != flat.shape:
        raise ShapeError(f"col2im_batch expects shape (B, {flat.shape[0]}, {flat.shape[1]}), got {grad.shape}")
    b = grad.shape[0]
    size = geom.in_channels * in_hw[0] * in_hw[1]
    target = (np.arange(b)[:, None] * size + flat[valid][None, :]).reshape(-1)
    out = np.zeros(b * size, dtype=DTYPE)
    np.add.at(out, target, grad[:, valid].reshape(-1))
    return out.reshape(b, geom.in_channels, *in_hw)


def channel_moments(u: UnrolledInput | np.ndarray, blocks=None) -> Tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and population variance over all B*Z*M entries of each block."""
    if isinstance(u, UnrolledInput):
        blocks = blocks if blocks is not None else u.channel_blocks
        cols = u.columns()
    else:
        cols = np.asarray(u, dtype=DTYPE)
        if cols.ndim == 3:
            cols = cols.transpose(1, 0, 2).reshape(cols.shape[1], -1)
    if blocks is None:
        raise ShapeError("channel_moments needs channel blocks for a raw matrix")

    means, variances = [], []
    for i, rows in blocks:
        entries = cols[rows.start:rows.stop]
        if entries.size < 2:
            raise ShapeError(f"Channel block {i} has {entries.size} entries, need at least 2")
        means.append(entries.mean())
        variances.append(entries.var())
    return np.asarray(means), np.asarray(variances)

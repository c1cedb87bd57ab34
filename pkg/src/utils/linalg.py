# src/utils/linalg.py
"""
Autocorrelation of unrolled inputs and a cyclic Jacobi eigensolver.
"""

import logging
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from src.utils.errors import EigenConvergenceError, PartitionError, ShapeError
from src.utils.tensor_ops import DTYPE, UnrolledInput

logger = logging.getLogger("mlns.linalg")

MAX_SWEEPS = 50
OFF_DIAGONAL_TOL = 1e-12
ZERO_CLAMP = 1e-12


# -----------------------------
# Types
# -----------------------------
@dataclass
class SymMatrix:
    """Dense symmetric matrix; symmetrized on construction. `mean` keeps the row-mean vector it was built from."""

    data: np.ndarray
    mean: Optional[np.ndarray] = None

    def __post_init__(self):
        a = np.asarray(self.data, dtype=DTYPE)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ShapeError(f"SymMatrix needs a square matrix, got {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ShapeError("SymMatrix entries must be finite")
        self.data = 0.5 * (a + a.T)

    @property
    def n(self) -> int:
        return self.data.shape[0]


@dataclass
class EigenDecomposition:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    sweeps: int = 0

    @property
    def lambda_min(self) -> float:
        return float(self.eigenvalues[0])

    @property
    def lambda_max(self) -> float:
        return float(self.eigenvalues[-1])

    def clamped(self) -> np.ndarray:
        """Eigenvalues with anything below ZERO_CLAMP * lambda_max reported as 0."""
        lam = self.eigenvalues.copy()
        floor = ZERO_CLAMP * max(self.lambda_max, 0.0)
        lam[lam < floor] = 0.0
        return lam

    def reconstruct(self) -> np.ndarray:
        q = self.eigenvectors
        return (q * self.eigenvalues) @ q.T


# -----------------------------
# Statistics
# -----------------------------
def autocorrelation(samples: UnrolledInput | np.ndarray) -> SymMatrix:
    """R = (1/N) sum over all B*M columns of (x - xbar)(x - xbar)^T."""
    cols = samples.columns() if isinstance(samples, UnrolledInput) else np.asarray(samples, dtype=DTYPE)
    if cols.ndim != 2:
        raise ShapeError(f"autocorrelation expects a K x N column matrix, got {cols.shape}")
    n = cols.shape[1]
    if n < 2:
        raise ShapeError(f"autocorrelation needs at least 2 columns, got {n}")
    mean = cols.mean(axis=1)
    centered = cols - mean[:, None]
    return SymMatrix(centered @ centered.T / n, mean=mean)


def cross_correlation(samples: UnrolledInput | np.ndarray, desired: np.ndarray) -> np.ndarray:
    """P = (1/N) sum (x - xbar)(d - dbar); pairs with autocorrelation for Wiener-Hopf."""
    cols = samples.columns() if isinstance(samples, UnrolledInput) else np.asarray(samples, dtype=DTYPE)
    d = np.asarray(desired, dtype=DTYPE).reshape(-1)
    if d.shape[0] != cols.shape[1]:
        raise ShapeError(f"desired has {d.shape[0]} entries for {cols.shape[1]} columns")
    centered = cols - cols.mean(axis=1, keepdims=True)
    return centered @ (d - d.mean()) / cols.shape[1]


# -----------------------------
# Jacobi
# -----------------------------
def _rotate(a: np.ndarray, v: np.ndarray, p: int, q: int) -> None:
    apq = a[p, q]
    tau = (a[q, q] - a[p, p]) / (2.0 * apq)
    t = (1.0 if tau >= 0 else -1.0) / (abs(tau) + np.sqrt(1.0 + tau * tau))
    c = 1.0 / np.sqrt(1.0 + t * t)
    s = t * c

    col_p, col_q = a[:, p].copy(), a[:, q].copy()
    a[:, p] = c * col_p - s * col_q
    a[:, q] = s * col_p + c * col_q
    row_p, row_q = a[p, :].copy(), a[q, :].copy()
    a[p, :] = c * row_p - s * row_q
    a[q, :] = s * row_p + c * row_q
    a[p, q] = a[q, p] = 0.0

    vec_p, vec_q = v[:, p].copy(), v[:, q].copy()
    v[:, p] = c * vec_p - s * vec_q
    v[:, q] = s * vec_p + c * vec_q


def _max_off_diagonal(a: np.ndarray) -> float:
    if a.shape[0] < 2:
        return 0.0
    return float(np.max(np.abs(a[~np.eye(a.shape[0], dtype=bool)])))


def sym_eig(m: SymMatrix | np.ndarray, max_sweeps: int = MAX_SWEEPS) -> EigenDecomposition:
    """Cyclic-by-row Jacobi; stops when max |off-diagonal| <= 1e-12 * ||m||_F."""
    sym = m if isinstance(m, SymMatrix) else SymMatrix(m)
    a = sym.data.copy()
    n = sym.n
    v = np.eye(n, dtype=DTYPE)
    tol = OFF_DIAGONAL_TOL * np.linalg.norm(a)

    sweeps = 0
    off = _max_off_diagonal(a)
    while off > tol:
        if sweeps >= max_sweeps:
            raise EigenConvergenceError(sweeps, off)
        for p in range(n - 1):
            for q in range(p + 1, n):
                # skip rotations already below threshold
                if abs(a[p, q]) > tol:
                    _rotate(a, v, p, q)
        sweeps += 1
        off = _max_off_diagonal(a)

    order = np.argsort(np.diag(a), kind="stable")
    return EigenDecomposition(np.diag(a)[order].copy(), v[:, order], sweeps)


# -----------------------------
# Block diagnostics
# -----------------------------
def _as_ranges(blocks: Iterable) -> list:
    ranges = []
    for b in blocks:
        if isinstance(b, tuple) and len(b) == 2 and isinstance(b[1], range):
            b = b[1]
        ranges.append(b if isinstance(b, range) else range(*b))
    return ranges


def validate_partition(blocks: Iterable, n: int) -> list:
    ranges = sorted(_as_ranges(blocks), key=lambda r: r.start)
    cursor = 0
    for r in ranges:
        if r.start != cursor or r.stop <= r.start:
            raise PartitionError(f"Blocks do not partition [0, {n}): gap or overlap at row {cursor}")
        cursor = r.stop
    if cursor != n:
        raise PartitionError(f"Blocks cover [0, {cursor}) but matrix order is {n}")
    return ranges


def block_energy_ratio(r: SymMatrix | np.ndarray, blocks: Sequence) -> float:
    """Frobenius energy on the diagonal blocks over total energy; 1.0 for the zero matrix."""
    a = r.data if isinstance(r, SymMatrix) else np.asarray(r, dtype=DTYPE)
    ranges = validate_partition(blocks, a.shape[0])
    total = float(np.sum(a * a))
    if total == 0.0:
        return 1.0
    diag = sum(float(np.sum(a[rg.start:rg.stop, rg.start:rg.stop] ** 2)) for rg in ranges)
    return diag / total

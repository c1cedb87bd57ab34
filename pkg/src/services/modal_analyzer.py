# src/services/modal_analyzer.py
"""
Natural-mode analysis of a layer treated as an adaptive filter.

With C(n) = W(n) - W_o and R = Q diag(lambda) Q^T, the deterministic update
W(n+1) = W(n) - mu (R W(n) - P) decouples into modes
v_k(n) = (1 - mu lambda_k)^n v_k(0). The largest eigenvalue bounds the step size
(mu < 2 / lambda_max); the smallest sets the slowest time constant.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from src.utils.errors import ShapeError, SingularMatrixError
from src.utils.linalg import EigenDecomposition, SymMatrix, autocorrelation, block_energy_ratio, sym_eig
from src.utils.tensor_ops import DTYPE, UnrolledInput, channel_moments

logger = logging.getLogger("mlns.modal")

STABLE = "stable"
OSCILLATORY = "oscillatory"
DIVERGENT = "divergent"


# -----------------------------
# Types
# -----------------------------
@dataclass
class ModalReport:
    layer: str
    eigenvalues: np.ndarray
    mu: float
    mu_max: float
    tau_max: float
    tau: np.ndarray
    mode_status: List[str]
    block_energy_ratio: float
    channel_variances: np.ndarray
    step: int = 0

    @property
    def lambda_min(self) -> float:
        return float(self.eigenvalues[0])

    @property
    def lambda_max(self) -> float:
        return float(self.eigenvalues[-1])

    @property
    def regime(self) -> str:
        if DIVERGENT in self.mode_status:
            return DIVERGENT
        if OSCILLATORY in self.mode_status:
            return OSCILLATORY
        return STABLE

    def row(self, run_id: str) -> Dict[str, object]:
        return {
            "run_id": run_id,
            "layer": self.layer,
            "step": self.step,
            "lambda_min": self.lambda_min,
            "lambda_max": self.lambda_max,
            "mu_max": self.mu_max,
            "tau_max": self.tau_max,
            "block_energy_ratio": self.block_energy_ratio,
        }


@dataclass
class ModeTrajectory:
    k: int
    predicted: np.ndarray
    measured: np.ndarray


# -----------------------------
# Bounds
# -----------------------------
def time_constant(mu: float, lam: float) -> float:
    """tau = -1 / ln(1 - mu lambda); inf for a zero mode, nan outside 0 < mu lambda < 1."""
    x = mu * lam
    if x == 0.0:
        return math.inf
    if 0.0 < x < 1.0:
        return -1.0 / math.log1p(-x)
    return math.nan


def mode_status(mu: float, lam: float) -> str:
    x = mu * lam
    if x >= 2.0:
        return DIVERGENT
    if x >= 1.0:
        return OSCILLATORY
    return STABLE


def report_from_eig(eig: EigenDecomposition, mu: float, layer: str = "",
                    ratio: float = math.nan, channel_variances: Optional[np.ndarray] = None,
                    step: int = 0) -> ModalReport:
    lam = eig.clamped()
    lam_max = float(lam[-1])
    mu_max = 2.0 / lam_max if lam_max > 0 else math.inf
    tau = np.array([time_constant(mu, float(l)) for l in lam])
    return ModalReport(
        layer=layer,
        eigenvalues=lam,
        mu=mu,
        mu_max=mu_max,
        tau_max=time_constant(mu, float(lam[0])),
        tau=tau,
        mode_status=[mode_status(mu, float(l)) for l in lam],
        block_energy_ratio=ratio,
        channel_variances=np.asarray(channel_variances if channel_variances is not None else [], dtype=DTYPE),
        step=step,
    )


def analyze_layer(unrolled: UnrolledInput, mu: float, layer: str = "", step: int = 0) -> ModalReport:
    r = autocorrelation(unrolled)
    eig = sym_eig(r)
    _, variances = channel_moments(unrolled)
    ratio = block_energy_ratio(r, unrolled.channel_blocks)
    report = report_from_eig(eig, mu, layer, ratio, variances, step)
    logger.debug("%s step %d: lambda in [%.4g, %.4g], mu_max %.4g", layer, step,
                 report.lambda_min, report.lambda_max, report.mu_max)
    return report


# -----------------------------
# Wiener-Hopf
# -----------------------------
def wiener_solve(R: SymMatrix | np.ndarray, P: np.ndarray) -> np.ndarray:
    """Solve R W_o = P by Cholesky; a non positive-definite R reports its smallest eigenvalue."""
    sym = R if isinstance(R, SymMatrix) else SymMatrix(R)
    p = np.asarray(P, dtype=DTYPE).reshape(-1)
    if p.shape[0] != sym.n:
        raise ShapeError(f"P has {p.shape[0]} entries for R of order {sym.n}")
    try:
        factor = cho_factor(sym.data, lower=True)
    except LinAlgError:
        raise SingularMatrixError(sym_eig(sym).lambda_min)
    pivots = np.diag(factor[0]) ** 2
    if pivots.min() <= 1e-14 * max(float(np.max(np.diag(sym.data))), np.finfo(DTYPE).tiny):
        raise SingularMatrixError(sym_eig(sym).lambda_min)
    w = cho_solve(factor, p)
    if not np.all(np.isfinite(w)):
        raise SingularMatrixError(sym_eig(sym).lambda_min)
    return w


# -----------------------------
# Deterministic recursion
# -----------------------------
def full_gradient_descent(R: np.ndarray, P: np.ndarray, W0: np.ndarray, mu: float, steps: int) -> np.ndarray:
    """History W(0..steps) of W(n+1) = W(n) - mu (R W(n) - P); rows are steps."""
    R = np.asarray(R, dtype=DTYPE)
    P = np.asarray(P, dtype=DTYPE)
    history = np.empty((steps + 1, R.shape[0]), dtype=DTYPE)
    history[0] = W0
    w = np.asarray(W0, dtype=DTYPE).copy()
    with np.errstate(over="ignore", invalid="ignore"):
        for n in range(steps):
            w = w - mu * (R @ w - P)
            history[n + 1] = w
    return history


def mode_trajectories(weight_history: np.ndarray, W_o: np.ndarray, Q: np.ndarray,
                      eigenvalues: np.ndarray, mu: float) -> List[ModeTrajectory]:
    history = np.asarray(weight_history, dtype=DTYPE)
    if history.ndim != 2 or history.shape[1] != Q.shape[0] or np.shape(W_o) != (Q.shape[0],) \
            or len(eigenvalues) != Q.shape[1]:
        raise ShapeError(f"History {history.shape}, W_o {np.shape(W_o)}, Q {Q.shape} and "
                         f"{len(eigenvalues)} eigenvalues are inconsistent")
    measured = (history - W_o[None, :]) @ Q
    n = np.arange(history.shape[0])
    trajectories = []
    for k, lam in enumerate(eigenvalues):
        predicted = measured[0, k] * np.power(1.0 - mu * lam, n)
        trajectories.append(ModeTrajectory(k, predicted, measured[:, k].copy()))
    return trajectories


def fit_decay_rate(series: np.ndarray) -> float:
    """Least-squares slope of -ln|v(n)|, i.e. the fitted -ln(1 - mu lambda)."""
    v = np.abs(np.asarray(series, dtype=DTYPE))
    keep = v > np.finfo(DTYPE).tiny
    n = np.arange(v.shape[0])[keep]
    slope, _ = np.polyfit(n, np.log(v[keep]), 1)
    return float(-slope)


# -----------------------------
# Stability probing
# -----------------------------
@dataclass
class ProbeOutcome:
    mu: float
    converged: bool
    diverged_at: Optional[int] = None


@dataclass
class SyntheticProblem:
    R: np.ndarray
    P: np.ndarray
    W0: np.ndarray
    W_o: np.ndarray = field(init=False)

    def __post_init__(self):
        self.W_o = wiener_solve(self.R, self.P)

    @property
    def lambda_max(self) -> float:
        return sym_eig(self.R).lambda_max


def classify_mu(problem: SyntheticProblem, mu: float, steps: int = 2000, blowup: float = 10.0) -> ProbeOutcome:
    c0 = np.linalg.norm(problem.W0 - problem.W_o)
    w = problem.W0.astype(DTYPE).copy()
    with np.errstate(over="ignore", invalid="ignore"):
        for n in range(1, steps + 1):
            w = w - mu * (problem.R @ w - problem.P)
            err = np.linalg.norm(w - problem.W_o)
            if not np.isfinite(err) or err > blowup * c0:
                return ProbeOutcome(mu, False, n)
    return ProbeOutcome(mu, bool(np.linalg.norm(w - problem.W_o) < c0))


def stability_probe(problem: SyntheticProblem, mus: Sequence[float], steps: int = 2000) -> List[ProbeOutcome]:
    return [classify_mu(problem, mu, steps) for mu in mus]


def stability_boundary(problem: SyntheticProblem, lo: float, hi: float, steps: int = 2000,
                       rel_tol: float = 1e-3) -> float:
    """Bisect for the smallest diverging mu in [lo, hi]; lo must converge and hi diverge."""
    if not classify_mu(problem, lo, steps).converged or classify_mu(problem, hi, steps).diverged_at is None:
        raise ValueError(f"[{lo:g}, {hi:g}] does not bracket the stability boundary")
    while hi - lo > rel_tol * hi:
        mid = 0.5 * (lo + hi)
        if classify_mu(problem, mid, steps).diverged_at is None:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)

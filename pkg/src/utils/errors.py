# src/utils/errors.py

from typing import List, Optional, Sequence, Tuple


class MlnsError(Exception):
    """Base for every error raised by the engine."""


# -----------------------------
# Shapes / geometry
# -----------------------------
class GeometryError(MlnsError, ValueError):
    def __init__(self, message: str, report: Optional[dict] = None):
        self.report = report or {}
        if self.report:
            dims = ", ".join(f"{k}={v}" for k, v in self.report.items())
            message = f"{message} ({dims})"
        super().__init__(message)


class ShapeError(MlnsError, ValueError):
    pass


class PartitionError(MlnsError, ValueError):
    pass


# -----------------------------
# Linear algebra
# -----------------------------
class EigenConvergenceError(MlnsError, RuntimeError):
    def __init__(self, sweeps: int, residual: float):
        self.sweeps = sweeps
        self.residual = residual
        super().__init__(f"Jacobi did not converge after {sweeps} sweeps (max off-diagonal {residual:.3e})")


class SingularMatrixError(MlnsError, ValueError):
    def __init__(self, smallest_eigenvalue: float):
        self.smallest_eigenvalue = smallest_eigenvalue
        super().__init__(f"Matrix is not positive definite (smallest eigenvalue {smallest_eigenvalue:.3e})")


# -----------------------------
# Training
# -----------------------------
class StaleCacheError(MlnsError, RuntimeError):
    pass


class NormStateError(MlnsError, ValueError):
    pass


class DivergenceError(MlnsError, ArithmeticError):
    def __init__(self, layer_index: int, step: Optional[int] = None):
        self.layer_index = layer_index
        self.step = step
        where = f"layer {layer_index}" if layer_index >= 0 else "loss"
        super().__init__(f"Non-finite activation at {where}" + (f", step {step}" if step is not None else ""))


# -----------------------------
# IO / config
# -----------------------------
class IdxFormatError(MlnsError, OSError):
    WRONG_MAGIC = "wrong magic"
    TRUNCATED = "truncated"
    COUNT_MISMATCH = "count mismatch"

    def __init__(self, kind: str, path: str, detail: str = ""):
        self.kind = kind
        self.path = path
        super().__init__(f"{kind}: {path}" + (f" ({detail})" if detail else ""))


class CheckpointError(MlnsError, OSError):
    pass


class ConfigError(MlnsError, ValueError):
    def __init__(self, errors: Sequence[str]):
        self.errors: List[str] = list(errors)
        super().__init__("Invalid configuration:\n" + "\n".join(f"  - {e}" for e in self.errors))


class AggregationError(MlnsError, RuntimeError):
    def __init__(self, missing: Sequence[Tuple[int, float]], context: str = ""):
        self.missing = list(missing)
        listed = ", ".join(f"(seed={s}, mu={m:g})" for s, m in self.missing)
        super().__init__(f"Missing runs{' for ' + context if context else ''}: {listed}")


class MissingAnalysisError(MlnsError, RuntimeError):
    pass

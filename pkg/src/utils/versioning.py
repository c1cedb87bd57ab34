# src/utils/versioning.py

import re
from importlib import metadata
from typing import Optional

SCHEMA_VERSION = 1
PACKAGE_NAME = "mlns-cnn"
FALLBACK_VERSION = "0.1.0"


def code_version() -> str:
    """Installed package version, or the source-tree fallback when running uninstalled."""
    try:
        return metadata.version(PACKAGE_NAME)
    except metadata.PackageNotFoundError:
        return FALLBACK_VERSION


def format_mu(mu: float) -> str:
    return f"{mu:g}"


def make_run_id(variant: str, mu: float, seed: int, alpha: Optional[float] = None) -> str:
    """
    Example:
        BN_Amplify, 0.5, 3        -> BN_Amplify_mu0.5_seed3
        NLMS_L2, 1.0, 0, alpha=1  -> NLMS_L2_mu1_seed0_alpha1
    """
    run_id = f"{variant}_mu{format_mu(mu)}_seed{seed}"
    if alpha is not None:
        run_id += f"_alpha{format_mu(alpha)}"
    return run_id


RUN_ID_PATTERN = re.compile(r"^(?P<variant>.+)_mu(?P<mu>[^_]+)_seed(?P<seed>\d+)(?:_alpha(?P<alpha>[^_]+))?$")


def parse_run_id(run_id: str) -> Optional[dict]:
    m = RUN_ID_PATTERN.match(run_id)
    if not m:
        return None
    return {
        "variant": m.group("variant"),
        "mu": float(m.group("mu")),
        "seed": int(m.group("seed")),
        "alpha": float(m.group("alpha")) if m.group("alpha") is not None else None,
    }

import math
from pathlib import Path

import numpy as np


def split_seed(base_seed: int, run_index: int) -> np.random.SeedSequence:
    """Derive the seed sequence for one replication.

    Run ``i`` of a sweep with base seed ``b`` always uses
    ``SeedSequence(b, spawn_key=(i,))``, so adding runs never perturbs the
    streams of earlier runs.
    """
    if run_index < 0:
        raise ValueError(f"run_index must be nonnegative, got {run_index}")
    return np.random.SeedSequence(base_seed, spawn_key=(run_index,))


def point_seed(parent: np.random.SeedSequence, *values: float) -> np.random.SeedSequence:
    """Child of ``parent`` keyed by nonnegative parameter values, not by position."""
    key = []
    for v in values:
        if v < 0:
            raise ValueError(f"seed key values must be nonnegative, got {v}")
        key.append(int(round(v * 1e9)))
    return np.random.SeedSequence(parent.entropy, spawn_key=(*parent.spawn_key, *key))


def harmonic_number(n: int) -> float:
    """H_n = 1 + 1/2 + ... + 1/n, with H_0 = 0."""
    if n < 0:
        raise ValueError(f"harmonic number undefined for n={n}")
    return math.fsum(1.0 / k for k in range(1, n + 1))


def format_bound(value: float) -> str:
    """Format a bound for terminal output."""
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    if value != 0 and (abs(value) >= 1e5 or abs(value) < 1e-3):
        return f"{value:.4e}"
    return f"{value:.4f}"


def ensure_directory_exists(directory_path: str) -> None:
    """Ensure that a directory exists, create if it doesn't."""
    Path(directory_path).mkdir(parents=True, exist_ok=True)

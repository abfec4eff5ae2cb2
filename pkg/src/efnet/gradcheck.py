"""Finite-difference gradient oracle used by the test suites.

Central differences with a fixed step, run in double precision. The
callable under test takes plain numpy arrays and returns a python float,
so the oracle never touches the tape machinery it is checking.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

FD_STEP = 1e-5


def fd_gradient(f: Callable[..., float], arrays: Sequence[np.ndarray], step: float = FD_STEP):
    """Numeric gradient of ``f`` w.r.t. each array via central differences."""
    grads = []
    for k, a in enumerate(arrays):
        a = np.asarray(a, dtype=np.float64)
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f(*arrays)
            flat[i] = orig - step
            lo = f(*arrays)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
        grads.append(g)
    return grads


def max_rel_error(analytic, numeric, eps: float = 1e-8) -> float:
    """Worst-case relative disagreement between two gradient arrays."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ValueError(f"gradient shapes differ: {a.shape} vs {n.shape}")
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), eps)
    return float(np.max(np.abs(a - n) / denom))

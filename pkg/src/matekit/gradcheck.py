"""Central finite-difference gradient checking.

Used by the test suite and the CLI check commands to validate the
hand-written backward passes. Relative deviation between an analytic
gradient g and its numerical estimate is measured as

    max|g - g_num| / max(max|g|, max|g_num|, floor)

i.e. the infinity-norm error normalized by the larger gradient magnitude,
with a tiny floor so identically-zero gradients compare exactly.
"""

from __future__ import annotations

from typing import Callable

import numpy as np


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray,
                       eps: float = 1e-5,
                       coords: np.ndarray | None = None) -> np.ndarray:
    """Numerical gradient of scalar f at x via central differences.

    coords, when given, is an array of flat indices to probe; the returned
    gradient is zero elsewhere. Probing a subset keeps large checks cheap
    while still exercising every code path.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros(x.size)
    flat = x.ravel().copy()
    idx = np.arange(x.size) if coords is None else np.asarray(coords)
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = f(flat.reshape(x.shape))
        flat[i] = orig - eps
        f_minus = f(flat.reshape(x.shape))
        flat[i] = orig
        grad[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad.reshape(x.shape)


def relative_deviation(analytic: np.ndarray, numeric: np.ndarray,
                       floor: float = 1e-12) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0),
                np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def subset_relative_deviation(analytic: np.ndarray, numeric: np.ndarray,
                              coords: np.ndarray, floor: float = 1e-12) -> float:
    """relative_deviation restricted to the probed coordinates."""
    a = np.asarray(analytic).ravel()[coords]
    n = np.asarray(numeric).ravel()[coords]
    return relative_deviation(a, n, floor)

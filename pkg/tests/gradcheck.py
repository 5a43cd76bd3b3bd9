"""Central finite-difference gradient checking used across the test suite."""
from __future__ import annotations

import numpy as np

STEP = 1e-5


def numerical_grad(f, x: np.ndarray, step: float = STEP) -> np.ndarray:
    """Central-difference gradient of scalar-valued f at x, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm relative error between two gradients."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_grad(f, x: np.ndarray, analytic: np.ndarray, tol: float = 1e-6) -> float:
    """Assert the analytic gradient of f at x matches finite differences."""
    err = rel_error(analytic, numerical_grad(f, x))
    assert err < tol, f"gradient mismatch: rel err {err:.3e} >= {tol:.1e}"
    return err

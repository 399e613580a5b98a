"""Central finite-difference gradients: the independent oracle for autodiff."""

from __future__ import annotations

import numpy as np

from ..errors import NonFiniteError


def fd_gradient(f, point, h=1e-5):
    """Central-difference gradient of a scalar function of a flat vector.

    (f(x + h e_i) - f(x - h e_i)) / (2h), coordinate by coordinate.
    """
    if h <= 0:
        raise ValueError("fd_gradient: step h must be positive")
    x0 = np.asarray(point, dtype=np.float64).ravel()
    g = np.zeros_like(x0)
    for i in range(x0.size):
        x = x0.copy()
        x[i] = x0[i] + h
        fp = float(f(x))
        x[i] = x0[i] - h
        fm = float(f(x))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"fd_gradient: non-finite evaluation at coordinate {i}")
        g[i] = (fp - fm) / (2.0 * h)
    return g


def compare_gradients(analytic, numeric, abs_floor=1e-8):
    """Compare an analytic gradient against a finite-difference reference.

    Coordinates whose reference magnitude is below `abs_floor` are compared
    absolutely; the rest relatively.  Returns
    (max_relative_error, max_absolute_error_on_small_coords, worst_index).
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.shape != n.shape:
        raise ValueError(f"compare_gradients: length mismatch {a.shape} vs {n.shape}")
    worst_rel, worst_abs, worst_i = 0.0, 0.0, -1
    for i in range(a.size):
        err = abs(a[i] - n[i])
        if abs(n[i]) < abs_floor:
            if err > worst_abs:
                worst_abs, worst_i = err, i
        else:
            rel = err / abs(n[i])
            if rel > worst_rel:
                worst_rel, worst_i = rel, i
    return worst_rel, worst_abs, worst_i

"""Input validation helpers shared by the estimators and attack routines."""

import numpy as np


def check_vector(x, dim=None, name="x", allow_nonfinite=False):
    """Return ``x`` as a 1-D float64 array, checking length and finiteness."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {x.shape}")
    if dim is not None and x.shape[0] != dim:
        raise ValueError(f"{name} has length {x.shape[0]}, expected {dim}")
    if not allow_nonfinite and not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


def check_bounds(lb, ub, dim):
    """Broadcast scalar or vector box bounds to length ``dim``."""
    lb = np.broadcast_to(np.asarray(lb, dtype=np.float64), (dim,)).copy()
    ub = np.broadcast_to(np.asarray(ub, dtype=np.float64), (dim,)).copy()
    if np.any(np.isnan(lb)) or np.any(np.isnan(ub)):
        raise ValueError("bounds contain NaN")
    if np.any(lb > ub):
        raise ValueError("lower bound exceeds upper bound")
    return lb, ub


def check_fraction(value, name, closed_upper=False):
    value = float(value)
    ok = 0.0 <= value <= 1.0 if closed_upper else 0.0 <= value < 1.0
    if not ok:
        raise ValueError(f"{name} must lie in [0, 1{']' if closed_upper else ')'}, got {value}")
    return value

"""Input checks shared by the estimators."""
from __future__ import annotations

import numpy as np

from .forward import events_to_array


def check_events_array(X, min_events: int = 0) -> np.ndarray:
    """Coerce events to a finite float array of rows ``[x1, y1, z1, E1, x2, y2, z2, E2]``.

    Accepts such an array or a sequence of event objects.
    """
    if len(X) and hasattr(X[0], "first"):
        X = events_to_array(X)
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != 8:
        raise ValueError(f"expected an (n, 8) event array, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("event array contains non-finite values")
    if len(X) < min_events:
        raise ValueError(f"need at least {min_events} events, got {len(X)}")
    return X


def summed_energies(X, min_events: int = 0) -> np.ndarray:
    """Summed deposits from events, (n, 2) deposit pairs, or a 1-D vector of sums."""
    if len(X) and hasattr(X[0], "first"):
        X = events_to_array(X)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        sums = X
    elif X.ndim == 2 and X.shape[1] == 8:
        sums = X[:, 3] + X[:, 7]
    elif X.ndim == 2 and X.shape[1] == 2:
        sums = X.sum(axis=1)
    else:
        raise ValueError(f"cannot read summed energies from shape {X.shape}")
    if not np.all(np.isfinite(sums)):
        raise ValueError("summed energies contain non-finite values")
    if len(sums) < min_events:
        raise ValueError(f"need at least {min_events} events, got {len(sums)}")
    return sums


def check_kinds(kinds, n: int) -> np.ndarray:
    """Second-interaction kinds as a boolean array (True = absorption)."""
    kinds = np.asarray(kinds)
    if kinds.shape != (n,):
        raise ValueError(f"expected {n} second-interaction kinds, got shape {kinds.shape}")
    if kinds.dtype == bool:
        return kinds
    bad = ~np.isin(kinds, ["A", "CS"])
    if np.any(bad):
        raise ValueError(f"unknown kind {kinds[bad][0]!r}; use 'A' or 'CS'")
    return kinds == "A"


def check_unit_vectors(u, tol: float = 1e-9) -> np.ndarray:
    u = np.atleast_2d(np.asarray(u, dtype=float))
    if u.shape[-1] != 3 or np.any(np.abs(np.linalg.norm(u, axis=-1) - 1.0) > tol):
        raise ValueError("expected unit 3-vectors")
    return u

"""Vectorized inversion of increasing functions."""
from __future__ import annotations

import numpy as np

from .errors import BracketFailure


def bisect_increasing(fn, targets, lo, hi, tol=1e-12, max_iter=200):
    """Solve fn(x) = target elementwise for an increasing ``fn`` on [lo, hi].

    ``lo`` and ``hi`` broadcast against ``targets``.  Raises ``BracketFailure``
    when a target lies outside [fn(lo), fn(hi)].
    """
    targets = np.asarray(targets, dtype=float)
    a = np.broadcast_to(np.asarray(lo, dtype=float), targets.shape).copy()
    b = np.broadcast_to(np.asarray(hi, dtype=float), targets.shape).copy()
    fa = fn(a) - targets
    fb = fn(b) - targets
    if np.any(fa > 0) or np.any(fb < 0):
        raise BracketFailure("target outside the bracket of an increasing map")
    for _ in range(max_iter):
        if np.all(b - a <= tol * np.maximum(1.0, np.abs(a))):
            break
        m = 0.5 * (a + b)
        fm = fn(m) - targets
        right = fm > 0
        b = np.where(right, m, b)
        a = np.where(right, a, m)
    return 0.5 * (a + b)


def newton_polish(fn, dfn, x, targets, steps=1):
    """A few Newton steps on fn(x) = targets from a bracketed start."""
    x = np.asarray(x, dtype=float)
    for _ in range(steps):
        d = dfn(x)
        step = np.where(d > 0, (fn(x) - targets) / np.where(d > 0, d, 1.0), 0.0)
        x = x - step
    return x


def invert_increasing(fn, dfn, targets, lo, hi, tol=1e-12):
    x = bisect_increasing(fn, targets, lo, hi, tol=tol)
    return newton_polish(fn, dfn, x, targets)

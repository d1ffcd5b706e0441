"""Numerical laboratory for quadratic BSDEs: g-expectations, law invariance and
the associated dynamic risk measures in one Brownian dimension."""

__version__ = "0.1.0"

from .errors import QBSDEError  # noqa: E402,F401

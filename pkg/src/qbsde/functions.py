"""Closed-form scalar functions with derivatives.

Catalog entries are written as expression strings (``"0.4 - 0.1*tanh(y)"``)
so that they can be serialized into JSON descriptors and differentiated
symbolically.  Plain Python callables are accepted everywhere an ``Expr``
is, but they cannot be serialized and their derivatives must be supplied.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import sympy

_ALLOWED = {
    name: getattr(sympy, name)
    for name in ("exp", "log", "sqrt", "sin", "cos", "tan", "tanh", "cosh", "sinh",
                 "atan", "erf", "Abs", "sign", "Heaviside", "Min", "Max", "pi", "Piecewise")
}
_ALLOWED["abs"] = sympy.Abs


class Expr:
    """A vectorized function of named variables backed by a sympy expression."""

    def __init__(self, source, variables: Sequence[str] = ("t", "y")):
        self.variables = tuple(variables)
        symbols = {v: sympy.Symbol(v, real=True) for v in self.variables}
        if isinstance(source, sympy.Basic):
            self.sym = source
        else:
            self.sym = sympy.sympify(str(source), locals={**_ALLOWED, **symbols})
        unknown = {s.name for s in self.sym.free_symbols} - set(self.variables)
        if unknown:
            raise ValueError(f"unknown symbols {sorted(unknown)} in {source!r}")
        self._symbols = [symbols[v] for v in self.variables]
        self._fn = sympy.lambdify(self._symbols, self.sym, modules=["numpy", {"Heaviside": _heaviside}])

    @property
    def source(self) -> str:
        return str(self.sym)

    def __call__(self, *args):
        args = [np.asarray(a, dtype=float) for a in args]
        out = np.asarray(self._fn(*args), dtype=float)
        shape = np.broadcast_shapes(*(a.shape for a in args)) if args else ()
        if out.shape != shape:
            out = np.broadcast_to(out, shape).copy()
        return out

    def diff(self, var: str, n: int = 1) -> "Expr":
        return Expr(sympy.diff(self.sym, self._symbols[self.variables.index(var)], n), self.variables)

    def is_constant_in(self, var: str) -> bool:
        return self._symbols[self.variables.index(var)] not in self.sym.free_symbols

    def __repr__(self):
        return f"Expr({self.source!r}, {self.variables})"


def _heaviside(x, h0=0.5):
    return np.heaviside(x, h0)


def as_expr(fn, variables: Sequence[str] = ("t", "y")):
    """Promote strings and numbers to ``Expr``; leave callables alone."""
    if isinstance(fn, Expr) or callable(fn):
        return fn
    return Expr(fn, variables)


def describe(fn) -> str:
    if isinstance(fn, Expr):
        return fn.source
    raise TypeError(f"{fn!r} is a plain callable and has no descriptor")


def _derivative(fn, var, variables, n=1):
    if isinstance(fn, Expr):
        return fn.diff(var, n)
    return None


@dataclass(frozen=True)
class DriftFunction:
    """h(t, y) together with its first two y-derivatives."""

    h: Callable
    h_y: Callable
    h_yy: Callable

    @classmethod
    def from_expr(cls, source) -> "DriftFunction":
        e = Expr(source, ("t", "y"))
        return cls(e, e.diff("y"), e.diff("y", 2))

    @classmethod
    def zero(cls) -> "DriftFunction":
        return cls.from_expr("0")

    def __call__(self, t, y):
        return self.h(t, y)

    @property
    def source(self) -> str:
        return describe(self.h)

    def envelope(self, t_nodes, y_nodes):
        """Sampled H(t) = sup_y |h_y(t, y)| and B = sup |h_yy| on the grid."""
        T, Y = np.meshgrid(np.asarray(t_nodes, float), np.asarray(y_nodes, float), indexing="ij")
        H = np.max(np.abs(self.h_y(T, Y)), axis=1)
        B = float(np.max(np.abs(self.h_yy(T, Y))))
        return H, B

    def is_zero(self) -> bool:
        return isinstance(self.h, Expr) and self.h.sym == 0


class ScalarField:
    """f(t, y) with partial derivatives f_t and f_y (closed form)."""

    def __init__(self, f, f_t=None, f_y=None):
        self.f = as_expr(f, ("t", "y"))
        self.f_t = f_t if f_t is not None else _derivative(self.f, "t", ("t", "y"))
        self.f_y = f_y if f_y is not None else _derivative(self.f, "y", ("t", "y"))
        if self.f_t is None or self.f_y is None:
            raise ValueError("derivatives are required for plain callables")

    def __call__(self, t, y):
        return self.f(t, y)

    def dt(self, t, y):
        return self.f_t(t, y)

    def dy(self, t, y):
        return self.f_y(t, y)

    @property
    def source(self) -> str:
        return describe(self.f)

    def __add__(self, c: float) -> "ScalarField":
        if isinstance(self.f, Expr):
            return ScalarField(Expr(self.f.sym + c, ("t", "y")))
        f, ft, fy = self.f, self.f_t, self.f_y
        return ScalarField(lambda t, y: f(t, y) + c, ft, fy)

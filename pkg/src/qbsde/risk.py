"""Dynamic risk measures on Markov payoffs of a Brownian motion.

Conditional quantities are functions of the state x = W_t and are computed
by Gauss-Hermite quadrature; nesting (for time-consistency gaps) is done
quadrature-on-quadrature, so the gaps carry no statistical noise.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import logsumexp, ndtr

from ._roots import bisect_increasing
from .errors import BracketFailure, DomainMismatch, OutOfDomain, OverflowGuard
from .functions import as_expr
from .stochastic import gauss_hermite

# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


class LossFunction:
    name = "loss"

    def __call__(self, x):
        raise NotImplementedError

    def deriv(self, x):
        raise NotImplementedError

    def check(self, grid=None) -> dict:
        """Sampled check of the loss axioms: increasing, convex, l(0) = 0, inf l < 0."""
        x = np.linspace(-10, 10, 2001) if grid is None else np.asarray(grid, float)
        v = self(x)
        d2 = np.diff(v, 2)
        return {
            "increasing": bool(np.all(self.deriv(x) >= 0)),
            "convex": bool(np.all(d2 >= -1e-12 * np.maximum(1, np.abs(v[1:-1])))),
            "zero_at_zero": bool(abs(float(self(0.0))) <= 1e-15),
            "negative_somewhere": bool(np.min(v) < 0),
        }


@dataclass(frozen=True)
class Linear(LossFunction):
    name = "Linear"

    def __call__(self, x):
        return np.asarray(x, dtype=float)

    def deriv(self, x):
        return np.ones_like(np.asarray(x, dtype=float))


@dataclass(frozen=True)
class Exponential(LossFunction):
    """l(x) = exp(2 beta x) - 1."""

    beta: float
    name = "Exponential"

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")

    def __call__(self, x):
        return np.expm1(2 * self.beta * np.asarray(x, dtype=float))

    def deriv(self, x):
        return 2 * self.beta * np.exp(2 * self.beta * np.asarray(x, dtype=float))


@dataclass(frozen=True)
class PiecewiseConvex(LossFunction):
    """l(x) = e^x - 1 for x >= 0 and x for x < 0 (C^1, convex, not exponential)."""

    name = "PiecewiseConvex"

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return np.where(x >= 0, np.expm1(np.maximum(x, 0.0)), x)

    def deriv(self, x):
        x = np.asarray(x, dtype=float)
        return np.where(x >= 0, np.exp(np.maximum(x, 0.0)), 1.0)


# ---------------------------------------------------------------------------
# payoffs
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MarkovPayoff:
    """X = phi(W_T) (Terminal), phi(W_t1) (Early), phi(W_t2 - W_t1) (Increment),
    or c 1{W_t_obs >= 0} (IndicatorOfBranch); T is the horizon."""

    phi: Callable
    T: float = 1.0
    kind: str = "Terminal"
    t1: float | None = None
    t2: float | None = None
    c: float | None = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in ("Terminal", "Early", "Increment", "IndicatorOfBranch"):
            raise ValueError(f"unknown payoff kind {self.kind!r}")
        if not callable(self.phi) or isinstance(self.phi, str):
            object.__setattr__(self, "phi", as_expr(self.phi, ("x",)))
        if self.kind == "Early" and not (self.t1 is not None and 0 < self.t1 <= self.T):
            raise ValueError("Early needs 0 < t1 <= T")
        if self.kind == "Increment" and not (self.t1 is not None and self.t2 is not None and 0 <= self.t1 < self.t2 <= self.T):
            raise ValueError("Increment needs 0 <= t1 < t2 <= T")
        if self.kind == "IndicatorOfBranch" and not (self.c is not None and self.t1 is not None and 0 < self.t1 <= self.T):
            raise ValueError("IndicatorOfBranch needs c and an observation time t1 in (0, T]")

    @classmethod
    def terminal(cls, phi, T=1.0, name=""):
        return cls(phi, T, "Terminal", name=name)

    @classmethod
    def constant(cls, c, T=1.0):
        c = float(c)
        return cls(lambda x: np.full_like(np.asarray(x, dtype=float), c), T, "Terminal", name=f"const({c:g})")

    @classmethod
    def indicator(cls, c, t_obs, T=1.0, upper=True):
        if upper:
            phi = lambda x: c * (np.asarray(x, dtype=float) >= 0)  # noqa: E731
        else:
            phi = lambda x: c * (np.asarray(x, dtype=float) < 0)  # noqa: E731
        return cls(phi, T, "IndicatorOfBranch", t1=t_obs, c=c, name=f"{c:g}*1{{W_{t_obs:g}{'>=' if upper else '<'}0}}")

    def sup_norm(self, width=8.0) -> float:
        if self.kind == "IndicatorOfBranch":
            return abs(float(self.c))
        x = np.linspace(-width * np.sqrt(self.T), width * np.sqrt(self.T), 4001)
        v = np.abs(np.asarray(self.phi(x), dtype=float))
        if not np.all(np.isfinite(v)):
            raise OverflowGuard("payoff is not finite on the sample grid")
        return float(np.max(v))

    def conditional_law(self, t: float, x=0.0, n_nodes: int = 80):
        """Atoms and weights of the law of X given W_t = x.

        ``x`` may be an array; atoms then have shape x.shape + (n,).
        For Increment payoffs with t1 < t the state is the partial increment W_t - W_t1.
        """
        x = np.asarray(x, dtype=float)
        rule = gauss_hermite(n_nodes)
        if self.kind == "IndicatorOfBranch":
            if t > self.t1 + 1e-12:
                raise OutOfDomain("the branch is already observed: condition on W_t_obs instead")
            if abs(t - self.t1) <= 1e-12:
                p = (x >= 0).astype(float)
            else:
                p = ndtr(x / np.sqrt(self.t1 - t))
            atoms = np.stack(np.broadcast_arrays(self.phi(np.ones_like(x)), self.phi(-np.ones_like(x))), axis=-1)
            return atoms, np.stack([p, 1 - p], axis=-1)
        if self.kind == "Terminal":
            end, start_state = self.T, x
        elif self.kind == "Early":
            if t > self.t1 + 1e-12:
                raise OutOfDomain("Early payoff is already realized at this time")
            end, start_state = self.t1, x
        else:  # Increment
            if t <= self.t1:
                end, start_state = self.t2, np.zeros_like(x)
                t = self.t1
            else:
                end, start_state = self.t2, x
        sd = np.sqrt(max(end - t, 0.0))
        pts = start_state[..., None] + sd * rule.nodes
        atoms = np.asarray(self.phi(pts), dtype=float)
        w = np.broadcast_to(rule.weights, atoms.shape)
        return atoms, w

    def expect(self, t=0.0, x=0.0, n_nodes=80) -> float:
        a, w = self.conditional_law(t, x, n_nodes)
        return np.sum(a * w, axis=-1)


# ---------------------------------------------------------------------------
# risk measures
# ---------------------------------------------------------------------------


class RiskMeasure:
    """rho_{t,T}; ``aggregate`` is the one-period functional on a discrete law."""

    name = "rho"

    def aggregate(self, atoms, weights, t_from: float, t_to: float):
        raise NotImplementedError

    def rho(self, X: MarkovPayoff, t: float = 0.0, x=0.0, n_nodes: int = 80):
        atoms, w = X.conditional_law(t, x, n_nodes)
        return self.aggregate(atoms, w, t, X.T)


@dataclass(frozen=True)
class EntropicRM(RiskMeasure):
    gamma: float
    name = "Entropic"

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")

    def aggregate(self, atoms, weights, t_from=0.0, t_to=1.0):
        atoms = np.asarray(atoms, dtype=float)
        if self.gamma * np.max(np.abs(atoms)) > 700:
            raise OverflowGuard("gamma * |X| exceeds 700")
        w = np.asarray(weights, dtype=float)
        return logsumexp(self.gamma * atoms, b=w, axis=-1) / self.gamma


@dataclass(frozen=True)
class ShortfallRM(RiskMeasure):
    loss: LossFunction
    name = "Shortfall"

    def aggregate(self, atoms, weights, t_from=0.0, t_to=1.0):
        atoms = np.asarray(atoms, dtype=float)
        w = np.asarray(weights, dtype=float)
        lo = np.min(atoms, axis=-1) - 1.0
        hi = np.max(atoms, axis=-1) + 1.0
        neg = lambda m: -np.sum(w * self.loss(atoms - np.asarray(m)[..., None]), axis=-1)  # noqa: E731
        try:
            m = bisect_increasing(neg, np.zeros(lo.shape), lo, hi, tol=1e-10)
        except BracketFailure:
            raise BracketFailure(f"E[l(X - m)] has no sign change on the bracket for {self.loss.name}") from None
        # Newton polish on E[l(X - m)] = 0
        for _ in range(2):
            F = np.sum(w * self.loss(atoms - m[..., None]), axis=-1)
            dF = np.sum(w * self.loss.deriv(atoms - m[..., None]), axis=-1)
            m = np.where(dF > 0, m + F / np.where(dF > 0, dF, 1.0), m)
        return m


@dataclass(frozen=True, eq=False)
class CertaintyEquivalentRM(RiskMeasure):
    """rho_{t,T}(X) = Phi^{-1}(t, E[Phi(T, X) | F_t]) with Phi(s, y) = psi(v(s, y))."""

    flow: object
    psi: object
    name = "CertaintyEquivalent"

    def Phi(self, s, y):
        return self.psi(self.flow.v(s, y))

    def Phi_inv(self, s, u):
        return self.flow.v_inv(s, self.psi.inverse(u))

    def aggregate(self, atoms, weights, t_from=0.0, t_to=1.0):
        atoms = np.asarray(atoms, dtype=float)
        try:
            mean = np.sum(np.asarray(weights) * self.Phi(t_to, atoms), axis=-1)
            return self.Phi_inv(t_from, mean)
        except OutOfDomain as exc:
            raise DomainMismatch(f"Phi domains do not cover the payoff range: {exc}") from None


def entropic_rho(X: MarkovPayoff, gamma: float, t: float = 0.0, x=0.0, n_nodes: int = 80):
    """(1/gamma) log E[exp(gamma X) | W_t = x]."""
    if gamma * X.sup_norm() > 700:
        raise OverflowGuard("gamma * |X|_inf exceeds 700")
    return EntropicRM(gamma).rho(X, t, x, n_nodes)


def shortfall_rho(X: MarkovPayoff, loss: LossFunction, t: float = 0.0, x=0.0, n_nodes: int = 80):
    """The root m of E[l(X - m) | W_t = x] = 0."""
    return ShortfallRM(loss).rho(X, t, x, n_nodes)


def ce_rho(X: MarkovPayoff, flow, psi, t: float = 0.0, x=0.0, n_nodes: int = 80):
    return CertaintyEquivalentRM(flow, psi).rho(X, t, x, n_nodes)


def tc_gap(rm: RiskMeasure, X: MarkovPayoff, s: float, n_nodes: int = 80) -> float:
    """|rho_{0,s}(rho_{s,T}(X)) - rho_{0,T}(X)| by nested quadrature."""
    if not 0 < s < X.T:
        raise ValueError("need 0 < s < T")
    rule = gauss_hermite(n_nodes)
    outer = np.sqrt(s) * rule.nodes
    inner = rm.rho(X, s, outer, n_nodes)
    nested = float(rm.aggregate(inner, rule.weights, 0.0, s))
    flat = float(rm.rho(X, 0.0, 0.0, n_nodes))
    return abs(nested - flat)


# ---------------------------------------------------------------------------
# axiom audit
# ---------------------------------------------------------------------------


def _combine(X: MarkovPayoff, Y: MarkovPayoff, op, name) -> MarkovPayoff:
    if X.kind != "Terminal" or Y.kind != "Terminal" or X.T != Y.T:
        raise ValueError("audit combinations need Terminal payoffs on a common horizon")
    fx, fy = X.phi, Y.phi
    return MarkovPayoff(lambda x: op(np.asarray(fx(x), float), np.asarray(fy(x), float)), X.T, name=name)


def axioms_audit(rm: RiskMeasure, payoffs, constants=(-0.5, 0.5, 1.0), lambdas=(0.25, 0.5, 0.75),
                 tol: float = 1e-8, n_nodes: int = 80) -> dict:
    """Sampled audit of monotonicity, convexity, cash additivity and normalization."""
    payoffs = list(payoffs)
    T = payoffs[0].T
    r = lambda X: float(rm.rho(X, 0.0, 0.0, n_nodes))  # noqa: E731
    values = [r(X) for X in payoffs]

    mono_worst, mono_wit = 0.0, None
    conv_worst, conv_wit = 0.0, None
    strict_wit = None
    for i, X in enumerate(payoffs):
        for j, Y in enumerate(payoffs):
            if j == i:
                continue
            M = _combine(X, Y, np.maximum, f"max({X.name},{Y.name})")
            viol = values[i] - r(M)
            if viol > mono_worst:
                mono_worst, mono_wit = viol, [X.name, M.name]
            if j > i:
                for lam in lambdas:
                    C = _combine(X, Y, lambda a, b, lam=lam: lam * a + (1 - lam) * b, f"{lam}*{X.name}+{1 - lam}*{Y.name}")
                    viol = r(C) - (lam * values[i] + (1 - lam) * values[j])
                    if viol > conv_worst:
                        conv_worst, conv_wit = viol, [X.name, Y.name, lam]
        bumped = _combine(X, MarkovPayoff.terminal(lambda x: 0.1 * (np.asarray(x) > 0), T), np.add, f"{X.name}+0.1*1{{W_T>0}}")
        inc = r(bumped) - values[i]
        if strict_wit is None or inc < strict_wit["increase"]:
            strict_wit = {"payoff": X.name, "bumped": bumped.name, "increase": inc}

    cash_gap, cash_wit = 0.0, None
    for i, X in enumerate(payoffs):
        for c in constants:
            shifted = _combine(X, MarkovPayoff.constant(c, T), np.add, f"{X.name}+{c}")
            gap = abs(r(shifted) - values[i] - c)
            if gap > cash_gap:
                cash_gap, cash_wit = gap, [X.name, c]

    rho0 = r(MarkovPayoff.constant(0.0, T))
    return {
        "monotone": {"pass": bool(mono_worst <= tol), "worst_witness": mono_wit, "gap": mono_worst},
        "convex": {"pass": bool(conv_worst <= tol), "worst_witness": conv_wit, "gap": conv_worst},
        "cash_additive": {"pass": bool(cash_gap <= tol), "worst_witness": cash_wit, "gap": cash_gap},
        "normalized": {"pass": bool(abs(rho0) <= tol), "worst_witness": "X = 0", "gap": abs(rho0)},
        "strict_monotone_witness": {"pass": bool(strict_wit["increase"] > 0), "worst_witness": strict_wit,
                                    "gap": strict_wit["increase"]},
        "cash_additive_gap": cash_gap,
    }


def write_audit_json(report: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True, default=float)


def write_values_csv(rows, path) -> None:
    """Rows of (measure, payoff, t, value)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["measure", "payoff", "t", "value"])
        for row in rows:
            w.writerow([row[0], row[1], repr(float(row[2])), repr(float(row[3]))])

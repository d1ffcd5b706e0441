"""Deterministic changes of variables.

* ``solve_characteristics``: the flow of y' = -h(t, y), its inverse v(t, .)
  and the y-derivatives of v obtained from the variational equations.
* ``psi_from_k``: the increasing map with psi'' = 2 k psi', psi(0) = 0, psi'(0) = 1.
* ``phi_map``: the composite Phi(s, .) = psi(v(s, .)).
* ``pde_residual_f`` / ``construct_f``: the first-order constraint on f for
  drivers h + f|z|^2, checked pointwise or solved along characteristics.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np
from scipy import integrate
from scipy.interpolate import CubicSpline

from ._roots import bisect_increasing
from .errors import DomainMismatch, GridEscape, MonotoneViolation, OutOfDomain, OverflowGuard
from .functions import DriftFunction, as_expr
from .stochastic import TimeGrid

# ---------------------------------------------------------------------------
# cubic Hermite helpers
# ---------------------------------------------------------------------------


def _hermite(x, xk, fk, dk, j):
    """Cubic Hermite interpolant on cell j (vectorized over x and j)."""
    x0, x1 = xk[j], xk[j + 1]
    h = x1 - x0
    s = (x - x0) / h
    s2, s3 = s * s, s * s * s
    return ((2 * s3 - 3 * s2 + 1) * fk[j] + (s3 - 2 * s2 + s) * h * dk[j]
            + (-2 * s3 + 3 * s2) * fk[j + 1] + (s3 - s2) * h * dk[j + 1])


def _hermite_deriv(x, xk, fk, dk, j):
    x0, x1 = xk[j], xk[j + 1]
    h = x1 - x0
    s = (x - x0) / h
    s2 = s * s
    return ((6 * s2 - 6 * s) * fk[j] / h + (3 * s2 - 4 * s + 1) * dk[j]
            + (-6 * s2 + 6 * s) * fk[j + 1] / h + (3 * s2 - 2 * s) * dk[j + 1])


def _cell(xk, x):
    return np.clip(np.searchsorted(xk, x, side="right") - 1, 0, len(xk) - 2)


def _invert_hermite(y, xk, fk, dk, tol=1e-12):
    """Solve H(x) = y for an increasing Hermite interpolant (bisection + Newton)."""
    y = np.asarray(y, dtype=float)
    j = _cell(fk, y)
    fn = lambda x: _hermite(x, xk, fk, dk, j)  # noqa: E731
    x = bisect_increasing(fn, y, xk[j], xk[j + 1], tol=tol)
    d = _hermite_deriv(x, xk, fk, dk, j)
    return x - (fn(x) - y) / d


# ---------------------------------------------------------------------------
# characteristics flow
# ---------------------------------------------------------------------------


def _rk4_flow(h: DriftFunction, nodes, y0, extra=None):
    """Integrate (Phi, xi, eta[, F]) forward in time along y' = -h.

    xi' = -h_y xi,  eta' = -h_yy xi^2 - h_y eta,  F' = h_y F + h_yy / 2.
    """
    def rhs(t, s):
        phi, xi, eta = s[0], s[1], s[2]
        hy, hyy = h.h_y(t, phi), h.h_yy(t, phi)
        out = [-h.h(t, phi), -hy * xi, -hyy * xi * xi - hy * eta]
        if len(s) > 3:
            out.append(hy * s[3] + 0.5 * hyy)
        return np.array(out)

    state = [y0.astype(float), np.ones_like(y0, dtype=float), np.zeros_like(y0, dtype=float)]
    if extra is not None:
        state.append(np.asarray(extra, dtype=float))
    s = np.array(state)
    out = np.empty((len(nodes),) + s.shape)
    out[0] = s
    for i in range(len(nodes) - 1):
        t, dt = nodes[i], nodes[i + 1] - nodes[i]
        k1 = rhs(t, s)
        k2 = rhs(t + dt / 2, s + dt / 2 * k1)
        k3 = rhs(t + dt / 2, s + dt / 2 * k2)
        k4 = rhs(t + dt, s + dt * k3)
        s = s + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        out[i + 1] = s
    return out


@dataclass(frozen=True, eq=False)
class FlowTable:
    """Flow Phi_t of y' = -h(t, y) on a y0 grid and its inverse v(t, .) = Phi_t^{-1}."""

    h: DriftFunction
    t_grid: TimeGrid
    y0: np.ndarray      # characteristic starting points
    Phi: np.ndarray     # (n_t, n_y0)  Phi_t(y0) = v_inv(t, y0)
    Xi: np.ndarray      # d Phi / d y0
    Eta: np.ndarray     # d^2 Phi / d y0^2
    y: np.ndarray       # tabulation grid for v
    v_tab: np.ndarray
    dv_tab: np.ndarray
    ddv_tab: np.ndarray

    @property
    def m1(self) -> float:
        return float(np.min(self.dv_tab))

    @property
    def M1(self) -> float:
        return float(np.max(self.dv_tab))

    @property
    def y_range(self):
        return float(self.y[0]), float(self.y[-1])

    def _slice(self, t):
        i = int(np.argmin(np.abs(self.t_grid.nodes - t)))
        if abs(self.t_grid.nodes[i] - t) <= 1e-6 * self.t_grid.dt:
            return i, None
        j = int(np.clip(np.searchsorted(self.t_grid.nodes, t) - 1, 0, self.t_grid.n_steps - 1))
        return None, j

    def _v_slice(self, i, y):
        y = np.asarray(y, dtype=float)
        lo, hi = self.Phi[i, 0], self.Phi[i, -1]
        if np.any(y < lo - 1e-12) or np.any(y > hi + 1e-12):
            raise OutOfDomain(f"y outside the flow range [{lo:.6g}, {hi:.6g}] at t = {self.t_grid.nodes[i]:.6g}")
        return _invert_hermite(np.clip(y, lo, hi), self.y0, self.Phi[i], self.Xi[i])

    def _at(self, t, y, fn):
        i, j = self._slice(float(t))
        if i is not None:
            return fn(i, y)
        # linear interpolation between the neighbouring slices
        t0, t1 = self.t_grid.nodes[j], self.t_grid.nodes[j + 1]
        w = (t - t0) / (t1 - t0)
        return (1 - w) * fn(j, y) + w * fn(j + 1, y)

    def v(self, t, y):
        return self._at(t, y, self._v_slice)

    def v_inv(self, t, u):
        def f(i, u):
            u = np.asarray(u, dtype=float)
            if np.any(u < self.y0[0] - 1e-12) or np.any(u > self.y0[-1] + 1e-12):
                raise OutOfDomain("argument outside the characteristic seed range")
            return _hermite(u, self.y0, self.Phi[i], self.Xi[i], _cell(self.y0, u))
        return self._at(t, u, f)

    def _xi_eta(self, i, y):
        y0 = self._v_slice(i, y)
        j = _cell(self.y0, y0)
        xi = _hermite(y0, self.y0, self.Xi[i], self.Eta[i], j)
        eta = np.interp(y0, self.y0, self.Eta[i])
        return xi, eta

    def dv(self, t, y):
        def f(i, y):
            xi, _ = self._xi_eta(i, y)
            return 1.0 / xi
        return self._at(t, y, f)

    def ddv(self, t, y):
        def f(i, y):
            xi, eta = self._xi_eta(i, y)
            return -eta / xi**3
        return self._at(t, y, f)

    def dt_v(self, t, y):
        """Partial time derivative of v from centered differences of the v table
        (spline-interpolated in y), independent of the transport identity."""
        splines = self.__dict__.get("_dtv_splines")
        if splines is None:
            nodes = self.t_grid.nodes
            d = np.empty_like(self.v_tab)
            d[1:-1] = (self.v_tab[2:] - self.v_tab[:-2]) / (nodes[2:] - nodes[:-2])[:, None]
            d[0] = (-3 * self.v_tab[0] + 4 * self.v_tab[1] - self.v_tab[2]) / (nodes[2] - nodes[0])
            d[-1] = (3 * self.v_tab[-1] - 4 * self.v_tab[-2] + self.v_tab[-3]) / (nodes[-1] - nodes[-3])
            splines = [CubicSpline(self.y, row) for row in d]
            object.__setattr__(self, "_dtv_splines", splines)

        def f(i, y):
            y = np.asarray(y, dtype=float)
            if np.any(y < self.y[0] - 1e-12) or np.any(y > self.y[-1] + 1e-12):
                raise OutOfDomain("y outside the flow table")
            return splines[i](y)
        return self._at(t, y, f)

    def derivs_at_seed(self, t, y0):
        """(d_y v, d_yy v) at the point y = Phi_t(y0), without inverting the flow."""
        def f(i, y0):
            y0 = np.asarray(y0, dtype=float)
            j = _cell(self.y0, y0)
            xi = _hermite(y0, self.y0, self.Xi[i], self.Eta[i], j)
            eta = np.interp(y0, self.y0, self.Eta[i])
            return np.stack([1.0 / xi, -eta / xi**3])
        out = self._at(t, y0, f)
        return out[0], out[1]

    def transport_residual(self) -> np.ndarray:
        """|d_t v - d_y v * h| on interior table nodes (centered differences in t)."""
        nodes = self.t_grid.nodes
        dtv = (self.v_tab[2:] - self.v_tab[:-2]) / (nodes[2:] - nodes[:-2])[:, None]
        hh = self.h.h(nodes[1:-1, None], self.y[None, :])
        return np.abs(dtv - self.dv_tab[1:-1] * hh)

    def descriptor(self) -> dict:
        return {"h": self.h.source, "t0": self.t_grid.t0, "T": self.t_grid.T, "n_steps": self.t_grid.n_steps,
                "y_min": self.y_range[0], "y_max": self.y_range[1], "n_y": int(len(self.y)),
                "m1": self.m1, "M1": self.M1}


def _default_y_grid(y_range, n_y):
    lo, hi = y_range
    if not lo < hi:
        raise ValueError("y_range must be increasing")
    return np.linspace(lo, hi, int(n_y))


def solve_characteristics(h: DriftFunction, t_grid: TimeGrid, y_range=(-8.0, 8.0), n_y: int = 641,
                          _f0=None) -> FlowTable:
    """Tabulate the inverse flow v(t, y) on ``t_grid`` x linspace(y_range, n_y)."""
    if isinstance(h, str):
        h = DriftFunction.from_expr(h)
    y = _default_y_grid(y_range, n_y)
    nodes = t_grid.nodes
    span = y[-1] - y[0]
    seeds = y.copy()
    for attempt in range(2):
        extra = None if _f0 is None else _f0(seeds)
        sol = _rk4_flow(h, nodes, seeds, extra)
        Phi, Xi, Eta = sol[:, 0], sol[:, 1], sol[:, 2]
        if not np.all(np.isfinite(sol)):
            raise GridEscape("characteristics are not finite")
        if np.any(Xi <= 0):
            raise MonotoneViolation("the flow derivative xi reached a non-positive value")
        covered = np.all(Phi[:, 0] <= y[0]) and np.all(Phi[:, -1] >= y[-1])
        if covered:
            break
        if attempt == 0:  # extend the seed range once
            step = seeds[1] - seeds[0]
            pad = int(np.ceil(span / step))
            seeds = np.concatenate([seeds[0] - step * np.arange(pad, 0, -1), seeds, seeds[-1] + step * np.arange(1, pad + 1)])
    else:
        raise GridEscape("characteristics leave the y table even after extending the seed range")

    v_tab = np.empty((len(nodes), len(y)))
    dv_tab = np.empty_like(v_tab)
    ddv_tab = np.empty_like(v_tab)
    for i in range(len(nodes)):
        v_i = _invert_hermite(y, seeds, Phi[i], Xi[i])
        j = _cell(seeds, v_i)
        xi = _hermite(v_i, seeds, Xi[i], Eta[i], j)
        eta = np.interp(v_i, seeds, Eta[i])
        v_tab[i], dv_tab[i], ddv_tab[i] = v_i, 1.0 / xi, -eta / xi**3
    table = FlowTable(h, t_grid, seeds, Phi, Xi, Eta, y, v_tab, dv_tab, ddv_tab)
    if _f0 is not None:
        return table, sol[:, 3]
    return table


def export_flow_csv(flow: FlowTable, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "y", "v", "dv", "ddv"])
        for i, t in enumerate(flow.t_grid.nodes):
            for j, yy in enumerate(flow.y):
                w.writerow([repr(float(t)), repr(float(yy)), repr(float(flow.v_tab[i, j])),
                            repr(float(flow.dv_tab[i, j])), repr(float(flow.ddv_tab[i, j]))])


def export_descriptor(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj.descriptor(), fh, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# monotone maps
# ---------------------------------------------------------------------------


class MonotoneMap:
    """Strictly increasing scalar map on ``domain`` with an inverse."""

    domain: tuple

    def __call__(self, u):
        raise NotImplementedError

    def deriv(self, u):
        raise NotImplementedError

    def inverse(self, v):
        raise NotImplementedError

    def _check(self, u):
        u = np.asarray(u, dtype=float)
        a, b = self.domain
        if np.any(u < a - 1e-12) or np.any(u > b + 1e-12):
            raise OutOfDomain(f"argument outside [{a:.6g}, {b:.6g}]")
        return np.clip(u, a, b)


class TabulatedMap(MonotoneMap):
    """Cubic Hermite table (values and derivatives at nodes)."""

    def __init__(self, nodes, values, derivs, deriv_fn=None, name="map"):
        self.nodes = np.asarray(nodes, dtype=float)
        self.values = np.asarray(values, dtype=float)
        self.derivs = np.asarray(derivs, dtype=float)
        if np.any(self.derivs <= 0) or np.any(np.diff(self.values) <= 0):
            raise MonotoneViolation(f"{name} is not strictly increasing on its table")
        self.domain = (float(self.nodes[0]), float(self.nodes[-1]))
        self._deriv_fn = deriv_fn
        self.name = name

    def __call__(self, u):
        u = self._check(u)
        return _hermite(u, self.nodes, self.values, self.derivs, _cell(self.nodes, u))

    def deriv(self, u):
        u = self._check(u)
        if self._deriv_fn is not None:
            return self._deriv_fn(u)
        return _hermite_deriv(u, self.nodes, self.values, self.derivs, _cell(self.nodes, u))

    @property
    def range(self):
        return float(self.values[0]), float(self.values[-1])

    def inverse(self, v):
        v = np.asarray(v, dtype=float)
        lo, hi = self.range
        if np.any(v < lo - 1e-12 * max(1, abs(lo))) or np.any(v > hi + 1e-12 * max(1, abs(hi))):
            raise OutOfDomain(f"value outside the range [{lo:.6g}, {hi:.6g}] of {self.name}")
        return _invert_hermite(np.clip(v, lo, hi), self.nodes, self.values, self.derivs)

    def export_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["u", "value", "derivative"])
            for row in zip(self.nodes, self.values, self.derivs):
                w.writerow([repr(float(c)) for c in row])

    def descriptor(self) -> dict:
        return {"name": self.name, "domain": list(self.domain), "n_nodes": int(len(self.nodes)),
                "min_derivative": float(np.min(self.derivs))}


def psi_from_k(k, domain=(-3.0, 3.0), n_nodes: int = 2001, derivative_cap: float = 1e12) -> TabulatedMap:
    """psi with psi'' = 2 k psi', psi(0) = 0, psi'(0) = 1.

    psi'(u) = exp(2 K(u)) with K = int_0^u k (adaptive quadrature per cell),
    psi = int_0^u psi' by 16-point Gauss-Legendre per cell.
    """
    k = as_expr(k, ("y",))
    a, b = float(domain[0]), float(domain[1])
    if not a < 0.0 < b:
        raise DomainMismatch("the psi domain must contain 0 in its interior")
    n_left = max(2, int(round((n_nodes - 1) * (-a) / (b - a))) + 1)
    n_right = max(2, n_nodes - n_left + 1)
    nodes = np.concatenate([np.linspace(a, 0.0, n_left), np.linspace(0.0, b, n_right)[1:]])
    i0 = n_left - 1
    kf = lambda s: float(k(np.asarray(s, dtype=float)))  # noqa: E731

    cellK = np.array([integrate.quad(kf, nodes[j], nodes[j + 1], epsabs=1e-14, epsrel=1e-13)[0]
                      for j in range(len(nodes) - 1)])
    K = np.zeros_like(nodes)
    K[i0 + 1:] = np.cumsum(cellK[i0:])
    K[:i0] = -np.cumsum(cellK[:i0][::-1])[::-1]
    if np.max(2 * K) > np.log(derivative_cap):
        raise OverflowGuard("psi' exceeds the configured cap on this domain")
    dpsi = np.exp(2 * K)

    # psi by Gauss-Legendre in each cell with an inner Gauss-Legendre for K
    x, w = np.polynomial.legendre.leggauss(16)
    lo, hi = nodes[:-1], nodes[1:]
    half = 0.5 * (hi - lo)
    pts = lo[:, None] + half[:, None] * (x[None, :] + 1)                  # (cells, 16)
    inner_half = 0.5 * (pts - lo[:, None])
    inner = lo[:, None, None] + inner_half[:, :, None] * (x[None, None, :] + 1)
    K_pts = K[:-1, None] + np.sum(k(inner) * w, axis=2) * inner_half
    cell_psi = half * np.sum(np.exp(2 * K_pts) * w, axis=1)
    psi = np.zeros_like(nodes)
    psi[i0 + 1:] = np.cumsum(cell_psi[i0:])
    psi[:i0] = -np.cumsum(cell_psi[:i0][::-1])[::-1]

    # psi' between nodes: exp(2 K) with K interpolated using K' = k
    k_nodes = k(nodes)

    def deriv_fn(u):
        j = _cell(nodes, u)
        return np.exp(2 * _hermite(u, nodes, K, k_nodes, j))

    return TabulatedMap(nodes, psi, dpsi, deriv_fn, name="psi")


class CompositeMap(MonotoneMap):
    """Phi(s, .) = psi(v(s, .)) with inverse v_inv(s, psi^{-1}(.))."""

    def __init__(self, flow: FlowTable, psi: TabulatedMap, s: float, domain):
        self.flow, self.psi, self.s = flow, psi, float(s)
        self.domain = (float(domain[0]), float(domain[1]))

    def __call__(self, y):
        y = self._check(y)
        return self.psi(self.flow.v(self.s, y))

    def deriv(self, y):
        y = self._check(y)
        return self.psi.deriv(self.flow.v(self.s, y)) * self.flow.dv(self.s, y)

    def inverse(self, u):
        return self.flow.v_inv(self.s, self.psi.inverse(u))


def phi_map(flow: FlowTable, psi: TabulatedMap, s: float, domain=None) -> CompositeMap:
    """Composite certainty-equivalent map at time s.

    The default domain is the largest interval of the flow table on which
    v(s, .) stays inside the psi domain.
    """
    a, b = psi.domain
    y_lo, y_hi = flow.y_range
    lo = max(y_lo, float(flow.v_inv(s, max(a, flow.y0[0]))))
    hi = min(y_hi, float(flow.v_inv(s, min(b, flow.y0[-1]))))
    if domain is None:
        if not lo < hi:
            raise DomainMismatch("v(s, .) never enters the psi domain")
        domain = (lo, hi)
    elif domain[0] < lo - 1e-12 or domain[1] > hi + 1e-12:
        raise DomainMismatch(f"requested domain {tuple(domain)} exceeds the admissible ({lo:.6g}, {hi:.6g})")
    return CompositeMap(flow, psi, s, domain)


# ---------------------------------------------------------------------------
# the f-constraint
# ---------------------------------------------------------------------------


def pde_residual_f(h: DriftFunction, f, t_nodes, y_nodes) -> np.ndarray:
    """d_t f - h d_y f - d_y h f - d_yy h / 2 on the (t, y) grid."""
    T, Y = np.meshgrid(np.asarray(t_nodes, float), np.asarray(y_nodes, float), indexing="ij")
    return f.dt(T, Y) - h.h(T, Y) * f.dy(T, Y) - h.h_y(T, Y) * f(T, Y) - 0.5 * h.h_yy(T, Y)


class FieldTable:
    """Tabulated f(t, y): cubic splines in y per time slice, centered differences in t."""

    def __init__(self, t_grid: TimeGrid, y: np.ndarray, values: np.ndarray):
        self.t_grid, self.y, self.values = t_grid, np.asarray(y), np.asarray(values)
        self._splines = [CubicSpline(self.y, row) for row in self.values]
        nodes = t_grid.nodes
        dt = np.empty_like(self.values)
        dt[1:-1] = (self.values[2:] - self.values[:-2]) / (nodes[2:] - nodes[:-2])[:, None]
        dt[0] = (-3 * self.values[0] + 4 * self.values[1] - self.values[2]) / (nodes[2] - nodes[0])
        dt[-1] = (3 * self.values[-1] - 4 * self.values[-2] + self.values[-3]) / (nodes[-1] - nodes[-3])
        self._dt_splines = [CubicSpline(self.y, row) for row in dt]

    def _eval(self, splines, t, y, nu=0):
        y = np.asarray(y, dtype=float)
        t = np.asarray(t, dtype=float)
        if t.ndim == 0:
            return self._eval_scalar_t(splines, float(t), y, nu)
        out = np.empty(np.broadcast_shapes(t.shape, y.shape))
        tb, yb = np.broadcast_arrays(t, y)
        for tv in np.unique(tb):
            m = tb == tv
            out[m] = self._eval_scalar_t(splines, float(tv), yb[m], nu)
        return out

    def _eval_scalar_t(self, splines, t, y, nu):
        if np.any(y < self.y[0] - 1e-9) or np.any(y > self.y[-1] + 1e-9):
            raise OutOfDomain("y outside the f table")
        nodes = self.t_grid.nodes
        i = int(np.argmin(np.abs(nodes - t)))
        if abs(nodes[i] - t) <= 1e-6 * self.t_grid.dt:
            return splines[i](y, nu)
        j = int(np.clip(np.searchsorted(nodes, t) - 1, 0, len(nodes) - 2))
        w = (t - nodes[j]) / (nodes[j + 1] - nodes[j])
        return (1 - w) * splines[j](y, nu) + w * splines[j + 1](y, nu)

    def __call__(self, t, y):
        return self._eval(self._splines, t, y)

    def dy(self, t, y):
        return self._eval(self._splines, t, y, 1)

    def dt(self, t, y):
        return self._eval(self._dt_splines, t, y)


def construct_f(h: DriftFunction, f0, t_grid: TimeGrid, y_range=(-8.0, 8.0), n_y: int = 641) -> FieldTable:
    """f solving the constraint with f(0, .) = f0, by integration along characteristics."""
    if isinstance(h, str):
        h = DriftFunction.from_expr(h)
    f0 = as_expr(f0, ("y",))
    flow, F = solve_characteristics(h, t_grid, y_range, n_y, _f0=lambda s: np.broadcast_to(f0(s), s.shape))
    values = np.empty_like(flow.v_tab)
    for i in range(len(t_grid.nodes)):
        values[i] = CubicSpline(flow.y0, F[i])(flow.v_tab[i])
    table = FieldTable(t_grid, flow.y, values)
    table.flow = flow
    return table


def transformed_generator(g, flow: FlowTable):
    """g~(t, u, z~) = -d_t v + d_y v g(t, y, z~/d_y v) - d_yy v (z~/d_y v)^2 / 2 at y = v^{-1}(t, u).

    d_t v comes from centered differences of the flow table, independently of
    the transport identity.
    """
    from .generators import CustomGenerator

    def fn(t, u, zt):
        u, zt = np.broadcast_arrays(np.asarray(u, float), np.asarray(zt, float))
        y = flow.v_inv(t, u)
        dv, ddv = flow.derivs_at_seed(t, u)
        z = zt / dv
        return -flow.dt_v(t, y) + dv * g(t, y, z) - 0.5 * ddv * z * z

    return CustomGenerator(fn, name="Transformed")


def transfer_identity_gap(g, flow: FlowTable, phi, cfg=None, T: float | None = None) -> float:
    """|E^{g~}_{0,T}[phi(W_T)] - v(0, E^g_{0,T}[v^{-1}(T, phi(W_T))])| from two PDE solves."""
    from .pde_solver import SolverConfig, g_expectation, solve_markov

    cfg = cfg or SolverConfig()
    T = flow.t_grid.T if T is None else T
    tg, sg = cfg.grids(0.0, T)
    if tg.n_steps % flow.t_grid.n_steps and flow.t_grid.n_steps % tg.n_steps:
        raise DomainMismatch("solver and flow time grids are not nested")
    gt = transformed_generator(g, flow)
    lhs = g_expectation(solve_markov(gt, phi, tg, sg, cfg.params), 0.0, 0.0)
    pulled = lambda x: flow.v_inv(T, phi(x))  # noqa: E731
    inner = g_expectation(solve_markov(g, pulled, tg, sg, cfg.params), 0.0, 0.0)
    rhs = float(flow.v(0.0, inner))
    return abs(lhs - rhs)

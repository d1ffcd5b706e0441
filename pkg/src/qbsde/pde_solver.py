"""Semilinear backward PDE engine for deterministic Markovian drivers.

For a deterministic generator g the g-expectation of phi(W_T) is u(t, W_t)
where u solves

    u_t + u_xx / 2 + g(t, u, u_x) = 0,    u(T, .) = phi.

Each backward step uses a theta-weighted scheme (Crank-Nicolson for
theta = 1/2) for both the diffusion and the driver.  The implicit driver
term is handled by fixed-point sweeps with frozen coefficients, so every
sweep is a single tridiagonal solve.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_banded

from .errors import Blowup, ConfigError, DomainTooSmall, NonConvergence, OutOfDomain
from .stochastic import TimeGrid

_SURFACE_MAGIC = b"QSRF"
_SURFACE_VERSION = 1
# magic, version, n_steps, n_x, t0, T, x_min, x_max
_SURFACE_HEADER = struct.Struct("<4sIIIdddd")


@dataclass(frozen=True)
class SpatialGrid:
    x_min: float
    x_max: float
    n_x: int

    def __post_init__(self):
        if int(self.n_x) < 3:
            raise ConfigError("n_x must be at least 3")
        if not self.x_min < 0.0 < self.x_max:
            raise ConfigError("the spatial domain must contain 0 in its interior")
        object.__setattr__(self, "n_x", int(self.n_x))

    @classmethod
    def default(cls, T: float, n_x: int = 801, center: float = 0.0, width: float = 6.0) -> "SpatialGrid":
        """Symmetric box of ``width`` standard deviations of W_T around ``center``."""
        half = width * np.sqrt(T)
        return cls(center - half, center + half, n_x)

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.n_x - 1)

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.n_x)


@dataclass(frozen=True)
class SchemeParams:
    theta: float = 0.5
    max_nonlinear_iters: int = 100
    nonlinear_tol: float = 1e-12
    boundary: str = "dirichlet"  # or "neumann"
    boundary_tol: float = 1e-3
    payoff_cap: float = 1e6

    def __post_init__(self):
        if not 0.0 <= self.theta <= 1.0:
            raise ConfigError("theta must lie in [0, 1]")
        if not self.nonlinear_tol > 0:
            raise ConfigError("nonlinear_tol must be positive")
        if self.boundary not in ("dirichlet", "neumann"):
            raise ConfigError(f"unknown boundary {self.boundary!r}")


def spatial_gradient(u: np.ndarray, dx: float) -> np.ndarray:
    """u_x along the last axis: central inside, one-sided second order at the ends."""
    z = np.empty_like(u)
    z[..., 1:-1] = (u[..., 2:] - u[..., :-2]) / (2 * dx)
    z[..., 0] = (-3 * u[..., 0] + 4 * u[..., 1] - u[..., 2]) / (2 * dx)
    z[..., -1] = (3 * u[..., -1] - 4 * u[..., -2] + u[..., -3]) / (2 * dx)
    return z


@dataclass(frozen=True, eq=False)
class ValueSurface:
    time_grid: TimeGrid
    space_grid: SpatialGrid
    u: np.ndarray  # (n_steps + 1, n_x)
    z_surface: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.z_surface is None:
            object.__setattr__(self, "z_surface", spatial_gradient(self.u, self.space_grid.dx))
        self.u.setflags(write=False)
        self.z_surface.setflags(write=False)

    def slice(self, t: float) -> np.ndarray:
        return self.u[self.time_grid.index(t)]

    def value(self, t: float, x) -> np.ndarray:
        return _interp(self, self.u, t, x)

    def gradient(self, t: float, x) -> np.ndarray:
        return _interp(self, self.z_surface, t, x)

    def within_apriori_bound(self, kappa: float, phi_sup: float) -> bool:
        T = self.time_grid.T - self.time_grid.t0
        return bool(np.max(np.abs(self.u)) <= apriori_bound(kappa, T, phi_sup) * (1 + 1e-9))


def apriori_bound(kappa: float, T: float, phi_sup: float) -> float:
    """Comparison bound e^{kappa T}(|phi|_inf + kappa T) on the value surface."""
    return float(np.exp(kappa * T) * (phi_sup + kappa * T))


def _interp(vs: ValueSurface, table: np.ndarray, t: float, x):
    try:
        i = vs.time_grid.index(t)
    except ValueError as exc:
        raise OutOfDomain(str(exc)) from None
    x = np.asarray(x, dtype=float)
    sg = vs.space_grid
    if np.any(x < sg.x_min - 1e-12) or np.any(x > sg.x_max + 1e-12):
        raise OutOfDomain(f"x outside [{sg.x_min}, {sg.x_max}]")
    return np.interp(x, sg.nodes, table[i])


def g_expectation(vs: ValueSurface, t: float, x: float = 0.0) -> float:
    """E^g_{t,T}[phi(W_T)] on {W_t = x} by linear interpolation in x."""
    return float(vs.value(t, x))


def _rk4_backward(fn, y_end, nodes):
    """Integrate -dy/dt = fn(t, y) from nodes[-1] back over ``nodes``; returns y at every node."""
    y = np.array(y_end, dtype=float)
    out = np.empty((len(nodes),) + y.shape)
    out[-1] = y
    for i in range(len(nodes) - 1, 0, -1):
        t1, t0 = nodes[i], nodes[i - 1]
        h = t1 - t0
        k1 = fn(t1, y)
        k2 = fn(t1 - h / 2, y + h / 2 * k1)
        k3 = fn(t1 - h / 2, y + h / 2 * k2)
        k4 = fn(t0, y + h * k3)
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        out[i - 1] = y
    return out


def constant_flow(g, y_end, t_end: float, t_start: float, n_steps: int = 200) -> np.ndarray:
    """g-expectation on [t_start, t_end] of an F_{t_start}-measurable terminal value.

    With Z = 0 the BSDE reduces to the ODE -dY = g(t, Y, 0) dt; for drivers
    with g(t, y, 0) = 0 the value is the terminal value itself.
    """
    y_end = np.asarray(y_end, dtype=float)
    if t_end <= t_start:
        return y_end.copy()
    nodes = np.linspace(t_start, t_end, max(1, int(n_steps)) + 1)
    return _rk4_backward(lambda t, y: g(t, y, np.zeros_like(y)), y_end, nodes)[0]


def _payoff_values(phi, x: np.ndarray, cap: float) -> np.ndarray:
    vals = np.broadcast_to(np.asarray(phi(x), dtype=float), x.shape).copy()
    if not np.all(np.isfinite(vals)):
        raise Blowup("payoff is not finite on the spatial grid")
    if np.max(np.abs(vals)) > cap:
        raise ConfigError(f"payoff sup {np.max(np.abs(vals)):.3g} exceeds the cap {cap:.3g}")
    return vals


def solve_markov(g, phi, tg: TimeGrid, sg: SpatialGrid, sp: SchemeParams = SchemeParams(),
                 terminal: np.ndarray | None = None) -> ValueSurface:
    """Backward solve of u_t + u_xx/2 + g(t, u, u_x) = 0 with u(T) = phi.

    ``terminal`` overrides ``phi`` with explicit node values (used by the
    two-stage constructions).
    """
    if getattr(g, "random", False):
        from .errors import VariantMismatch
        raise VariantMismatch("the PDE engine needs a deterministic generator")
    x = sg.nodes
    dx, nx = sg.dx, sg.n_x
    u_T = _payoff_values(phi, x, sp.payoff_cap) if terminal is None else np.array(terminal, dtype=float)
    dirichlet = sp.boundary == "dirichlet"
    nodes = tg.nodes
    theta = sp.theta

    if dirichlet:
        ends = _rk4_backward(lambda t, y: g(t, y, np.zeros_like(y)), u_T[[0, -1]], nodes)

    def d2(u):
        out = np.empty_like(u)
        out[1:-1] = (u[2:] - 2 * u[1:-1] + u[:-2]) / dx**2
        out[0] = 2 * (u[1] - u[0]) / dx**2
        out[-1] = 2 * (u[-2] - u[-1]) / dx**2
        return out

    def grad(u):
        if dirichlet:
            return spatial_gradient(u, dx)
        z = spatial_gradient(u, dx)
        z[0] = z[-1] = 0.0
        return z

    u = np.empty((tg.n_steps + 1, nx))
    u[-1] = u_T
    cur = u_T.copy()
    bands_cache: dict[float, np.ndarray] = {}

    for n in range(tg.n_steps - 1, -1, -1):
        t_new, dt = nodes[n], nodes[n + 1] - nodes[n]
        ab = bands_cache.get(dt)
        if ab is None:
            r = theta * dt / (2 * dx**2)
            ab = np.zeros((3, nx))
            ab[0, 1:] = -r
            ab[1, :] = 1 + 2 * r
            ab[2, :-1] = -r
            if dirichlet:
                ab[1, 0] = ab[1, -1] = 1.0
                ab[0, 1] = 0.0
                ab[2, -2] = 0.0
            else:
                ab[0, 1] = -2 * r
                ab[2, -2] = -2 * r
            bands_cache[dt] = ab
        # one-sided time arguments: drivers that jump at a grid node are
        # integrated exactly over the cell on either side of the jump
        t_lo, t_hi = t_new + 1e-9 * dt, nodes[n + 1] - 1e-9 * dt
        g_cur = g(t_hi, cur, grad(cur))
        base = cur + (1 - theta) * dt * (0.5 * d2(cur) + g_cur)
        w = cur.copy()
        g_w = g(t_lo, w, grad(w))
        for it in range(sp.max_nonlinear_iters):
            rhs = base + theta * dt * g_w
            if dirichlet:
                rhs[0], rhs[-1] = ends[n]
            w_new = solve_banded((1, 1), ab, rhs)
            if not np.all(np.isfinite(w_new)):
                raise Blowup(f"non-finite values at t = {t_new:.6g}")
            delta = np.max(np.abs(w_new - w))
            w = w_new
            g_w = g(t_lo, w, grad(w))
            if delta <= sp.nonlinear_tol * max(1.0, np.max(np.abs(w))):
                break
        else:
            raise NonConvergence(f"fixed-point sweeps did not converge at t = {t_new:.6g}")
        if not np.all(np.isfinite(g_w)):
            raise Blowup(f"driver is not finite at t = {t_new:.6g}")
        u[n] = cur = w

    _check_boundary(g, u, u_T, tg, sp, dirichlet)
    return ValueSurface(tg, sg, u, spatial_gradient(u, dx))


def _check_boundary(g, u, u_T, tg, sp, dirichlet):
    """Boundary-influence detector: near the box edges the solution must look like
    the g-expectation of a frozen payoff value."""
    k = 1 if dirichlet else 0
    probe = u_T[[k, -1 - k]]
    ref = _rk4_backward(lambda t, y: g(t, y, np.zeros_like(y)), probe, tg.nodes)[0]
    dev = np.max(np.abs(u[0, [k, -1 - k]] - ref))
    if dev > sp.boundary_tol:
        raise DomainTooSmall(f"boundary influence {dev:.3g} exceeds {sp.boundary_tol:.3g}")


# ---------------------------------------------------------------------------
# convenience solves and two-stage payoffs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SolverConfig:
    """Resolution of a PDE solve on [t0, T]: ``n_steps`` per unit time and ``n_x`` nodes."""

    steps_per_unit: int = 400
    n_x: int = 801
    width: float = 6.0
    params: SchemeParams = SchemeParams()

    def refined(self, factor: int = 2) -> "SolverConfig":
        return SolverConfig(self.steps_per_unit * factor, (self.n_x - 1) * factor + 1, self.width, self.params)

    def grids(self, t0: float, T: float, horizon: float | None = None):
        span = T - t0
        tg = TimeGrid(t0, T, max(1, int(round(self.steps_per_unit * span))))
        sg = SpatialGrid.default(horizon if horizon is not None else T, self.n_x, width=self.width)
        return tg, sg


def terminal_value(g, phi, T: float = 1.0, cfg: SolverConfig = SolverConfig(), t: float = 0.0, x: float = 0.0) -> float:
    """E^g_{t,T}[phi(W_T)] on {W_t = x}."""
    tg, sg = cfg.grids(0.0, T)
    return g_expectation(solve_markov(g, phi, tg, sg, cfg.params), t, x)


def early_value(g, phi, t1: float, horizon: float, cfg: SolverConfig = SolverConfig(),
                box_horizon: float | None = None) -> float:
    """E^g_{0,horizon}[phi(W_{t1})] for t1 <= horizon.

    The spatial box is sized by ``box_horizon`` (default ``horizon``).
    """
    tg, sg = cfg.grids(0.0, t1, horizon if box_horizon is None else box_horizon)
    n_tail = max(1, int(round(cfg.steps_per_unit * (horizon - t1))))
    terminal = constant_flow(g, _payoff_values(phi, sg.nodes, cfg.params.payoff_cap), horizon, t1, n_tail)
    vs = solve_markov(g, phi, tg, sg, cfg.params, terminal=terminal)
    return g_expectation(vs, 0.0, 0.0)


def increment_value(g, phi, a: float, b: float, horizon: float, cfg: SolverConfig = SolverConfig(),
                    box_horizon: float | None = None) -> float:
    """E^g_{0,horizon}[phi(W_b - W_a)] for 0 <= a < b <= horizon.

    The increment is independent of F_a, so the value at time a is the
    deterministic number m = E^g_{a,b}[phi(W_b - W_a)] after freezing the
    payoff on [b, horizon]; before a only the constant is propagated.
    """
    if not 0.0 <= a < b <= horizon:
        raise ConfigError("need 0 <= a < b <= horizon")
    # the box is sized by the full horizon so that increments and early payoffs
    # with the same law are solved on identical grids
    box = horizon if box_horizon is None else box_horizon
    m = early_value(_shifted(g, a), phi, b - a, horizon - a, cfg, box_horizon=box)
    n_head = max(1, int(round(cfg.steps_per_unit * a)))
    return float(constant_flow(g, np.array([m]), a, 0.0, n_head)[0]) if a > 0 else m


class _shifted:
    """g(t + s, y, z): restart the clock at s (deterministic drivers only)."""

    def __init__(self, g, s):
        self.g, self.s, self.random = g, float(s), False

    def __call__(self, t, y, z):
        return self.g(np.asarray(t, dtype=float) + self.s, y, z)


def two_stage_value(g, phi, t_split: float, mode: str, T: float = 1.0, cfg: SolverConfig = SolverConfig(),
                    audit: bool = True) -> float:
    """EarlyPayoff: E^g_{0,T}[phi(W_{t_split})]; IncrementPayoff: E^g_{0,T}[phi(W_T - W_{t_split})]."""
    if audit:
        require_zero_drift(g, T)
    if mode == "EarlyPayoff":
        return early_value(g, phi, t_split, T, cfg)
    if mode == "IncrementPayoff":
        return increment_value(g, phi, t_split, T, T, cfg)
    raise ConfigError(f"unknown mode {mode!r}")


def require_zero_drift(g, T: float = 1.0, tol: float = 1e-12):
    """Reject drivers with g(t, y, 0) != 0 on a sample grid."""
    from .errors import AuditFailure
    t, y = np.meshgrid(np.linspace(0, T, 21), np.linspace(-5, 5, 41), indexing="ij")
    h = g(t, y, np.zeros_like(y))
    if np.max(np.abs(h)) > tol:
        raise AuditFailure("generator does not satisfy g(t, y, 0) = 0 on the sampled grid")


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def export_csv(vs: ValueSurface, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x", "u", "z"])
        x = vs.space_grid.nodes
        for i, t in enumerate(vs.time_grid.nodes):
            for j in range(len(x)):
                w.writerow([repr(float(t)), repr(float(x[j])), repr(float(vs.u[i, j])), repr(float(vs.z_surface[i, j]))])


def save_surface(vs: ValueSurface, path) -> None:
    tg, sg = vs.time_grid, vs.space_grid
    header = _SURFACE_HEADER.pack(_SURFACE_MAGIC, _SURFACE_VERSION, tg.n_steps, sg.n_x, tg.t0, tg.T, sg.x_min, sg.x_max)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(vs.u, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(vs.z_surface, dtype="<f8").tobytes())


def load_surface(path) -> ValueSurface:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, n_steps, n_x, t0, T, x_min, x_max = _SURFACE_HEADER.unpack_from(raw)
    if magic != _SURFACE_MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != _SURFACE_VERSION:
        raise ValueError(f"unsupported version {version}")
    size = (n_steps + 1) * n_x
    data = np.frombuffer(raw, dtype="<f8", offset=_SURFACE_HEADER.size).astype(np.float64)
    u = data[:size].reshape(n_steps + 1, n_x)
    z = data[size : 2 * size].reshape(n_steps + 1, n_x)
    return ValueSurface(TimeGrid(t0, T, n_steps), SpatialGrid(x_min, x_max, n_x), u, z)

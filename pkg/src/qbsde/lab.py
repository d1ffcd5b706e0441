"""Law-invariance laboratory.

Equal-in-law payoff pairs, law-invariance gaps (LI / CLLI / MLI) for every
generator family, and pathwise checks of the identities that law-invariant
drivers must satisfy.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import logsumexp

from .errors import ClosedFormUnavailable, ConfigError
from .generators import (CustomGenerator, Entropic, Generator, ItoWentzell, PersistentDrift, PureQuadratic,
                         RandomDriftQuadratic, drift_integral)
from .pde_solver import (SchemeParams, SolverConfig, SpatialGrid, constant_flow, early_value, g_expectation,
                         increment_value, require_zero_drift, solve_markov, terminal_value, _rk4_backward)
from .risk import MarkovPayoff
from .stochastic import (LevelExit, PathBatch, TimeGrid, gauss_hermite, iter_path_blocks, ks_two_sample,
                         sample_paths, stopped_increment)
from .transforms import psi_from_k

# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class IdentityReport:
    test: str
    lhs: np.ndarray
    rhs: np.ndarray
    tolerance: float
    params: dict = field(default_factory=dict)
    seed: int | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.lhs = np.atleast_1d(np.asarray(self.lhs, dtype=float))
        self.rhs = np.broadcast_to(np.asarray(self.rhs, dtype=float), self.lhs.shape)

    @property
    def gaps(self) -> np.ndarray:
        return np.abs(self.lhs - self.rhs)

    @property
    def sup_gap(self) -> float:
        return float(np.max(self.gaps)) if self.gaps.size else 0.0

    @property
    def mean_gap(self) -> float:
        return float(np.mean(self.gaps)) if self.gaps.size else 0.0

    @property
    def verdict(self) -> str:
        return "pass" if self.sup_gap <= self.tolerance else "fail"

    def to_dict(self) -> dict:
        return {"test": self.test, "params": self.params, "seed": self.seed, "sup_gap": self.sup_gap,
                "mean_gap": self.mean_gap, "tolerance": self.tolerance, "verdict": self.verdict,
                "extra": self.extra}

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True, default=_jsonable)

    def write_csv(self, path, columns=("lhs", "rhs")) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", *columns, "gap"])
            for i, (a, b) in enumerate(zip(self.lhs, self.rhs)):
                w.writerow([i, repr(float(a)), repr(float(b)), repr(float(abs(a - b)))])


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    return str(o)


def write_gap_matrix(rows, path) -> None:
    """CSV matrix of (generator, pair, test, gap, tolerance, verdict)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["generator", "pair", "test", "gap", "tolerance", "verdict"])
        for r in rows:
            w.writerow([r[0], r[1], r[2], repr(float(r[3])), repr(float(r[4])), "pass" if r[3] <= r[4] else "fail"])


# ---------------------------------------------------------------------------
# payoff pairs
# ---------------------------------------------------------------------------


def _heaviside(x):
    return np.heaviside(np.asarray(x, dtype=float), 0.5)


@dataclass(frozen=True, eq=False)
class PayoffPair:
    """Two payoffs equal in law by construction.

    Reflection: phi(W_T) and phi(-W_T).
    IncrementShift: phi(W_t1) and phi(W_T - W_{T-t1}).
    BranchSwap: c 1{W_t_obs >= 0} and c 1{W_t_obs < 0}.
    """

    tag: str
    phi: object = None
    T: float = 1.0
    t1: float | None = None
    c: float | None = None

    def __post_init__(self):
        if self.tag not in ("Reflection", "IncrementShift", "BranchSwap"):
            raise ConfigError(f"unknown pair construction {self.tag!r}")
        if self.tag == "IncrementShift" and not (self.t1 and 0 < self.t1 <= self.T):
            raise ConfigError("IncrementShift needs 0 < t1 <= T")
        if self.tag == "BranchSwap" and not (self.c is not None and self.t1 and 0 < self.t1 <= self.T):
            raise ConfigError("BranchSwap needs c and 0 < t_obs <= T")

    @classmethod
    def reflection(cls, phi, T=1.0):
        return cls("Reflection", phi, T)

    @classmethod
    def increment_shift(cls, phi, t1, T=1.0):
        return cls("IncrementShift", phi, T, t1=t1)

    @classmethod
    def branch_swap(cls, c, t_obs, T=1.0):
        return cls("BranchSwap", None, T, t1=t_obs, c=c)

    @property
    def name(self) -> str:
        if self.tag == "BranchSwap":
            return f"BranchSwap(c={self.c:g},t_obs={self.t1:g})"
        fn = getattr(self.phi, "__name__", None) or getattr(self.phi, "source", "phi")
        return f"{self.tag}({fn}{'' if self.t1 is None else f',t1={self.t1:g}'})"

    @property
    def measurable_at(self) -> float:
        return self.t1 if self.tag == "BranchSwap" else (self.t1 if self.tag == "IncrementShift" else self.T)

    def at_horizon(self, T_prime: float) -> "PayoffPair":
        """The same construction with all payoffs F_{T'}-measurable and horizon T'."""
        if self.tag == "Reflection":
            return PayoffPair("Reflection", self.phi, T_prime)
        if self.measurable_at > T_prime + 1e-12:
            raise ConfigError("pair is not measurable at the requested horizon")
        return PayoffPair(self.tag, self.phi, T_prime, self.t1, self.c)

    def payoffs(self):
        """(X, X') as MarkovPayoffs."""
        if self.tag == "Reflection":
            phi = self.phi
            return (MarkovPayoff(phi, self.T, name="phi(W_T)"),
                    MarkovPayoff(lambda x: phi(-np.asarray(x, dtype=float)), self.T, name="phi(-W_T)"))
        if self.tag == "IncrementShift":
            return (MarkovPayoff(self.phi, self.T, "Early", t1=self.t1, name="phi(W_t1)"),
                    MarkovPayoff(self.phi, self.T, "Increment", t1=self.T - self.t1, t2=self.T, name="phi(W_T-W_{T-t1})"))
        return (MarkovPayoff.indicator(self.c, self.t1, self.T, upper=True),
                MarkovPayoff.indicator(self.c, self.t1, self.T, upper=False))

    def sample(self, batch: PathBatch):
        """Pathwise values (X, X') on a simulated batch."""
        W = batch.coordinate(0)
        g = batch.grid
        if self.tag == "Reflection":
            w = W[:, g.index(self.T)]
            return np.asarray(self.phi(w), float), np.asarray(self.phi(-w), float)
        if self.tag == "IncrementShift":
            a = W[:, g.index(self.t1)]
            b = W[:, g.index(self.T)] - W[:, g.index(self.T - self.t1)]
            return np.asarray(self.phi(a), float), np.asarray(self.phi(b), float)
        w = W[:, g.index(self.t1)]
        return self.c * (w >= 0), self.c * (w < 0)


# ---------------------------------------------------------------------------
# engines
# ---------------------------------------------------------------------------


def pde_value(g, X: MarkovPayoff, cfg: SolverConfig = SolverConfig()) -> float:
    """E^g_{0,T}[X] for a deterministic driver via the PDE engine."""
    if X.kind == "Terminal":
        return terminal_value(g, X.phi, X.T, cfg)
    if X.kind == "Early":
        return early_value(g, X.phi, X.t1, X.T, cfg)
    if X.kind == "Increment":
        return increment_value(g, X.phi, X.t1, X.t2, X.T, cfg)
    # H(0) = 1/2 keeps the two branches exact mirrors on a grid with a node at 0
    c = float(X.c)
    upper = float(np.asarray(X.phi(1.0))) == c
    phi = (lambda x: c * _heaviside(x)) if upper else (lambda x: c * _heaviside(-np.asarray(x, dtype=float)))
    return early_value(g, phi, X.t1, X.T, cfg)


def _psi_value(k, atoms, weights) -> np.ndarray:
    """psi^{-1}(E psi(X)) for the driver k(y)|z|^2 from a discrete law."""
    lo = float(min(np.min(atoms), 0.0)) - 0.5
    hi = float(max(np.max(atoms), 0.0)) + 0.5
    psi = _cached_psi(k, round(lo, 1) - 0.1, round(hi, 1) + 0.1)
    return psi.inverse(np.sum(weights * psi(atoms), axis=-1))


@lru_cache(maxsize=64)
def _cached_psi_src(src, lo, hi):
    return psi_from_k(src, (lo, hi), n_nodes=max(2001, int(400 * (hi - lo)) + 1))


def _cached_psi(k, lo, hi):
    src = getattr(k, "source", None)
    if src is None:
        return psi_from_k(k, (lo, hi), n_nodes=max(2001, int(400 * (hi - lo)) + 1))
    return _cached_psi_src(src, lo, hi)


def _entropic_value(beta, atoms, weights) -> np.ndarray:
    gamma = 2 * beta
    if gamma == 0:
        return np.sum(weights * atoms, axis=-1)
    return logsumexp(gamma * np.asarray(atoms), b=weights, axis=-1) / gamma


@dataclass(frozen=True)
class MCConfig:
    n_paths: int = 1_000_000
    n_steps: int = 20
    seed: int = 20240501
    chunk: int = 131072


def _mc_pair_gap(g: RandomDriftQuadratic, pair: PayoffPair, horizon: float, mc: MCConfig) -> dict:
    """Exponential-transform Monte Carlo for h_t + beta|z|^2 drivers.

    E^g_{0,H}[X] = (1/2beta) log E exp(2 beta (X + int_0^H h dt)); the two
    payoffs share paths and the standard error of the difference comes from
    the delta method.
    """
    beta = g.beta
    grid = TimeGrid(0.0, pair.T, mc.n_steps)
    grid.index(horizon)
    s = np.zeros(5)
    n = 0
    for batch in iter_path_blocks(grid, 1, mc.n_paths, mc.seed, mc.chunk):
        x, xp = pair.sample(batch)
        drift = drift_integral(g.drift_spec, batch)["partial"](horizon)
        ea = np.exp(2 * beta * (x + drift))
        eb = np.exp(2 * beta * (xp + drift))
        s += [ea.sum(), eb.sum(), (ea * ea).sum(), (eb * eb).sum(), (ea * eb).sum()]
        n += batch.n_paths
    a, b = s[0] / n, s[1] / n
    va, vb = s[2] / n - a * a, s[3] / n - b * b
    cov = s[4] / n - a * b
    var_d = va / a**2 + vb / b**2 - 2 * cov / (a * b)
    va_x, vb_x = np.log(a) / (2 * beta), np.log(b) / (2 * beta)
    se = np.sqrt(max(var_d, 0.0) / n) / (2 * beta)
    return {"value_X": va_x, "value_Xp": vb_x, "gap": abs(va_x - vb_x), "signed_gap": va_x - vb_x,
            "se": se, "n_paths": n, "seed": mc.seed, "engine": "exponential-transform MC"}


def gap_detail(g: Generator, pair: PayoffPair, horizon: float | None = None, cfg: SolverConfig = SolverConfig(),
               mc: MCConfig = MCConfig()) -> dict:
    """|E^g_{0,H}[X] - E^g_{0,H}[X']| with the engine chosen per generator variant."""
    H = pair.T if horizon is None else horizon
    if isinstance(g, RandomDriftQuadratic):
        return _mc_pair_gap(g, pair, H, mc)
    p = pair.at_horizon(H) if H != pair.T else pair
    X, Xp = p.payoffs()
    if isinstance(g, ItoWentzell):
        # transform identity: the value equals the entropic value of the payoff (r(0) = r(T) = 0)
        vals = [float(_entropic_value(g.beta, *Y.conditional_law(0.0, 0.0, 80))) for Y in (X, Xp)]
        engine = "transform identity + quadrature"
    else:
        vals = [pde_value(g, Y, cfg) for Y in (X, Xp)]
        engine = "PDE"
    return {"value_X": vals[0], "value_Xp": vals[1], "gap": abs(vals[0] - vals[1]),
            "signed_gap": vals[0] - vals[1], "se": 0.0, "engine": engine}


def li_gap(g: Generator, pair: PayoffPair, cfg: SolverConfig = SolverConfig(), mc: MCConfig = MCConfig()) -> float:
    return float(gap_detail(g, pair, None, cfg, mc)["gap"])


def clli_gap(g: Generator, pair: PayoffPair, T_prime: float, cfg: SolverConfig = SolverConfig(),
             mc: MCConfig = MCConfig()) -> float:
    """Gap of E^g_{0,T'} values for payoffs measurable at T'."""
    if pair.measurable_at > T_prime + 1e-12:
        raise ConfigError("payoffs must be F_{T'}-measurable")
    return float(gap_detail(g, pair, T_prime, cfg, mc)["gap"])


def mli_gap(g: Generator, phi, tau: float, tau_prime: float, length: float | None = None,
            cfg: SolverConfig = SolverConfig()) -> float:
    """|E^g_{0,tau}[phi(W_tau - W_{tau-L})] - E^g_{0,tau'}[phi(W_tau' - W_{tau'-L})]|, L = min(tau, tau')."""
    if getattr(g, "random", False):
        raise ConfigError("mli_gap uses deterministic maturities and deterministic drivers")
    require_zero_drift(g, max(tau, tau_prime))
    L = min(tau, tau_prime) if length is None else length
    box = max(tau, tau_prime)
    vals = [increment_value(g, phi, m - L, m, m, cfg, box) if m > L else early_value(g, phi, m, m, cfg, box)
            for m in (tau, tau_prime)]
    return abs(vals[0] - vals[1])


# ---------------------------------------------------------------------------
# representation limit
# ---------------------------------------------------------------------------


def _richardson(eps, values):
    """Polynomial extrapolation of values(eps) to eps = 0 (Neville)."""
    eps = np.asarray(eps, float)
    p = np.array(values, float)
    n = len(eps)
    for k in range(1, n):
        p[: n - k] = (eps[k:] * p[: n - k] - eps[: n - k] * p[1 : n - k + 1]) / (eps[k:] - eps[: n - k])
    return float(p[0])


def _affine_value(g, t, y, z, eps, C, cfg: SolverConfig):
    """E^g_{t, t+eps ^ tau_C}[y + z (W_{t+eps ^ tau_C} - W_t)]."""
    if C is None or not np.isfinite(C):
        if isinstance(g, (Entropic, PureQuadratic)):
            rule = gauss_hermite(80)
            atoms = y + z * np.sqrt(eps) * rule.nodes
            if isinstance(g, Entropic):
                return float(_entropic_value(g.beta, atoms, rule.weights))
            return float(_psi_value(g.k, atoms, rule.weights))
        tg = TimeGrid(t, t + eps, max(4, int(round(cfg.steps_per_unit * eps))))
        sg = SpatialGrid.default(eps, cfg.n_x, width=cfg.width)
        vs = solve_markov(g, lambda x: y + z * x, tg, sg, cfg.params)
        return g_expectation(vs, t, 0.0)
    # clipped problem: absorbing boundary at +-C carries the frozen value
    tg = TimeGrid(t, t + eps, max(4, int(round(cfg.steps_per_unit * eps))))
    sg = SpatialGrid(-C, C, cfg.n_x)
    params = SchemeParams(cfg.params.theta, cfg.params.max_nonlinear_iters, cfg.params.nonlinear_tol,
                          "dirichlet", np.inf, cfg.params.payoff_cap)
    return g_expectation(solve_markov(g, lambda x: y + z * x, tg, sg, params), t, 0.0)


def representation_slope(g: Generator, t: float, y: float, z: float, eps_list, C: float | None = None,
                         tol: float = 1e-3, cfg: SolverConfig = SolverConfig()) -> IdentityReport:
    """Slopes (E^g[y + z dW] - y)/eps and their extrapolated limit against g(t, y, z)."""
    eps_list = [float(e) for e in eps_list]
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ConfigError("eps_list must be decreasing")
    slopes = np.array([(_affine_value(g, t, y, z, e, C, cfg) - y) / e for e in eps_list])
    target = float(g(t, y, z))
    limit = _richardson(eps_list, slopes) if len(eps_list) > 1 else float(slopes[0])
    exact_per_eps = isinstance(g, Entropic) and (C is None or not np.isfinite(C))
    lhs = slopes if exact_per_eps else np.array([limit])
    return IdentityReport("repr-check", lhs, target, tol,
                          params={"t": t, "y": y, "z": z, "eps": eps_list, "C": C},
                          extra={"slopes": slopes.tolist(), "extrapolated": limit, "target": target,
                                 "eps": eps_list})


# ---------------------------------------------------------------------------
# Gateaux derivative
# ---------------------------------------------------------------------------


def gamma_oracle(g: Generator, y: float, T: float = 1.0, n_steps: int = 2000) -> float:
    """Gamma_T = exp(int_0^T d_y g(t, Y^y_t, 0) dt) along -dY = g(t, Y, 0) dt, Y_T = y (Z^y = 0)."""
    nodes = np.linspace(0.0, T, n_steps + 1)

    def rhs(t, s):
        Y = s[0]
        return np.array([g(t, Y, 0.0), -g.dy(t, Y, 0.0)])  # backward: -d(log Gamma) from T

    # integrate (Y, -log Gamma-to-go) backward from T; log Gamma_T = int_0^T dy g dt
    path = _rk4_backward(lambda t, s: rhs(t, s), np.array([y, 0.0]), nodes)
    return float(np.exp(-path[0][1]))


def _payoff_value(g, base: float, eps: float, X: MarkovPayoff, cfg: SolverConfig) -> float:
    """E^g_{0,T}[base + eps X]."""
    if isinstance(g, Entropic):
        atoms, w = X.conditional_law(0.0, 0.0, 80)
        return float(_entropic_value(g.beta, base + eps * atoms, w))
    if isinstance(g, PureQuadratic):
        atoms, w = X.conditional_law(0.0, 0.0, 80)
        return float(_psi_value(g.k, base + eps * atoms, w))
    if X.kind != "Terminal":
        raise ConfigError("the PDE route of gateaux_check needs a Terminal payoff")
    return terminal_value(g, lambda x: base + eps * np.asarray(X.phi(x), float), X.T, cfg)


def gateaux_check(g: Generator, y: float, X: MarkovPayoff, eps_list, tol: float = 1e-3,
                  cfg: SolverConfig = SolverConfig()) -> IdentityReport:
    """Finite-difference derivative of eps -> E^g[y + eps X] against E[Gamma_T X]."""
    eps_list = [float(e) for e in eps_list]
    T = X.T
    base = float(constant_flow(g, np.array([y]), T, 0.0, 2000)[0])
    slopes = np.array([(_payoff_value(g, y, e, X, cfg) - base) / e for e in eps_list])
    gam = gamma_oracle(g, y, T)
    target = gam * float(X.expect(0.0, 0.0, 80))
    limit = _richardson(eps_list, slopes) if len(eps_list) > 1 else float(slopes[0])
    # first-order coefficient of the slope error
    errs = slopes - target
    coef = float(np.polyfit(eps_list, errs, 1)[0]) if len(eps_list) > 1 else float("nan")
    return IdentityReport("gateaux-check", np.array([limit]), target, tol,
                          params={"y": y, "eps": eps_list},
                          extra={"slopes": slopes.tolist(), "gamma_T": gam, "target": target,
                                 "extrapolated": limit, "error_slope": coef})


# ---------------------------------------------------------------------------
# Doleans-exponential identity
# ---------------------------------------------------------------------------


def _stochastic_exponential(theta, dW, dt):
    return np.exp(np.sum(theta * dW, axis=1) - 0.5 * np.sum(theta * theta * dt, axis=1))


def cons1_check(g: Generator, y: float, paths: PathBatch, tol: float = 1e-6) -> IdentityReport:
    """Pathwise Doleans exponential of int d_z g(Y^y, Z^y) dW against the normalized
    exp(-int d_y g ds), at t = 0 for the constant terminal value y."""
    grid = paths.grid
    nodes = grid.nodes
    t = nodes[:-1]
    dt = np.diff(nodes)[None, :]
    dW = paths.increments()[:, :, 0]
    n = paths.n_paths
    extra = {}

    if isinstance(g, CustomGenerator) or not isinstance(g, Generator):
        raise ClosedFormUnavailable(f"no closed form for (Y^y, Z^y) under {getattr(g, 'tag', g)}")

    if isinstance(g, RandomDriftQuadratic):
        spec = g.drift_spec
        beta = g.beta
        total = drift_integral(spec, paths)["total"]
        spread = float(np.max(total) - np.min(total))
        extra["terminal_spread"] = spread
        if spread <= 1e-12:
            # Y~ = Y + int_0^t h is constant, hence Z = 0 on every path
            Z = np.zeros((n, grid.n_steps))
        elif isinstance(spec, PersistentDrift):
            Z = _persistent_z(spec, beta, y, paths)
        else:
            raise ClosedFormUnavailable("random terminal drift without a quadrature representation")
        theta = 2 * beta * Z
        dyg = np.zeros_like(theta)
    elif isinstance(g, ItoWentzell):
        # Y~ = y - r psi_b(W), Z~ = -b, so d_z g~ = b + Z~ = 0
        W = paths.coordinate(0)[:, :-1]
        _, b = g.coeffs(W, t[None, :])
        Zt = -b
        theta = b + Zt
        dyg = np.zeros_like(theta)
    else:
        Y = _rk4_backward(lambda s, v: g(s, v, 0.0), np.array([float(y)]), nodes)[:, 0]
        theta = np.broadcast_to(g.dz(t, Y[:-1], 0.0), (n, grid.n_steps))
        dyg = np.broadcast_to(g.dy(t, Y[:-1], 0.0), (n, grid.n_steps))

    lhs = _stochastic_exponential(theta, dW, dt)
    D = np.exp(-np.sum(dyg * dt, axis=1))
    rhs = D / np.mean(D)
    return IdentityReport("cons1-check", lhs, rhs, tol, params={"y": y, "generator": g.tag,
                          "n_paths": n, "n_steps": grid.n_steps}, seed=paths.seed, extra=extra)


def _persistent_z(spec: PersistentDrift, beta: float, y: float, paths: PathBatch) -> np.ndarray:
    """Z_t = u_x(t, W_t) for t < t_obs, where u(t, x) is the entropic value of
    y + S clamp(W_t_obs), S = T - t_obs; Z = 0 afterwards."""
    grid = paths.grid
    S = grid.T - spec.t_obs
    rule = gauss_hermite(80)
    clamp = spec.clamp
    dclamp = clamp.diff("x")
    gamma = 2 * beta
    W = paths.coordinate(0)
    Z = np.zeros((paths.n_paths, grid.n_steps))
    for i, ti in enumerate(grid.nodes[:-1]):
        if ti >= spec.t_obs - 1e-12:
            break
        pts = W[:, i, None] + np.sqrt(spec.t_obs - ti) * rule.nodes[None, :]
        e = np.exp(gamma * (y + S * clamp(pts)))
        Z[:, i] = np.sum(rule.weights * e * S * dclamp(pts), axis=1) / np.sum(rule.weights * e, axis=1)
    return Z


# ---------------------------------------------------------------------------
# Brownian scaling and quadratic homogeneity
# ---------------------------------------------------------------------------


def brownian_invariance_check(lam: float, O_sign: int, C: float, eps: float, t: float, s: float,
                              n_paths: int = 100_000, seed: int = 7, dt: float = 0.005,
                              mismatched: bool = False, alpha: float = 0.01) -> IdentityReport:
    """KS test of lam O (W_{t+eps ^ tau_C} - W_t) against W_{s + lam^2 eps ^ tau_{lam C}} - W_s.

    The right side is simulated with step lam^2 dt so both sides use the same
    discrete surrogate of the exit time.  ``mismatched`` clips the right side
    at C instead of lam C (negative control).
    """
    if O_sign not in (1, -1):
        raise ConfigError("O_sign must be +1 or -1")
    n_left = int(round((t + eps) / dt))
    left_grid = TimeGrid(0.0, n_left * dt, n_left)
    dt_r = lam * lam * dt
    n_right = int(round((s + lam * lam * eps) / dt_r))
    right_grid = TimeGrid(0.0, n_right * dt_r, n_right)
    left = sample_paths(left_grid, 1, n_paths, seed)
    right = sample_paths(right_grid, 1, n_paths, seed + 1)
    a = lam * O_sign * stopped_increment(left.values, left_grid, left_grid.nodes[int(round(t / dt))], eps, LevelExit(C))
    clip = C if mismatched else lam * C
    s_node = right_grid.nodes[int(round(s / dt_r))]
    b = stopped_increment(right.values, right_grid, s_node, right_grid.T - s_node, LevelExit(clip))
    ks = ks_two_sample(a, b)
    # encode as an identity report: lhs = p-value, target 1, pass iff p > alpha
    rep = IdentityReport("invariance-check", np.array([ks["p_value"]]), 1.0, 1.0 - alpha,
                         params={"lambda": lam, "O": O_sign, "C": C, "eps": eps, "t": t, "s": s,
                                 "n_paths": n_paths, "dt": dt, "mismatched": mismatched},
                         seed=seed, extra=ks)
    return rep


def quadratic_homogeneity_check(g, samples=None, n: int = 1000, seed: int = 3, tol: float = 1e-12) -> IdentityReport:
    """sup |g(t, y, lam O z) - lam^2 g(t, y, z)| over samples (t, y, z, lam, O)."""
    if samples is None:
        # dyadic lambdas keep lam^2 z^2 exact in floating point
        rng = np.random.default_rng(seed)
        samples = np.column_stack([rng.uniform(0, 1, n), rng.uniform(-3, 3, n), rng.uniform(-3, 3, n),
                                   2.0 ** -rng.integers(0, 6, n), rng.choice([-1.0, 1.0], n)])
    samples = np.asarray(samples, float)
    t, y, z, lam, O = samples.T
    lhs = np.asarray(g(t, y, lam * O * z), float)
    rhs = lam**2 * np.asarray(g(t, y, z), float)
    return IdentityReport("quadratic-homogeneity", lhs, rhs, tol, params={"n": len(t)}, seed=seed)


# ---------------------------------------------------------------------------
# Ito-Wentzell construction
# ---------------------------------------------------------------------------


def ito_wentzell_check(g: ItoWentzell, phi, n_steps: int, n_paths: int = 4000, seed: int = 11,
                       base_steps: int | None = None, n_nodes: int = 40) -> dict:
    """Pathwise discrete BSDE identity of the constructed (Y~, Z~).

    Y solves the entropic BSDE (beta = 1/2) with terminal phi(W_T); its value
    function and gradient come from quadrature.  Then Y~ = Y - r psi_b(W) and
    Z~ = Z - b.  Returns the mean of X + sum g~ dt - sum Z~ dW (an estimate of
    Y~_0) and the RMS pathwise residual against Y~_0.
    """
    T = g.T
    base_steps = base_steps or n_steps
    fine = TimeGrid(0.0, T, base_steps)
    paths = sample_paths(fine, 1, n_paths, seed)
    stride = base_steps // n_steps
    if stride * n_steps != base_steps:
        raise ConfigError("n_steps must divide base_steps")
    W = paths.coordinate(0)[:, ::stride]
    nodes = fine.nodes[::stride]
    dt = T / n_steps
    rule = gauss_hermite(n_nodes)
    phi_e = phi if hasattr(phi, "diff") else None
    from .functions import as_expr
    phi_e = as_expr(phi, ("x",)) if phi_e is None else phi_e
    dphi = phi_e.diff("x")
    gamma = 2 * g.beta

    def u_and_ux(ti, x):
        pts = x[:, None] + np.sqrt(T - ti) * rule.nodes[None, :]
        e = np.exp(gamma * phi_e(pts))
        m = np.sum(rule.weights * e, axis=1)
        return np.log(m) / gamma, np.sum(rule.weights * e * dphi(pts), axis=1) / m

    X = phi_e(W[:, -1])
    integral_g = np.zeros(n_paths)
    integral_z = np.zeros(n_paths)
    for i in range(n_steps):
        ti = nodes[i]
        u, ux = u_and_ux(ti, W[:, i])
        a, b = g.coeffs(W[:, i], ti)
        Yt = u - g.r(ti) * g.psi_b(W[:, i])
        Zt = ux - b
        integral_g += g.eval_w(W[:, i], ti, Yt, Zt) * dt
        integral_z += Zt * (W[:, i + 1] - W[:, i])
    est = X + integral_g - integral_z
    ref = gauss_hermite(80)
    y0 = float(np.log(np.sum(ref.weights * np.exp(gamma * phi_e(np.sqrt(T) * ref.nodes)))) / gamma)
    return {"value": float(np.mean(est)), "entropic": y0, "value_gap": abs(float(np.mean(est)) - y0),
            "rms_residual": float(np.sqrt(np.mean((est - y0) ** 2))), "n_steps": n_steps, "seed": seed}

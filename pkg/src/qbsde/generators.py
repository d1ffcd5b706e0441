"""Catalog of BSDE drivers g(t, y, z) in dimension d = 1.

Deterministic drivers are vectorized callables ``g(t, y, z)``; the random
ones (driven by a realized Brownian path) are evaluated with
``eval_pathwise(batch, t, y, z)``, which returns one value per path.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from .errors import EndpointViolation, VariantMismatch
from .functions import DriftFunction, Expr, ScalarField, as_expr, describe
from .stochastic import LevelExit, PathBatch, StoppingTimeSpec, ThresholdBranch, TimeGrid, exit_times


class Generator:
    """Common interface.  Subclasses override ``__call__``, ``dy`` and ``dz``."""

    random = False
    tag = "Generator"

    def __call__(self, t, y, z):
        raise NotImplementedError

    def dy(self, t, y, z):
        raise NotImplementedError

    def dz(self, t, y, z):
        raise NotImplementedError

    def eval(self, t, y, z):
        if self.random:
            raise VariantMismatch(f"{self.tag} is path dependent; use eval_pathwise")
        return self(t, y, z)

    def eval_pathwise(self, batch: PathBatch, t, y, z):
        raise VariantMismatch(f"{self.tag} is deterministic; use eval")

    def drift(self, t, y):
        """h(t, y) = g(t, y, 0)."""
        return self(t, y, np.zeros_like(np.asarray(y, dtype=float)))

    def descriptor(self) -> dict:
        raise TypeError(f"{self.tag} has no JSON descriptor")


@dataclass(frozen=True, eq=False)
class PureQuadratic(Generator):
    """g = k(y)|z|^2."""

    k: Callable
    k_prime: Callable | None = None
    tag = "PureQuadratic"

    def __post_init__(self):
        k = as_expr(self.k, ("y",))
        object.__setattr__(self, "k", k)
        if self.k_prime is None and isinstance(k, Expr):
            object.__setattr__(self, "k_prime", k.diff("y"))

    def __call__(self, t, y, z):
        z = np.asarray(z, dtype=float)
        return self.k(np.asarray(y, dtype=float)) * z * z

    def dy(self, t, y, z):
        z = np.asarray(z, dtype=float)
        if self.k_prime is None:
            y = np.asarray(y, dtype=float)
            kp = (self.k(y + 1e-6) - self.k(y - 1e-6)) / 2e-6
        else:
            kp = self.k_prime(np.asarray(y, dtype=float))
        return kp * z * z

    def dz(self, t, y, z):
        return 2.0 * self.k(np.asarray(y, dtype=float)) * np.asarray(z, dtype=float)

    def descriptor(self):
        return {"type": self.tag, "k": describe(self.k)}


@dataclass(frozen=True, eq=False)
class Entropic(Generator):
    """g = beta|z|^2; the entropic risk measure with gamma = 2 beta."""

    beta: float
    tag = "Entropic"

    def __call__(self, t, y, z):
        z = np.asarray(z, dtype=float)
        return self.beta * z * z + 0.0 * np.asarray(y, dtype=float)

    def dy(self, t, y, z):
        return np.zeros(np.broadcast_shapes(np.shape(y), np.shape(z)))

    def dz(self, t, y, z):
        return 2.0 * self.beta * np.asarray(z, dtype=float) + 0.0 * np.asarray(y, dtype=float)

    @property
    def gamma(self) -> float:
        return 2.0 * self.beta

    def descriptor(self):
        return {"type": self.tag, "beta": self.beta}


@dataclass(frozen=True, eq=False)
class TimeVaryingQuadratic(Generator):
    """g = k(t)|z|^2 (not of the k(y)|z|^2 form when k depends on t)."""

    k: Callable
    tag = "TimeVaryingQuadratic"

    def __post_init__(self):
        object.__setattr__(self, "k", as_expr(self.k, ("t",)))

    def __call__(self, t, y, z):
        z = np.asarray(z, dtype=float)
        return self.k(np.asarray(t, dtype=float)) * z * z + 0.0 * np.asarray(y, dtype=float)

    def dy(self, t, y, z):
        return np.zeros(np.broadcast_shapes(np.shape(t), np.shape(y), np.shape(z)))

    def dz(self, t, y, z):
        return 2.0 * self.k(np.asarray(t, dtype=float)) * np.asarray(z, dtype=float) + 0.0 * np.asarray(y, dtype=float)

    def descriptor(self):
        return {"type": self.tag, "k": describe(self.k)}


@dataclass(frozen=True, eq=False)
class DriftQuadratic(Generator):
    """g = h(t, y) + f(t, y)|z|^2."""

    h: DriftFunction
    f: object  # ScalarField or FieldTable: f(t, y), .dy(t, y)
    tag = "DriftQuadratic"

    def __post_init__(self):
        if isinstance(self.h, str):
            object.__setattr__(self, "h", DriftFunction.from_expr(self.h))
        if isinstance(self.f, (str, int, float)):
            object.__setattr__(self, "f", ScalarField(str(self.f)))

    def __call__(self, t, y, z):
        z = np.asarray(z, dtype=float)
        return self.h.h(t, y) + self.f(t, y) * z * z

    def dy(self, t, y, z):
        z = np.asarray(z, dtype=float)
        return self.h.h_y(t, y) + self.f.dy(t, y) * z * z

    def dz(self, t, y, z):
        return 2.0 * self.f(t, y) * np.asarray(z, dtype=float)

    def drift(self, t, y):
        return self.h.h(t, y)

    def perturbed(self, df: float) -> "DriftQuadratic":
        """Same drift with f replaced by f + df (breaks the f-constraint when df != 0)."""
        return DriftQuadratic(self.h, _ShiftedField(self.f, df))

    def descriptor(self):
        return {"type": self.tag, "h": self.h.source, "f": describe(getattr(self.f, "f", self.f))}


class _ShiftedField:
    def __init__(self, base, c):
        self.base, self.c = base, float(c)

    def __call__(self, t, y):
        return self.base(t, y) + self.c

    def dt(self, t, y):
        return self.base.dt(t, y)

    def dy(self, t, y):
        return self.base.dy(t, y)


@dataclass(frozen=True, eq=False)
class CustomGenerator(Generator):
    """Arbitrary deterministic driver (negative controls, transformed drivers)."""

    fn: Callable
    fn_dy: Callable | None = None
    fn_dz: Callable | None = None
    name: str = "Custom"

    @property
    def tag(self):
        return self.name

    def __call__(self, t, y, z):
        return self.fn(t, np.asarray(y, dtype=float), np.asarray(z, dtype=float))

    def dy(self, t, y, z):
        if self.fn_dy is not None:
            return self.fn_dy(t, y, z)
        y = np.asarray(y, dtype=float)
        return (self(t, y + 1e-6, z) - self(t, y - 1e-6, z)) / 2e-6

    def dz(self, t, y, z):
        if self.fn_dz is not None:
            return self.fn_dz(t, y, z)
        z = np.asarray(z, dtype=float)
        return (self(t, y, z + 1e-6) - self(t, y, z - 1e-6)) / 2e-6


# ---------------------------------------------------------------------------
# random drifts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IndicatorWindow:
    """h_t = 1 on [tau, tau + eps_w]; window edges snap to grid nodes."""

    tau: StoppingTimeSpec
    eps_w: float
    tag = "IndicatorWindow"

    def cell_values(self, batch: PathBatch) -> np.ndarray:
        grid = batch.grid
        n_w = int(round(self.eps_w / grid.dt))
        tau = exit_times(batch.coordinate(0), grid, grid.t0, self.tau)
        if isinstance(self.tau, LevelExit):
            tau = np.minimum(tau, grid.T - n_w * grid.dt)
        i0 = np.searchsorted(grid.nodes, tau - 1e-9 * grid.dt)
        cells = np.arange(grid.n_steps)[None, :]
        return ((cells >= i0[:, None]) & (cells < i0[:, None] + n_w)).astype(float)

    def descriptor(self):
        tau = self.tau
        d = {"type": type(tau).__name__, **{k: getattr(tau, k) for k in tau.__dataclass_fields__}}
        return {"type": self.tag, "tau": d, "eps_w": self.eps_w}


@dataclass(frozen=True)
class SignedWindow:
    """h_t = clamp(W_{t_obs}) s(t) with s = 0 before t_obs and zero total integral."""

    t_obs: float
    shape: Callable = None
    clamp: Callable = "tanh(x)"
    T: float = 1.0
    tag = "SignedWindow"

    def __post_init__(self):
        shape = self.shape
        if shape is None:
            shape = f"Heaviside(t - {self.t_obs})*sin(2*pi*(t - {self.t_obs})/({self.T} - {self.t_obs}))"
        object.__setattr__(self, "shape", as_expr(shape, ("t",)))
        object.__setattr__(self, "clamp", as_expr(self.clamp, ("x",)))

    def shape_cells(self, grid: TimeGrid) -> np.ndarray:
        # cell averages by 8-point Gauss-Legendre so that sum(s_i dt) equals the integral
        x, w = np.polynomial.legendre.leggauss(8)
        a, b = grid.nodes[:-1], grid.nodes[1:]
        pts = 0.5 * (a + b)[:, None] + 0.5 * (b - a)[:, None] * x[None, :]
        s = 0.5 * np.sum(self.shape(pts) * w, axis=1)
        s[b <= self.t_obs + 1e-12] = 0.0
        return s

    def cell_values(self, batch: PathBatch) -> np.ndarray:
        c = self.clamp(batch.at(self.t_obs))
        return c[:, None] * self.shape_cells(batch.grid)[None, :]

    def descriptor(self):
        return {"type": self.tag, "t_obs": self.t_obs, "shape": describe(self.shape),
                "clamp": describe(self.clamp), "T": self.T}


@dataclass(frozen=True)
class PersistentDrift:
    """h_t = clamp(W_{t_obs}) 1{t >= t_obs}: random total drift, a non-LI control."""

    t_obs: float
    clamp: Callable = "tanh(x)"
    tag = "PersistentDrift"

    def __post_init__(self):
        object.__setattr__(self, "clamp", as_expr(self.clamp, ("x",)))

    def cell_values(self, batch: PathBatch) -> np.ndarray:
        grid = batch.grid
        on = (grid.nodes[:-1] >= self.t_obs - 1e-12).astype(float)
        return self.clamp(batch.at(self.t_obs))[:, None] * on[None, :]

    def descriptor(self):
        return {"type": self.tag, "t_obs": self.t_obs, "clamp": describe(self.clamp)}


DriftProcessSpec = Union[IndicatorWindow, SignedWindow, PersistentDrift]


def drift_integral(spec: DriftProcessSpec, batch: PathBatch):
    """Pathwise total drift and the map T' -> int_0^T' h dt (T' a grid node)."""
    cells = spec.cell_values(batch)
    dts = np.diff(batch.grid.nodes)
    cumulative = np.concatenate([np.zeros((cells.shape[0], 1)), np.cumsum(cells * dts, axis=1)], axis=1)

    def partial(t_prime: float) -> np.ndarray:
        return cumulative[:, batch.grid.index(t_prime)]

    return {"total": cumulative[:, -1], "partial": partial}


def _cell_index(grid: TimeGrid, t) -> np.ndarray:
    i = np.searchsorted(grid.nodes, np.asarray(t, dtype=float) + 1e-12, side="right") - 1
    return np.clip(i, 0, grid.n_steps - 1)


@dataclass(frozen=True, eq=False)
class RandomDriftQuadratic(Generator):
    """g = h_t(omega) + beta|z|^2 with h from a DriftProcessSpec."""

    drift_spec: DriftProcessSpec
    beta: float
    random = True
    tag = "RandomDriftQuadratic"

    def eval_pathwise(self, batch: PathBatch, t, y, z):
        h = self.drift_spec.cell_values(batch)[:, _cell_index(batch.grid, t)]
        z = np.asarray(z, dtype=float)
        return h + self.beta * z * z + 0.0 * np.asarray(y, dtype=float)

    def dy_pathwise(self, batch, t, y, z):
        return np.zeros(batch.n_paths)

    def dz_pathwise(self, batch, t, y, z):
        return 2.0 * self.beta * np.asarray(z, dtype=float) * np.ones(batch.n_paths)

    def descriptor(self):
        return {"type": self.tag, "drift": self.drift_spec.descriptor(), "beta": self.beta}


def ito_wentzell_coeffs(r, psi_b, path, t, r_prime=None):
    """(a_t, b_t) for the random field v(t, y) = y - r(t) psi_b(W^1_t).

    ``path`` is a PathBatch or an array of W^1_t values.
    """
    r = as_expr(r, ("t",))
    psi_b = as_expr(psi_b, ("x",))
    if r_prime is None:
        r_prime = r.diff("t")
    w = path.at(t) if isinstance(path, PathBatch) else np.asarray(path, dtype=float)
    t = np.asarray(t, dtype=float)
    if isinstance(psi_b, Expr):
        d1, d2 = psi_b.diff("x"), psi_b.diff("x", 2)
    else:
        raise TypeError("psi_b must be an expression to differentiate it")
    a = r_prime(t) * psi_b(w) + 0.5 * r(t) * d2(w)
    b = r(t) * d1(w)
    return a, b


@dataclass(frozen=True, eq=False)
class ItoWentzell(Generator):
    """g~ = a_t + |b_t|^2/2 + b_t z + |z|^2/2, LI by construction when r(0) = r(T) = 0."""

    r: Callable
    psi_b: Callable
    T: float = 1.0
    beta: float = 0.5
    random = True
    tag = "ItoWentzell"

    def __post_init__(self):
        r = as_expr(self.r, ("t",))
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "psi_b", as_expr(self.psi_b, ("x",)))
        ends = np.abs([float(r(0.0)), float(r(self.T))])
        if np.any(ends > 1e-12):
            raise EndpointViolation(f"r(0), r(T) = {ends.tolist()} must vanish")

    def coeffs(self, w, t):
        return ito_wentzell_coeffs(self.r, self.psi_b, w, t)

    def eval_w(self, w, t, y, z):
        a, b = self.coeffs(w, t)
        z = np.asarray(z, dtype=float)
        return a + 0.5 * b * b + b * z + 0.5 * z * z + 0.0 * np.asarray(y, dtype=float)

    def eval_pathwise(self, batch: PathBatch, t, y, z):
        w = batch.coordinate(0)[:, batch.grid.snap(float(t))]
        return self.eval_w(w, t, y, z)

    def descriptor(self):
        return {"type": self.tag, "r": describe(self.r), "psi_b": describe(self.psi_b), "T": self.T}


# ---------------------------------------------------------------------------
# audit
# ---------------------------------------------------------------------------


@dataclass
class AuditReport:
    kappa_hat: float
    ell_profile: np.ndarray
    ell_levels: np.ndarray
    a4_margin: float
    a4_star_margin: float
    a5: bool
    dyf_sign: bool
    zero_drift: bool
    time_dependent: bool
    quadratic_form: bool
    superquadratic: bool
    flags: list = field(default_factory=list)
    note: str = "sampled audit: failures are certain, passes are evidence only"

    @property
    def a1_a4_pass(self) -> bool:
        return (not self.superquadratic) and self.a4_margin >= -1e-12

    def to_dict(self) -> dict:
        return {
            "kappa_hat": self.kappa_hat,
            "ell_levels": self.ell_levels.tolist(),
            "ell_profile": self.ell_profile.tolist(),
            "A4_margin": self.a4_margin,
            "A4_star_margin": self.a4_star_margin,
            "A5": self.a5,
            "dyf_sign": self.dyf_sign,
            "zero_drift": self.zero_drift,
            "time_dependent": self.time_dependent,
            "k_y_z2_form": self.quadratic_form,
            "superquadratic": self.superquadratic,
            "flags": list(self.flags),
            "note": self.note,
        }


def audit_assumptions(g: Generator, t_nodes=None, y_nodes=None, z_nodes=None, eps: float = 0.05,
                      batch: PathBatch | None = None) -> AuditReport:
    """Empirical constants and pass/fail flags for (A1)-(A5) on a sample box."""
    t_nodes = np.linspace(0.0, 1.0, 11) if t_nodes is None else np.asarray(t_nodes, float)
    y_nodes = np.linspace(-3.0, 3.0, 25) if y_nodes is None else np.asarray(y_nodes, float)
    z_nodes = np.linspace(-4.0, 4.0, 33) if z_nodes is None else np.asarray(z_nodes, float)
    T, Y, Z = np.meshgrid(t_nodes, y_nodes, z_nodes, indexing="ij")

    if g.random:
        if batch is None:
            from .stochastic import sample_paths
            batch = sample_paths(TimeGrid(float(t_nodes[0]), float(t_nodes[-1]), 40), 1, 256, seed=0)

        def G(t, y, z):
            out = np.empty((batch.n_paths,) + np.shape(y))
            for idx in np.ndindex(np.shape(y)):
                tt = t[idx] if np.ndim(t) else t
                out[(slice(None),) + idx] = g.eval_pathwise(batch, tt, y[idx], z[idx])
            return out

        vals = G(T, Y, Z)
        vals0 = G(T, Y, np.zeros_like(Z))
        dzv = (G(T, Y, Z + 1e-6) - G(T, Y, Z - 1e-6)) / 2e-6
        dyv = (G(T, Y + 1e-6, Z) - G(T, Y - 1e-6, Z)) / 2e-6
        red = lambda a: np.max(np.abs(a), axis=0)  # noqa: E731
        vals, vals0, dzv, dyv = (red(v) * np.sign(np.mean(v, axis=0)) for v in (vals, vals0, dzv, dyv))
    else:
        vals = g(T, Y, Z)
        vals0 = g(T, Y, np.zeros_like(Z))
        dzv = g.dz(T, Y, Z)
        dyv = g.dy(T, Y, Z)

    flags = []
    h0 = vals0[:, :, 0]
    kappa_hat = float(max(np.max(np.abs(h0[:, np.argmin(np.abs(y_nodes))])),
                          np.max(np.abs(np.diff(h0, axis=1) / np.diff(y_nodes)[None, :])) if len(y_nodes) > 1 else 0.0))
    zero_drift = bool(np.max(np.abs(h0)) <= 1e-12)

    nz = np.abs(Z) > 1e-12
    quad_ratio = np.where(nz, np.abs(vals - vals0) / np.where(nz, Z * Z, 1.0), 0.0)
    grad_ratio = np.abs(dzv) / (1.0 + np.abs(Z))
    levels = np.unique(np.abs(y_nodes))
    prof = []
    for r in levels:
        m = np.abs(Y) <= r + 1e-12
        prof.append(max(np.max(quad_ratio[m]), np.max(grad_ratio[m])))
    prof = np.maximum.accumulate(np.array(prof))

    zmax = np.max(np.abs(z_nodes))
    outer = np.abs(Z) >= 0.99 * zmax
    mid = (np.abs(Z) >= 0.45 * zmax) & (np.abs(Z) <= 0.55 * zmax)
    superquadratic = bool(np.max(quad_ratio[outer]) > 1.5 * np.max(quad_ratio[mid]) + 1e-12)
    if superquadratic:
        flags.append("growth in z exceeds quadratic on the sampled box")

    h_eps = np.maximum(np.max(dyv[:, :, np.argmin(np.abs(z_nodes))], axis=1), 0.0)[:, None, None]
    a4_margin = float(np.min(h_eps + eps * Z * Z - dyv))
    h_eps_abs = np.max(np.abs(dyv[:, :, np.argmin(np.abs(z_nodes))]), axis=1)[:, None, None]
    a4_star_margin = float(np.min(h_eps_abs + eps * Z * Z - np.abs(dyv)))

    y_indep = bool(np.max(np.abs(np.diff(vals, axis=1))) <= 1e-12) if len(y_nodes) > 1 else True
    dz_zero_off_origin = np.any(np.abs(dzv[nz]) <= 1e-12)
    a5 = bool(y_indep and not dz_zero_off_origin and np.max(np.abs(dzv[~nz])) <= 1e-9)

    # f(t, y) = g(t, y, 1) - g(t, y, 0) for h + f|z|^2 families
    one = np.argmin(np.abs(np.abs(z_nodes) - 1.0))
    coeff = (vals[:, :, one] - vals0[:, :, one]) / max(z_nodes[one] ** 2, 1e-300)
    dyf_sign = bool(np.all(np.diff(coeff, axis=1) <= 1e-12))
    if not dyf_sign:
        flags.append("d_y f > 0 somewhere: outside the (A4) regime (flagged, not rejected)")

    time_dependent = bool(np.max(np.abs(vals[-1] - vals[0])) > 1e-12) if len(t_nodes) > 1 else False
    homog = np.allclose(vals - vals0, coeff[:, :, None] * Z * Z, atol=1e-10, rtol=1e-10)
    quadratic_form = bool(zero_drift and not time_dependent and homog and not g.random)
    if not quadratic_form:
        flags.append("not of the k(y)|z|^2 form")
    if g.random:
        flags.append("random generator: audited on a sampled path batch")
    return AuditReport(kappa_hat, prof, levels, a4_margin, a4_star_margin, a5, dyf_sign,
                       zero_drift, time_dependent, quadratic_form, superquadratic, flags)


# ---------------------------------------------------------------------------
# descriptors
# ---------------------------------------------------------------------------


def _stopping_from(d):
    kind = d["type"]
    args = {k: v for k, v in d.items() if k != "type"}
    return {"LevelExit": LevelExit, "ThresholdBranch": ThresholdBranch}[kind](**args)


def drift_spec_from_descriptor(d: dict) -> DriftProcessSpec:
    kind = d["type"]
    if kind == "IndicatorWindow":
        return IndicatorWindow(_stopping_from(d["tau"]), float(d["eps_w"]))
    if kind == "SignedWindow":
        return SignedWindow(float(d["t_obs"]), d.get("shape"), d.get("clamp", "tanh(x)"), float(d.get("T", 1.0)))
    if kind == "PersistentDrift":
        return PersistentDrift(float(d["t_obs"]), d.get("clamp", "tanh(x)"))
    raise ValueError(f"unknown drift process {kind!r}")


def from_descriptor(d: dict) -> Generator:
    """Resolve a JSON descriptor ``{"type": ..., params}`` to a generator."""
    kind = d.get("type")
    if kind == "Entropic":
        return Entropic(float(d["beta"]))
    if kind == "PureQuadratic":
        return PureQuadratic(str(d["k"]))
    if kind == "TimeVaryingQuadratic":
        return TimeVaryingQuadratic(str(d["k"]))
    if kind == "DriftQuadratic":
        if "f" in d:
            return DriftQuadratic(DriftFunction.from_expr(d["h"]), ScalarField(str(d["f"])))
        from .transforms import construct_f  # f built along characteristics from f0
        h = DriftFunction.from_expr(d["h"])
        grid = TimeGrid(0.0, float(d.get("T", 1.0)), int(d.get("n_steps", 400)))
        f = construct_f(h, Expr(str(d["f0"]), ("y",)), grid, tuple(d.get("y_range", (-12.0, 12.0))))
        return DriftQuadratic(h, f)
    if kind == "RandomDriftQuadratic":
        return RandomDriftQuadratic(drift_spec_from_descriptor(d["drift"]), float(d["beta"]))
    if kind == "ItoWentzell":
        return ItoWentzell(str(d["r"]), str(d["psi_b"]), float(d.get("T", 1.0)))
    raise ValueError(f"unknown generator type {kind!r}")

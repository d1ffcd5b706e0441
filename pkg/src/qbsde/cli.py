"""Batch front door: JSON experiment configs in, CSV/JSON reports out.

Usage::

    qbsde --config experiment.json [--seed N] [--out DIR] [--tolerance-scale F]
    qbsde --manifest manifest.json [--threads N] [--out DIR]

Exit codes: 0 all verdicts pass, 1 a verdict failed, 2 configuration error,
3 numerical failure.  A manifest run returns the largest individual code.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import os
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .errors import (AuditFailure, BracketFailure, Blowup, ClosedFormUnavailable, ConfigError, DomainMismatch,
                     DomainTooSmall, EndpointViolation, GridEscape, MonotoneViolation, NonConvergence, OutOfDomain,
                     OverflowGuard, VariantMismatch)
from .functions import DriftFunction, as_expr
from .generators import DriftQuadratic, Entropic, PureQuadratic, audit_assumptions, from_descriptor
from .lab import (MCConfig, PayoffPair, brownian_invariance_check, cons1_check, gap_detail, gateaux_check,
                  mli_gap, representation_slope)
from .pde_solver import SchemeParams, SolverConfig, export_csv, solve_markov, terminal_value
from .risk import (CertaintyEquivalentRM, EntropicRM, Exponential, Linear, MarkovPayoff, PiecewiseConvex,
                   ShortfallRM, axioms_audit, tc_gap)
from .stochastic import TimeGrid, gauss_hermite, sample_paths
from .transforms import construct_f, export_descriptor, export_flow_csv, psi_from_k, transfer_identity_gap

EXIT_OK, EXIT_VERDICT, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3
EXPERIMENTS = ("solve", "risk", "li-test", "clli-test", "mli-test", "tc-test", "repr-check", "gateaux-check",
               "cons1-check", "transform", "invariance-check", "audit")
NUMERICAL_ERRORS = (NonConvergence, Blowup, DomainTooSmall, GridEscape, MonotoneViolation, OverflowGuard,
                    BracketFailure, OutOfDomain, DomainMismatch)
CONFIG_ERRORS = (ConfigError, EndpointViolation, VariantMismatch, AuditFailure, ClosedFormUnavailable,
                 jsonschema.ValidationError, KeyError, TypeError, ValueError)

# ---------------------------------------------------------------------------
# schema
# ---------------------------------------------------------------------------

_NUM = {"type": "number"}
_STR = {"type": "string"}
_EXPR = {"type": ["string", "number"]}
_OBJ = {"type": "object"}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


_ORACLE = {"oneOf": [
    _NUM,
    _obj({"type": {"const": "branch"}, "c": _NUM, "eps_w": _NUM, "beta": _NUM}, ["type", "c", "eps_w", "beta"]),
    _obj({"type": {"const": "jensen"}, "k": _NUM, "phi": _EXPR, "variance": _NUM}, ["type", "k", "phi", "variance"]),
]}

_PARAMS = {
    "solve": _obj({"oracle": {"enum": ["entropic", "psi", "none"]}, "max_seconds": _NUM, "export_surface": {"type": "boolean"}}),
    "risk": _obj({"t": _NUM, "x": _NUM, "n_nodes": {"type": "integer"}, "compare": {"enum": ["pde", "entropic", "none"]},
                  "gamma": _NUM}),
    "li-test": _obj({"oracle": _ORACLE, "relative_tolerance": _NUM, "min_gap": _NUM}),
    "clli-test": _obj({"T_prime": _NUM, "oracle": _ORACLE, "relative_tolerance": _NUM, "min_gap": _NUM}, ["T_prime"]),
    "mli-test": _obj({"phi": _EXPR, "tau": _NUM, "tau_prime": _NUM, "length": _NUM, "oracle": _ORACLE,
                      "relative_tolerance": _NUM, "min_gap": _NUM}, ["phi", "tau", "tau_prime"]),
    "tc-test": _obj({"s": _NUM, "n_nodes": {"type": "integer"}, "oracle": _NUM, "relative_tolerance": _NUM,
                     "min_gap": _NUM}, ["s"]),
    "repr-check": _obj({"t": _NUM, "y": _NUM, "z": _NUM, "eps": {"type": "array", "items": _NUM, "minItems": 1},
                        "C": {"type": ["number", "null"]}}, ["y", "z", "eps"]),
    "gateaux-check": _obj({"y": _NUM, "eps": {"type": "array", "items": _NUM, "minItems": 1},
                           "coefficient_tolerance": _NUM}, ["y", "eps"]),
    "cons1-check": _obj({"y": _NUM, "n_paths": {"type": "integer"}, "n_steps": {"type": "integer"}, "T": _NUM,
                         "min_gap": _NUM}),
    "transform": _obj({"h": _EXPR, "f0": _EXPR, "phi": _EXPR, "T": _NUM, "y_range": {"type": "array", "items": _NUM},
                       "n_y": {"type": "integer"}, "flow_steps": {"type": "integer"}, "min_ratio": _NUM},
                      ["h", "f0", "phi"]),
    "invariance-check": _obj({"lambda": _NUM, "O": {"enum": [1, -1]}, "C": _NUM, "eps": _NUM, "t": _NUM, "s": _NUM,
                              "n_paths": {"type": "integer"}, "dt": _NUM, "mismatched": {"type": "boolean"},
                              "alpha": _NUM, "reject_below": _NUM},
                             ["lambda", "C", "eps", "t", "s"]),
    "audit": _obj({"payoffs": {"type": "array", "items": _EXPR}, "constants": {"type": "array", "items": _NUM},
                   "expect": {"type": "object", "additionalProperties": {"type": "boolean"}}}),
}

CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "name": {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"},
        "experiment": {"enum": list(EXPERIMENTS)},
        "generator": {**_OBJ, "required": ["type"]},
        "payoff": _obj({"kind": {"enum": ["Terminal", "Early", "Increment", "IndicatorOfBranch"]}, "phi": _EXPR,
                        "T": _NUM, "t1": _NUM, "t2": _NUM, "c": _NUM, "upper": {"type": "boolean"}}),
        "pair": _obj({"type": {"enum": ["Reflection", "IncrementShift", "BranchSwap"]}, "phi": _EXPR, "T": _NUM,
                      "t1": _NUM, "c": _NUM, "t_obs": _NUM}, ["type"]),
        "measure": _obj({"type": {"enum": ["Entropic", "Shortfall", "CertaintyEquivalent"]}, "gamma": _NUM,
                         "loss": _obj({"type": {"enum": ["Linear", "Exponential", "PiecewiseConvex"]}, "beta": _NUM},
                                      ["type"]),
                         "h": _EXPR, "f0": _EXPR, "T": _NUM, "psi_domain": {"type": "array", "items": _NUM},
                         "flow_steps": {"type": "integer"}}, ["type"]),
        "grid": _obj({"steps_per_unit": {"type": "integer", "minimum": 1}, "n_x": {"type": "integer", "minimum": 5},
                      "width": _NUM, "theta": _NUM, "boundary": {"enum": ["dirichlet", "neumann"]},
                      "boundary_tol": _NUM}),
        "mc": _obj({"n_paths": {"type": "integer", "minimum": 1}, "n_steps": {"type": "integer", "minimum": 1},
                    "chunk": {"type": "integer", "minimum": 1}}),
        "params": _OBJ,
        "tolerance": {"type": "number", "minimum": 0},
        "seed": {"type": "integer", "minimum": 0},
        "description": _STR,
    },
    "required": ["name", "experiment"],
    "additionalProperties": False,
    "allOf": [{"if": {"properties": {"experiment": {"const": tag}}},
               "then": {"properties": {"params": schema}}} for tag, schema in _PARAMS.items()],
}

MANIFEST_SCHEMA = {
    "type": "object",
    "properties": {"experiments": {"type": "array", "items": {"type": ["object", "string"]}},
                   "description": _STR},
    "required": ["experiments"],
    "additionalProperties": False,
}


def validate_config(cfg: dict) -> None:
    """Raise ``jsonschema.ValidationError`` on unknown or ill-typed fields."""
    jsonschema.validate(cfg, CONFIG_SCHEMA)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


# ---------------------------------------------------------------------------
# resolution of descriptors
# ---------------------------------------------------------------------------


def _solver_config(cfg: dict) -> SolverConfig:
    g = cfg.get("grid", {})
    sp = SchemeParams(theta=float(g.get("theta", 0.5)), boundary=g.get("boundary", "dirichlet"),
                      boundary_tol=float(g.get("boundary_tol", 1e-3)))
    return SolverConfig(int(g.get("steps_per_unit", 400)), int(g.get("n_x", 801)), float(g.get("width", 6.0)), sp)


def _mc_config(cfg: dict) -> MCConfig:
    m = cfg.get("mc", {})
    d = MCConfig()
    return MCConfig(int(m.get("n_paths", d.n_paths)), int(m.get("n_steps", d.n_steps)), int(cfg.get("seed", d.seed)),
                    int(m.get("chunk", d.chunk)))


def payoff_from(d: dict) -> MarkovPayoff:
    kind = d.get("kind", "Terminal")
    T = float(d.get("T", 1.0))
    if kind == "IndicatorOfBranch":
        return MarkovPayoff.indicator(float(d["c"]), float(d["t1"]), T, bool(d.get("upper", True)))
    phi = as_expr(str(d["phi"]), ("x",))
    return MarkovPayoff(phi, T, kind, d.get("t1"), d.get("t2"), name=str(d["phi"]))


def pair_from(d: dict) -> PayoffPair:
    T = float(d.get("T", 1.0))
    kind = d["type"]
    if kind == "BranchSwap":
        return PayoffPair.branch_swap(float(d["c"]), float(d["t_obs"]), T)
    phi = as_expr(str(d["phi"]), ("x",))
    if kind == "Reflection":
        return PayoffPair.reflection(phi, T)
    return PayoffPair.increment_shift(phi, float(d["t1"]), T)


def _ce_parts(d: dict):
    h = DriftFunction.from_expr(str(d["h"]))
    T = float(d.get("T", 1.0))
    f = construct_f(h, d.get("f0", 0.0), TimeGrid(0.0, T, int(d.get("flow_steps", 400))))
    psi = psi_from_k(d.get("f0", 0.0), tuple(d.get("psi_domain", (-4.0, 4.0))))
    return h, f, psi


def measure_from(d: dict):
    kind = d["type"]
    if kind == "Entropic":
        return EntropicRM(float(d["gamma"]))
    if kind == "Shortfall":
        loss = d["loss"]
        ltype = loss["type"]
        if ltype == "Linear":
            return ShortfallRM(Linear())
        if ltype == "Exponential":
            return ShortfallRM(Exponential(float(loss["beta"])))
        return ShortfallRM(PiecewiseConvex())
    _, f, psi = _ce_parts(d)
    return CertaintyEquivalentRM(f.flow, psi)


def _oracle_value(o) -> float:
    if isinstance(o, (int, float)):
        return float(o)
    if o["type"] == "branch":
        c, e, b = float(o["c"]), float(o["eps_w"]), float(o["beta"])
        a = np.log(0.5 * np.exp(2 * b * (c + e)) + 0.5) / (2 * b)
        return float(abs(a - np.log(0.5 * np.exp(2 * b * c) + 0.5 * np.exp(2 * b * e)) / (2 * b)))
    # jensen: (1/2k) log E exp(2k phi(sqrt(v) Z)) - E phi(sqrt(v) Z)
    rule = gauss_hermite(80)
    phi = as_expr(str(o["phi"]), ("x",))
    vals = np.asarray(phi(np.sqrt(float(o["variance"])) * rule.nodes), float)
    k = float(o["k"])
    return float(np.log(np.sum(rule.weights * np.exp(2 * k * vals))) / (2 * k) - np.sum(rule.weights * vals))


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


@dataclass
class Outcome:
    passed: bool
    gap: float
    tolerance: float
    details: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)  # file name -> (header, rows)
    files: dict = field(default_factory=dict)  # file name -> text


def _gap_verdict(gap, tol, se, params, scale):
    """Shared verdict logic of the gap tests.

    With an oracle the gap must match it; otherwise, with ``min_gap``, the
    gap must be detectable (a falsification test); otherwise it must be
    small.  Monte Carlo results use three standard errors instead of the
    absolute tolerance.
    """
    threshold = (3.0 * se if se > 0 else tol) * scale
    info = {"threshold": threshold}
    min_gap = params.get("min_gap")
    if "oracle" in params:
        oracle = _oracle_value(params["oracle"])
        if "relative_tolerance" in params:
            threshold = float(params["relative_tolerance"]) * abs(oracle) * scale
            info["threshold"] = threshold
        ok = abs(gap - oracle) <= threshold and (min_gap is None or gap >= float(min_gap))
        info.update(oracle=oracle, oracle_error=abs(gap - oracle))
        return bool(ok), abs(gap - oracle), threshold, info
    if min_gap is not None:
        info["threshold"] = float(min_gap)
        return bool(gap >= float(min_gap)), gap, float(min_gap), info
    return bool(gap <= threshold), gap, threshold, info


def _run_solve(cfg, p, tol, scale):
    g = from_descriptor(cfg["generator"])
    X = payoff_from(cfg["payoff"])
    scfg = _solver_config(cfg)
    from .lab import pde_value, _entropic_value, _psi_value
    t0 = time.perf_counter()
    value = pde_value(g, X, scfg)
    seconds = time.perf_counter() - t0
    details = {"value": value}
    files = {}
    if p.get("export_surface") and X.kind == "Terminal":
        tg, sg = scfg.grids(0.0, X.T)
        vs = solve_markov(g, X.phi, tg, sg, scfg.params)
        buf = _temp_text(lambda path: export_csv(vs, path))
        files["surface.csv"] = buf
    oracle = p.get("oracle", "none")
    if oracle == "none":
        passed, gap = True, 0.0
    else:
        atoms, w = X.conditional_law(0.0, 0.0, 80)
        if oracle == "entropic":
            if not isinstance(g, Entropic):
                raise ConfigError("the entropic oracle needs an Entropic generator")
            ref = float(_entropic_value(g.beta, atoms, w))
        else:
            if not isinstance(g, PureQuadratic):
                raise ConfigError("the psi oracle needs a PureQuadratic generator")
            ref = float(_psi_value(g.k, atoms, w))
        gap = abs(value - ref)
        details["oracle"] = ref
        passed = gap <= tol * scale
    if "max_seconds" in p:
        # wall-clock budget: reported, checked, but never part of the byte-identical report
        passed = passed and seconds <= float(p["max_seconds"])
    return Outcome(passed, gap, tol * scale, details, files=files)


def _run_risk(cfg, p, tol, scale):
    rm = measure_from(cfg["measure"])
    X = payoff_from(cfg["payoff"])
    t, x, n = float(p.get("t", 0.0)), float(p.get("x", 0.0)), int(p.get("n_nodes", 80))
    value = float(rm.rho(X, t, x, n))
    details = {"value": value}
    rows = [[cfg["measure"]["type"], X.name, t, repr(value)]]
    compare = p.get("compare", "none")
    gap = 0.0
    if compare == "pde":
        m = cfg["measure"]
        if m["type"] != "CertaintyEquivalent":
            raise ConfigError("compare = pde needs a CertaintyEquivalent measure")
        h, f, _ = _ce_parts(m)
        ref = terminal_value(DriftQuadratic(h, f), X.phi, X.T, _solver_config(cfg))
        gap = abs(value - ref)
        details["pde_value"] = ref
        rows.append(["PDE", X.name, t, repr(ref)])
    elif compare == "entropic":
        ref = float(EntropicRM(float(p["gamma"])).rho(X, t, x, n))
        gap = abs(value - ref)
        details["entropic_value"] = ref
        rows.append(["Entropic", X.name, t, repr(ref)])
    return Outcome(gap <= tol * scale, gap, tol * scale, details,
                   tables={"values.csv": (["measure", "payoff", "t", "value"], rows)})


def _run_gap(cfg, p, tol, scale, horizon=None):
    g = from_descriptor(cfg["generator"])
    pair = pair_from(cfg["pair"])
    d = gap_detail(g, pair, horizon, _solver_config(cfg), _mc_config(cfg))
    passed, measured, thr, info = _gap_verdict(float(d["gap"]), tol, float(d["se"]), p, scale)
    details = {k: (float(v) if isinstance(v, (np.floating, float)) else v) for k, v in d.items()}
    details.update(info, pair=pair.name)
    return Outcome(passed, measured, thr, details)


def _run_li(cfg, p, tol, scale):
    return _run_gap(cfg, p, tol, scale)


def _run_clli(cfg, p, tol, scale):
    pair = pair_from(cfg["pair"])
    if pair.measurable_at > float(p["T_prime"]) + 1e-12:
        raise ConfigError("payoffs must be measurable at T_prime")
    return _run_gap(cfg, p, tol, scale, float(p["T_prime"]))


def _run_mli(cfg, p, tol, scale):
    g = from_descriptor(cfg["generator"])
    phi = as_expr(str(p["phi"]), ("x",))
    gap = mli_gap(g, phi, float(p["tau"]), float(p["tau_prime"]), p.get("length"), _solver_config(cfg))
    passed, measured, thr, info = _gap_verdict(gap, tol, 0.0, p, scale)
    return Outcome(passed, measured, thr, {"gap": gap, **info})


def _run_tc(cfg, p, tol, scale):
    rm = measure_from(cfg["measure"])
    X = payoff_from(cfg["payoff"])
    gap = float(tc_gap(rm, X, float(p["s"]), int(p.get("n_nodes", 80))))
    passed, measured, thr, info = _gap_verdict(gap, tol, 0.0, p, scale)
    return Outcome(passed, measured, thr, {"gap": gap, **info})


def _run_repr(cfg, p, tol, scale):
    g = from_descriptor(cfg["generator"])
    rep = representation_slope(g, float(p.get("t", 0.0)), float(p["y"]), float(p["z"]), p["eps"], p.get("C"),
                               tol * scale, _solver_config(cfg))
    rows = [[repr(e), repr(s), repr(rep.extra["target"])] for e, s in zip(rep.extra["eps"], rep.extra["slopes"])]
    return Outcome(rep.verdict == "pass", rep.sup_gap, rep.tolerance, rep.to_dict(),
                   tables={"slopes.csv": (["eps", "slope", "target"], rows)})


def _run_gateaux(cfg, p, tol, scale):
    g = from_descriptor(cfg["generator"])
    X = payoff_from(cfg["payoff"])
    rep = gateaux_check(g, float(p["y"]), X, p["eps"], tol * scale, _solver_config(cfg))
    passed = rep.verdict == "pass"
    details = rep.to_dict()
    if "coefficient_tolerance" in p:
        if not isinstance(g, Entropic) or float(p["y"]) != 0.0:
            raise ConfigError("the coefficient check is defined for Entropic generators at y = 0")
        atoms, w = X.conditional_law(0.0, 0.0, 80)
        var = float(np.sum(w * atoms * atoms) - np.sum(w * atoms) ** 2)
        coef = 0.5 * g.gamma * var
        rel = abs(rep.extra["error_slope"] - coef) / coef
        details.update(coefficient_oracle=coef, coefficient_relative_error=rel)
        passed = passed and rel <= float(p["coefficient_tolerance"])
    rows = [[repr(e), repr(s)] for e, s in zip(p["eps"], rep.extra["slopes"])]
    return Outcome(passed, rep.sup_gap, rep.tolerance, details,
                   tables={"slopes.csv": (["eps", "slope"], rows)})


def _run_cons1(cfg, p, tol, scale):
    g = from_descriptor(cfg["generator"])
    T = float(p.get("T", 1.0))
    paths = sample_paths(TimeGrid(0.0, T, int(p.get("n_steps", 200))), 1, int(p.get("n_paths", 20000)),
                         int(cfg.get("seed", 5)))
    rep = cons1_check(g, float(p.get("y", 0.0)), paths, tol * scale)
    if "min_gap" in p:
        # detection control: the identity must visibly fail
        return Outcome(rep.sup_gap >= float(p["min_gap"]), rep.sup_gap, float(p["min_gap"]), rep.to_dict())
    return Outcome(rep.verdict == "pass", rep.sup_gap, rep.tolerance, rep.to_dict())


def _run_transform(cfg, p, tol, scale):
    h = DriftFunction.from_expr(str(p["h"]))
    T = float(p.get("T", 1.0))
    f = construct_f(h, p["f0"], TimeGrid(0.0, T, int(p.get("flow_steps", 400))),
                    tuple(p.get("y_range", (-8.0, 8.0))), int(p.get("n_y", 641)))
    phi = as_expr(str(p["phi"]), ("x",))
    g = DriftQuadratic(h, f)
    scfg = _solver_config(cfg)
    gap = transfer_identity_gap(g, f.flow, phi, scfg, T)
    details = {"transfer_gap": gap}
    passed = gap <= tol * scale
    if "min_ratio" in p:
        fine = transfer_identity_gap(g, f.flow, phi, scfg.refined(2), T)
        ratio = gap / fine if fine > 0 else float("inf")
        details.update(refined_gap=fine, ratio=ratio)
        passed = passed and ratio >= float(p["min_ratio"])
    files = {"flow.csv": _temp_text(lambda path: export_flow_csv(f.flow, path)),
             "flow_descriptor.json": _temp_text(lambda path: export_descriptor(f.flow, path))}
    return Outcome(passed, gap, tol * scale, details, files=files)


def _run_invariance(cfg, p, tol, scale):
    rep = brownian_invariance_check(float(p["lambda"]), int(p.get("O", 1)), float(p["C"]), float(p["eps"]),
                                    float(p["t"]), float(p["s"]), int(p.get("n_paths", 100_000)),
                                    int(cfg.get("seed", 7)), float(p.get("dt", 0.005)), bool(p.get("mismatched", False)),
                                    float(p.get("alpha", 0.01)))
    pval = rep.extra["p_value"]
    if p.get("mismatched", False):
        thr = float(p.get("reject_below", 1e-3))
        passed = pval < thr
    else:
        thr = float(p.get("alpha", 0.01))
        passed = pval > thr
    return Outcome(passed, pval, thr, rep.to_dict())


def _run_audit(cfg, p, tol, scale):
    if "generator" in cfg:
        rep = audit_assumptions(from_descriptor(cfg["generator"]))
        d = rep.to_dict()
        expect = p.get("expect", {"a1_a4": True})
        got = {"a1_a4": rep.a1_a4_pass, "zero_drift": rep.zero_drift, "quadratic_form": rep.quadratic_form,
               "time_dependent": rep.time_dependent, "A5": rep.a5}
    else:
        rm = measure_from(cfg["measure"])
        payoffs = [MarkovPayoff.terminal(as_expr(str(e), ("x",)), name=str(e))
                   for e in p.get("payoffs", ["tanh(x)", "sin(x)", "0.5*tanh(2*x)"])]
        d = axioms_audit(rm, payoffs, tuple(p.get("constants", (-0.5, 0.5, 1.0))), tol=tol * scale)
        expect = p.get("expect", {"monotone": True, "convex": True, "cash_additive": True, "normalized": True})
        got = {k: v["pass"] for k, v in d.items() if isinstance(v, dict)}
    unknown = set(expect) - set(got)
    if unknown:
        raise ConfigError(f"unknown audit keys {sorted(unknown)}")
    passed = all(got[k] == v for k, v in expect.items())
    gap = float(d.get("cash_additive_gap", d.get("A4_margin", 0.0)))
    return Outcome(passed, gap, tol * scale, {"report": d, "expect": expect, "observed": got})


RUNNERS = {"solve": _run_solve, "risk": _run_risk, "li-test": _run_li, "clli-test": _run_clli,
           "mli-test": _run_mli, "tc-test": _run_tc, "repr-check": _run_repr, "gateaux-check": _run_gateaux,
           "cons1-check": _run_cons1, "transform": _run_transform, "invariance-check": _run_invariance,
           "audit": _run_audit}

DEFAULT_TOLERANCE = {"solve": 5e-4, "risk": 1e-3, "li-test": 1e-3, "clli-test": 1e-3, "mli-test": 1e-3,
                     "tc-test": 1e-6, "repr-check": 1e-3, "gateaux-check": 1e-3, "cons1-check": 1e-6,
                     "transform": 1e-3, "invariance-check": 0.01, "audit": 1e-8}


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def _temp_text(writer) -> str:
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "out")
        writer(path)
        return Path(path).read_text()


def atomic_write(path: Path, text: str) -> None:
    """Write through a temporary file in the target directory, then rename."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    return str(o)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


@dataclass
class RunResult:
    name: str
    experiment: str
    exit_code: int
    verdict: str
    gap: float
    tolerance: float
    seconds: float
    error: str | None = None


def run(cfg: dict, out_dir: Path, seed: int | None = None, tolerance_scale: float = 1.0) -> RunResult:
    """Validate, run and report one experiment; never raises for experiment failures."""
    t0 = time.perf_counter()
    name = cfg.get("name", "unnamed") if isinstance(cfg, dict) else "unnamed"
    exp = cfg.get("experiment", "?") if isinstance(cfg, dict) else "?"
    try:
        validate_config(cfg)
        resolved = copy.deepcopy(cfg)
        if seed is not None:
            resolved["seed"] = int(seed)
        resolved.setdefault("tolerance", DEFAULT_TOLERANCE[exp])
        resolved.setdefault("params", {})
        outcome = RUNNERS[exp](resolved, resolved["params"], float(resolved["tolerance"]), float(tolerance_scale))
    except jsonschema.ValidationError as exc:
        return _failure(name, exp, EXIT_CONFIG, f"config error at {list(exc.absolute_path)}: {exc.message}", t0, out_dir)
    except NUMERICAL_ERRORS as exc:
        return _failure(name, exp, EXIT_NUMERICAL, f"{type(exc).__name__}: {exc}", t0, out_dir)
    except CONFIG_ERRORS as exc:
        return _failure(name, exp, EXIT_CONFIG, f"{type(exc).__name__}: {exc}", t0, out_dir)

    verdict = "pass" if outcome.passed else "fail"
    report = {"name": name, "experiment": exp, "verdict": verdict, "gap": outcome.gap,
              "tolerance": outcome.tolerance, "tolerance_scale": tolerance_scale, "details": outcome.details,
              "config": resolved, "config_hash": config_hash(resolved), "version": __version__}
    target = out_dir / name
    atomic_write(target / "report.json", json.dumps(report, indent=2, sort_keys=True, default=_jsonable) + "\n")
    for fname, (header, rows) in outcome.tables.items():
        atomic_write(target / fname, _csv_text(header, rows))
    for fname, text in outcome.files.items():
        atomic_write(target / fname, text)
    code = EXIT_OK if outcome.passed else EXIT_VERDICT
    return RunResult(name, exp, code, verdict, float(outcome.gap), float(outcome.tolerance),
                     time.perf_counter() - t0)


def _failure(name, exp, code, message, t0, out_dir) -> RunResult:
    report = {"name": name, "experiment": exp, "verdict": "error", "exit_code": code, "error": message,
              "version": __version__}
    if isinstance(name, str) and name and "/" not in name:
        atomic_write(out_dir / name / "report.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    return RunResult(str(name), str(exp), code, "error", float("nan"), float("nan"), time.perf_counter() - t0,
                     message)


def load_json(path: Path):
    """Parse JSON, turning syntax errors into ConfigError with line and column."""
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None


def shipped_manifest() -> Path:
    """Path of the acceptance manifest distributed with the package."""
    return Path(str(resources.files("qbsde") / "manifests" / "acceptance.json"))


def _resolve_manifest(path: Path) -> list:
    data = load_json(path)
    if isinstance(data, list):
        data = {"experiments": data}
    jsonschema.validate(data, MANIFEST_SCHEMA)
    configs = []
    for entry in data["experiments"]:
        configs.append(load_json(path.parent / entry) if isinstance(entry, str) else entry)
    for cfg in configs:
        validate_config(cfg)
    names = [c["name"] for c in configs]
    if len(set(names)) != len(names):
        raise ConfigError("experiment names must be unique within a manifest")
    return configs


def suite(configs: list, out_dir: Path, seed: int | None = None, threads: int = 1,
          tolerance_scale: float = 1.0) -> tuple[int, list]:
    """Run every config (in a worker pool), write summary.csv, return (exit code, results)."""
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(lambda c: run(c, out_dir, seed, tolerance_scale), configs))
    rows = [[r.name, r.verdict, repr(r.gap), repr(r.tolerance), f"{r.seconds:.3f}"] for r in results]
    atomic_write(out_dir / "summary.csv", _csv_text(["name", "verdict", "gap", "tolerance", "seconds"], rows))
    code = max([r.exit_code for r in results], default=EXIT_OK)
    return code, results


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qbsde", description="Run quadratic-BSDE experiments from JSON configs.")
    src = ap.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", type=Path, help="single experiment config (JSON)")
    src.add_argument("--manifest", type=str,
                     help="manifest of configs (JSON); 'acceptance' selects the shipped acceptance manifest")
    ap.add_argument("--seed", type=int, default=None, help="override the seed of every experiment")
    ap.add_argument("--out", type=Path, default=None, help="output directory (default: $QBSDE_OUT or ./qbsde-out)")
    ap.add_argument("--threads", type=int, default=1, help="worker threads for manifests")
    ap.add_argument("--tolerance-scale", type=float, default=1.0, help="multiply every tolerance")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = args.out or Path(os.environ.get("QBSDE_OUT", "qbsde-out"))
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    if args.tolerance_scale <= 0:
        print("error: --tolerance-scale must be positive", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.config is not None:
            configs = [load_json(args.config)]
        else:
            path = shipped_manifest() if args.manifest == "acceptance" else Path(args.manifest)
            configs = _resolve_manifest(path)
    except (ConfigError, jsonschema.ValidationError, OSError) as exc:
        msg = exc.message if isinstance(exc, jsonschema.ValidationError) else str(exc)
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    if args.config is not None:
        r = run(configs[0], out, args.seed, args.tolerance_scale)
        print(f"{r.name}: {r.verdict} gap={r.gap:.6g} tol={r.tolerance:.3g}" + (f" ({r.error})" if r.error else ""))
        return r.exit_code
    code, results = suite(configs, out, args.seed, args.threads, args.tolerance_scale)
    for r in results:
        print(f"{r.name}: {r.verdict} gap={r.gap:.6g} tol={r.tolerance:.3g}" + (f" ({r.error})" if r.error else ""))
    return code


if __name__ == "__main__":
    sys.exit(main())

"""Brownian paths, time grids, exit times, Gaussian quadrature and KS tests.

Path generation splits the random stream by *blocks* of paths: path ``i``
draws its normals from row ``i % PATH_BLOCK`` of the block generated by
``Philox(SeedSequence(seed, spawn_key=(i // PATH_BLOCK,)))``.  Blocks are
independent of each other and of the total number of paths requested, so
any scheduling of the blocks reproduces the same array bit for bit.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterator, Union

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy import stats
from scipy.special import ndtri

PATH_BLOCK = 1024
_PATH_MAGIC = b"QBSD"
_FORMAT_VERSION = 1
# magic, version, d, n_steps, n_paths, seed, t0, T
_PATH_HEADER = struct.Struct("<4sIIIQQdd")


@dataclass(frozen=True)
class TimeGrid:
    """Sorted time nodes on [t0, T]; uniform unless ``nodes`` is supplied."""

    t0: float
    T: float
    n_steps: int
    nodes: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if int(self.n_steps) < 1:
            raise ValueError("n_steps must be >= 1")
        if not self.T > self.t0:
            raise ValueError("T must exceed t0")
        if self.nodes is None:
            nodes = np.linspace(self.t0, self.T, int(self.n_steps) + 1)
        else:
            nodes = np.asarray(self.nodes, dtype=float)
            if nodes.shape != (int(self.n_steps) + 1,):
                raise ValueError("nodes must have n_steps + 1 entries")
            if nodes[0] != self.t0 or nodes[-1] != self.T or np.any(np.diff(nodes) <= 0):
                raise ValueError("nodes must increase strictly from t0 to T")
        nodes.setflags(write=False)
        object.__setattr__(self, "n_steps", int(self.n_steps))
        object.__setattr__(self, "nodes", nodes)

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.n_steps

    @property
    def uniform(self) -> bool:
        return bool(np.allclose(np.diff(self.nodes), self.dt, rtol=0, atol=1e-14 * max(1.0, abs(self.T))))

    def index(self, t: float, tol: float = 1e-9) -> int:
        """Index of the node equal to ``t``; ``ValueError`` if ``t`` is off-grid."""
        i = int(np.argmin(np.abs(self.nodes - t)))
        if abs(self.nodes[i] - t) > tol:
            raise ValueError(f"time {t} is not a grid node")
        return i

    def snap(self, t: float) -> int:
        """Index of the nearest node (used to snap window edges)."""
        return int(np.argmin(np.abs(self.nodes - t)))

    def __eq__(self, other):
        if not isinstance(other, TimeGrid):
            return NotImplemented
        return self.n_steps == other.n_steps and np.array_equal(self.nodes, other.nodes)

    def __hash__(self):
        return hash((self.t0, self.T, self.n_steps))


@dataclass(frozen=True, eq=False)
class PathBatch:
    grid: TimeGrid
    d: int
    n_paths: int
    values: np.ndarray  # (n_paths, n_steps + 1, d)
    seed: int
    first_path: int = 0

    def __post_init__(self):
        self.values.setflags(write=False)

    def coordinate(self, k: int = 0) -> np.ndarray:
        """Values of the k-th Brownian coordinate, shape (n_paths, n_steps + 1)."""
        return self.values[:, :, k]

    def at(self, t: float, k: int = 0) -> np.ndarray:
        return self.values[:, self.grid.index(t), k]

    def increments(self) -> np.ndarray:
        return np.diff(self.values, axis=1)


def _block_normals(seed: int, block: int, n_steps: int, d: int) -> np.ndarray:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(block),))
    bits = np.random.Generator(np.random.Philox(ss)).integers(
        0, 2**53, size=(PATH_BLOCK, n_steps, d), dtype=np.int64
    )
    # midpoint of a 2^-53 cell keeps u strictly inside (0, 1)
    u = (bits.astype(np.float64) + 0.5) * 2.0**-53
    return ndtri(u)


def _check_grid(grid: TimeGrid, d: int, n_paths: int):
    if grid.n_steps == 0:
        raise ValueError("grid must have at least one step")
    if d < 1 or n_paths < 1:
        raise ValueError("need d >= 1 and n_paths >= 1")


def sample_paths(grid: TimeGrid, d: int, n_paths: int, seed: int, first_path: int = 0) -> PathBatch:
    """Brownian paths started at 0 on ``grid``; paths ``first_path .. first_path + n_paths - 1``."""
    _check_grid(grid, d, n_paths)
    sqrt_dt = np.sqrt(np.diff(grid.nodes))[None, :, None]
    out = np.empty((n_paths, grid.n_steps + 1, d))
    out[:, 0, :] = 0.0
    stop = first_path + n_paths
    b0, b1 = first_path // PATH_BLOCK, (stop - 1) // PATH_BLOCK
    for b in range(b0, b1 + 1):
        lo = max(first_path, b * PATH_BLOCK)
        hi = min(stop, (b + 1) * PATH_BLOCK)
        z = _block_normals(seed, b, grid.n_steps, d)[lo - b * PATH_BLOCK : hi - b * PATH_BLOCK]
        np.cumsum(z * sqrt_dt, axis=1, out=out[lo - first_path : hi - first_path, 1:, :])
    return PathBatch(grid, d, n_paths, out, int(seed), first_path)


def iter_path_blocks(grid: TimeGrid, d: int, n_paths: int, seed: int, chunk: int = 64 * PATH_BLOCK) -> Iterator[PathBatch]:
    """Yield consecutive sub-batches covering paths 0 .. n_paths - 1 (bounded memory)."""
    _check_grid(grid, d, n_paths)
    for start in range(0, n_paths, chunk):
        yield sample_paths(grid, d, min(chunk, n_paths - start), seed, first_path=start)


def save_paths(batch: PathBatch, path) -> None:
    header = _PATH_HEADER.pack(
        _PATH_MAGIC, _FORMAT_VERSION, batch.d, batch.grid.n_steps, batch.n_paths,
        batch.seed, batch.grid.t0, batch.grid.T,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(batch.values, dtype="<f8").tobytes())


def load_paths(path) -> PathBatch:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, d, n_steps, n_paths, seed, t0, T = _PATH_HEADER.unpack_from(raw)
    if magic != _PATH_MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != _FORMAT_VERSION:
        raise ValueError(f"unsupported version {version}")
    values = np.frombuffer(raw, dtype="<f8", offset=_PATH_HEADER.size)
    values = values.reshape(n_paths, n_steps + 1, d).astype(np.float64)
    return PathBatch(TimeGrid(t0, T, n_steps), d, n_paths, values, seed)


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    """Nodes and weights for E[p(Z)], Z ~ N(0, 1)."""

    nodes: np.ndarray
    weights: np.ndarray

    def expect(self, fn, loc=0.0, scale=1.0):
        """E[fn(loc + scale * Z)], broadcasting over array-valued ``loc``."""
        loc = np.asarray(loc, dtype=float)
        pts = loc[..., None] + scale * self.nodes
        return np.sum(fn(pts) * self.weights, axis=-1)


_GH_CACHE: dict[int, QuadratureRule] = {}


def gauss_hermite(n_nodes: int) -> QuadratureRule:
    if not 1 <= n_nodes <= 200:
        raise ValueError("n_nodes must lie in [1, 200]")
    rule = _GH_CACHE.get(n_nodes)
    if rule is None:
        x, w = hermegauss(n_nodes)
        w = w / w.sum()
        x.setflags(write=False)
        w.setflags(write=False)
        rule = _GH_CACHE[n_nodes] = QuadratureRule(x, w)
    return rule


@dataclass(frozen=True)
class LevelExit:
    """First grid node where |W_s - W_start| exceeds ``C`` (capped at T).

    ``center`` replaces W_start as the reference level when given.
    """

    C: float
    center: float | None = None

    def __post_init__(self):
        if not self.C > 0:
            raise ValueError("C must be positive")


@dataclass(frozen=True)
class ThresholdBranch:
    """tau = t_low on {W_{t_obs} >= 0}, t_high otherwise."""

    t_obs: float
    t_low: float
    t_high: float

    def __post_init__(self):
        if not self.t_obs < self.t_low < self.t_high:
            raise ValueError("need t_obs < t_low < t_high")


StoppingTimeSpec = Union[LevelExit, ThresholdBranch]


def exit_times(values: np.ndarray, grid: TimeGrid, t_start: float, spec: StoppingTimeSpec) -> np.ndarray:
    """Vectorized stopping times for paths ``values`` of shape (n, n_steps+1[, d])."""
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[None, :]
    if values.ndim == 3:
        values = values[..., 0] if values.shape[2] == 1 else values
    if isinstance(spec, ThresholdBranch):
        if spec.t_high > grid.T + 1e-12:
            raise ValueError("t_high must not exceed T")
        w_obs = values[:, grid.index(spec.t_obs)]
        if w_obs.ndim > 1:
            w_obs = w_obs[:, 0]
        return np.where(w_obs >= 0.0, spec.t_low, spec.t_high)
    i0 = grid.index(t_start)
    ref = values[:, i0] if spec.center is None else spec.center
    seg = values[:, i0:] - (ref[:, None] if np.ndim(ref) else ref)
    dist = np.abs(seg) if seg.ndim == 2 else np.linalg.norm(seg, axis=-1)
    hit = dist > spec.C
    first = np.argmax(hit, axis=1)
    out = grid.nodes[i0 + first]
    out[~hit.any(axis=1)] = grid.T
    return out


def exit_time(path: np.ndarray, grid: TimeGrid, t_start: float, spec: StoppingTimeSpec) -> float:
    """Stopping time of a single path (see ``exit_times``)."""
    return float(exit_times(np.asarray(path)[None, ...], grid, t_start, spec)[0])


def stopped_increment(values: np.ndarray, grid: TimeGrid, t_start: float, horizon: float,
                      spec: LevelExit | None) -> np.ndarray:
    """W_{t + horizon ^ tau} - W_t on the grid, per path (d = 1).

    ``spec=None`` means no clipping (tau = infinity).
    """
    values = np.asarray(values, dtype=float)
    if values.ndim == 3:
        values = values[..., 0]
    i0 = grid.index(t_start)
    i1 = grid.index(t_start + horizon)
    seg = values[:, i0 : i1 + 1] - values[:, i0 : i0 + 1]
    if spec is None:
        return seg[:, -1]
    hit = np.abs(seg) > spec.C
    stop = np.where(hit.any(axis=1), np.argmax(hit, axis=1), seg.shape[1] - 1)
    return seg[np.arange(seg.shape[0]), stop]


def ks_two_sample(a, b) -> dict:
    """Two-sample Kolmogorov-Smirnov statistic with the asymptotic p-value."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("samples must be non-empty")
    res = stats.ks_2samp(a, b, method="asymp")
    return {"statistic": float(res.statistic), "p_value": float(res.pvalue)}

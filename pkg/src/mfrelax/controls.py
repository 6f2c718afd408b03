"""Strict and relaxed feedback controls on a uniform time grid.

A strict control maps ``(k, x)`` to action indices; a relaxed control maps
``(k, x)`` to probability weights over the action grid (a discretized Young
measure).  Both accept an optional ``states`` array (particles x nodes, valid
up to column k) for controls that look back along the path, which only the
chattered control does.
"""
from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass

import numpy as np

from . import _kernels

NORM_TOL = 1e-12
_tokens = itertools.count()


@dataclass(frozen=True)
class TimeGrid:
    T: float
    steps: int

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("time grid needs at least one step")
        if not self.T > 0:
            raise ValueError("horizon must be positive")

    @property
    def dt(self) -> float:
        return self.T / self.steps

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.dt

    def t(self, k: int) -> float:
        return k * self.dt

    def refine(self, m: int) -> "TimeGrid":
        return TimeGrid(self.T, self.steps * m)


@dataclass(frozen=True)
class StateBinning:
    """Uniform bins over [lo, hi]; states outside are clamped to the end bins."""

    lo: float = -4.0
    hi: float = 4.0
    bins: int = 64

    def __post_init__(self):
        if self.bins < 1 or not self.hi > self.lo:
            raise ValueError("binning needs bins >= 1 and hi > lo")

    @classmethod
    def centered(cls, half_width: float = 4.0, bins: int = 64, center: float = 0.0) -> "StateBinning":
        """Bins of width 2 half_width / bins with ``center`` in the middle of a bin."""
        w = 2.0 * half_width / bins
        lo = center - (bins // 2) * w - 0.5 * w
        return cls(lo, lo + bins * w, bins)

    def index(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        j = np.floor((x - self.lo) / (self.hi - self.lo) * self.bins)
        return np.clip(j, 0, self.bins - 1).astype(np.int64)

    @property
    def centers(self) -> np.ndarray:
        w = (self.hi - self.lo) / self.bins
        return self.lo + (np.arange(self.bins) + 0.5) * w


def normalize_weights(w) -> np.ndarray:
    w = np.array(w, dtype=np.float64)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("relaxed-control weights must be finite and nonnegative")
    s = w.sum(axis=-1, keepdims=True)
    if np.any(s <= 0):
        raise ValueError("relaxed-control weights must not sum to zero")
    return w / s


# ---------------------------------------------------------------------------
# strict controls
# ---------------------------------------------------------------------------

class StrictControl:
    grid: TimeGrid
    n_actions: int
    name: str = "strict"

    def indices(self, k, x, states=None) -> np.ndarray:
        raise NotImplementedError

    def identity(self):
        return ("object", self._token)

    def __init__(self, grid, n_actions, name):
        self.grid = grid
        self.n_actions = int(n_actions)
        self.name = name
        self._token = next(_tokens)

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r}, steps={self.grid.steps}, n={self.n_actions})"


class FeedbackControl(StrictControl):
    """Strict control given by a rule ``(k, x_array) -> index_array``."""

    def __init__(self, grid: TimeGrid, n_actions: int, rule, name: str = "feedback"):
        super().__init__(grid, n_actions, name)
        self.rule = rule

    def indices(self, k, x, states=None):
        x = np.asarray(x, dtype=np.float64)
        idx = np.broadcast_to(np.asarray(self.rule(k, x), dtype=np.int64), x.shape)
        if idx.size and (idx.min() < 0 or idx.max() >= self.n_actions):
            raise ValueError(f"{self.name}: action index out of range at step {k}")
        return idx


def constant_control(grid: TimeGrid, n_actions: int, index: int) -> FeedbackControl:
    if not 0 <= index < n_actions:
        raise ValueError("action index out of range")
    return FeedbackControl(grid, n_actions, lambda k, x: np.full(np.shape(x), index),
                           name=f"constant({index})")


class TabularStrictControl(StrictControl):
    def __init__(self, grid: TimeGrid, n_actions: int, table, binning: StateBinning, name="table"):
        table = np.array(table, dtype=np.int64)
        if table.shape != (grid.steps, binning.bins):
            raise ValueError(f"table shape {table.shape} != ({grid.steps}, {binning.bins})")
        if table.min() < 0 or table.max() >= n_actions:
            raise ValueError("action index out of range")
        super().__init__(grid, n_actions, name)
        table.setflags(write=False)
        self.table = table
        self.binning = binning

    def indices(self, k, x, states=None):
        return self.table[k, self.binning.index(x)]


# ---------------------------------------------------------------------------
# relaxed controls
# ---------------------------------------------------------------------------

class RelaxedControl:
    grid: TimeGrid
    n_actions: int

    def __init__(self, grid, n_actions, name):
        self.grid = grid
        self.n_actions = int(n_actions)
        self.name = name
        self._token = next(_tokens)

    def weights(self, k, x, states=None) -> np.ndarray:
        raise NotImplementedError

    def support(self, k, x, states=None):
        """Positive weights as (rows, cols, values), rows ascending."""
        w = np.asarray(self.weights(k, x, states), dtype=np.float64)
        if np.any(w < 0):
            raise ValueError(f"negative relaxed-control weight at step {k}")
        rows, cols = np.nonzero(w > 0)
        return rows, cols, w[rows, cols]

    def identity(self):
        return ("object", self._token)

    def argmax(self, k, x, states=None) -> np.ndarray:
        """Most weighted action index; ties go to the lowest index."""
        return np.argmax(self.weights(k, x, states), axis=1)

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r}, steps={self.grid.steps}, n={self.n_actions})"


class FeedbackRelaxedControl(RelaxedControl):
    """Relaxed control given by ``(k, x_array) -> weights (len(x), n)``,
    renormalized at every lookup."""

    def __init__(self, grid: TimeGrid, n_actions: int, rule, name: str = "relaxed-feedback"):
        super().__init__(grid, n_actions, name)
        self.rule = rule

    def weights(self, k, x, states=None):
        x = np.asarray(x, dtype=np.float64)
        w = np.asarray(self.rule(k, x), dtype=np.float64)
        w = np.broadcast_to(w, (x.size, self.n_actions))
        return normalize_weights(w)


def constant_relaxed(grid: TimeGrid, weights, name=None) -> FeedbackRelaxedControl:
    w = normalize_weights(np.asarray(weights, dtype=np.float64).ravel())
    return FeedbackRelaxedControl(
        grid, w.size, lambda k, x: np.broadcast_to(w, (np.size(x), w.size)),
        name=name or f"constant{tuple(np.round(w, 6))}")


class TabularRelaxedControl(RelaxedControl):
    """Weights stored per (time index, state bin); renormalized on construction
    unless ``normalize`` is false (the caller vouches for the table)."""

    def __init__(self, grid: TimeGrid, table, binning: StateBinning, name="relaxed-table", normalize=True):
        table = normalize_weights(table) if normalize else np.array(table, dtype=np.float64)
        if table.ndim != 3 or table.shape[:2] != (grid.steps, binning.bins):
            raise ValueError(f"table shape {table.shape} does not match ({grid.steps}, {binning.bins}, n)")
        super().__init__(grid, table.shape[2], name)
        table.setflags(write=False)
        self.table = table
        self.binning = binning

        # positive entries in CSR layout over flattened (k, bin) cells
        nz = np.nonzero(table > 0)
        cell = nz[0] * binning.bins + nz[1]
        self._indptr = np.concatenate([[0], np.cumsum(np.bincount(cell, minlength=table.shape[0] * binning.bins))])
        self._cols = nz[2]
        self._vals = table[nz]

    def weights(self, k, x, states=None):
        return self.table[k, self.binning.index(x)]

    def support(self, k, x, states=None):
        cell = k * self.binning.bins + self.binning.index(x)
        start = self._indptr[cell]
        cnt = self._indptr[cell + 1] - start
        rows = np.repeat(np.arange(cell.size), cnt)
        pos = np.arange(rows.size) + np.repeat(start - (np.cumsum(cnt) - cnt), cnt)
        return rows, self._cols[pos], self._vals[pos]

    def identity(self):
        h = hashlib.sha256(self.table.tobytes())
        h.update(repr((self.grid, self.binning)).encode())
        return ("table", h.hexdigest())


class DeltaRelaxedControl(RelaxedControl):
    """Dirac embedding of a strict control: all mass on the chosen action."""

    def __init__(self, strict: StrictControl):
        super().__init__(strict.grid, strict.n_actions, f"delta[{strict.name}]")
        self.strict = strict

    def weights(self, k, x, states=None):
        idx = self.strict.indices(k, x, states)
        w = np.zeros((idx.size, self.n_actions))
        w[np.arange(idx.size), idx] = 1.0
        return w

    def support(self, k, x, states=None):
        idx = np.asarray(self.strict.indices(k, x, states), dtype=np.int64)
        return np.arange(idx.size), idx, np.ones(idx.size)

    def identity(self):
        return self.strict.identity()


def delta_embedding(u: StrictControl) -> DeltaRelaxedControl:
    return DeltaRelaxedControl(u)


def as_relaxed(control) -> RelaxedControl:
    if isinstance(control, RelaxedControl):
        return control
    if isinstance(control, StrictControl):
        return DeltaRelaxedControl(control)
    raise TypeError(f"not a control: {control!r}")


class CoarsenedRelaxedControl(RelaxedControl):
    """View of a relaxed control on a grid ``factor`` times coarser: coarse
    step j reads the weights of fine step j * factor."""

    def __init__(self, base: RelaxedControl, factor: int):
        if base.grid.steps % factor:
            raise ValueError(f"{base.grid.steps} steps not divisible by {factor}")
        super().__init__(TimeGrid(base.grid.T, base.grid.steps // factor), base.n_actions,
                         f"coarse[{base.name}/{factor}]")
        self.base = base
        self.factor = factor

    def weights(self, k, x, states=None):
        return self.base.weights(k * self.factor, x, states)


def tabulate(control, binning: StateBinning) -> TabularRelaxedControl:
    """Tabular relaxed control obtained by evaluating ``control`` at bin centers."""
    mu = as_relaxed(control)
    c = binning.centers
    table = np.stack([mu.weights(k, c) for k in range(mu.grid.steps)])
    return TabularRelaxedControl(mu.grid, table, binning, name=f"tab[{mu.name}]")


# ---------------------------------------------------------------------------
# distance and chattering
# ---------------------------------------------------------------------------

def control_distance(u: StrictControl, v: StrictControl, paths) -> float:
    """Monte Carlo estimate of the product measure P x dt of {u != v}."""
    grid = paths.grid
    if u.grid != grid or v.grid != grid:
        raise ValueError("controls and paths live on different time grids")
    states = paths.states
    total = np.zeros(states.shape[0])
    for k in range(grid.steps):
        x = states[:, k]
        total += grid.dt * (u.indices(k, x, states) != v.indices(k, x, states))
    return float(total.mean())


@dataclass(frozen=True)
class ChatteringSchedule:
    base: RelaxedControl
    m: int

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("chattering needs m >= 1 subdivisions")


class ChatteredControl(StrictControl):
    """Strict control on the m-times refined grid.  Inside coarse step k the
    action a_i occupies a contiguous block of sub-steps whose length is the
    largest-remainder rounding of m * alpha_i, with the weights frozen at the
    state observed at the start of the coarse step."""

    def __init__(self, schedule: ChatteringSchedule):
        base = schedule.base
        super().__init__(base.grid.refine(schedule.m), base.n_actions,
                         f"chatter[{base.name}, m={schedule.m}]")
        self.schedule = schedule

    def indices(self, j, x, states=None):
        m = self.schedule.m
        k, r = divmod(j, m)
        x0 = x if states is None else states[:, k * m]
        w = np.ascontiguousarray(self.schedule.base.weights(k, x0, states), dtype=np.float64)
        return _kernels.chatter_indices(w, m, r)


def chattering(schedule: ChatteringSchedule) -> ChatteredControl:
    return ChatteredControl(schedule)


# ---------------------------------------------------------------------------
# text format
# ---------------------------------------------------------------------------

_FMT = "%.17g"


def control_to_text(mu: TabularRelaxedControl) -> str:
    """Header lines ``key = value`` then CSV rows ``k,bin,w_1,...,w_n``."""
    b = mu.binning
    lines = [
        "# mfrelax relaxed control v1",
        f"T = {_FMT % mu.grid.T}",
        f"steps = {mu.grid.steps}",
        f"n_actions = {mu.n_actions}",
        f"state_lo = {_FMT % b.lo}",
        f"state_hi = {_FMT % b.hi}",
        f"bins = {b.bins}",
        "k,bin," + ",".join(f"w{i + 1}" for i in range(mu.n_actions)),
    ]
    for k in range(mu.grid.steps):
        for j in range(b.bins):
            lines.append(f"{k},{j}," + ",".join(_FMT % w for w in mu.table[k, j]))
    return "\n".join(lines) + "\n"


def control_from_text(text: str) -> TabularRelaxedControl:
    meta = {}
    it = iter(text.splitlines())
    for line in it:
        if line.startswith("#") or not line.strip():
            continue
        if line.startswith("k,bin"):
            break
        key, _, val = line.partition("=")
        meta[key.strip()] = val.strip()
    grid = TimeGrid(float(meta["T"]), int(meta["steps"]))
    binning = StateBinning(float(meta["state_lo"]), float(meta["state_hi"]), int(meta["bins"]))
    n = int(meta["n_actions"])
    table = np.empty((grid.steps, binning.bins, n))
    seen = 0
    for line in it:
        if not line.strip():
            continue
        parts = line.split(",")
        k, j = int(parts[0]), int(parts[1])
        table[k, j] = [float(v) for v in parts[2:]]
        seen += 1
    if seen != grid.steps * binning.bins:
        raise ValueError(f"expected {grid.steps * binning.bins} rows, found {seen}")
    if np.any(table < 0) or np.any(np.abs(table.sum(axis=2) - 1.0) > NORM_TOL):
        raise ValueError("stored weights are not probability vectors")
    return TabularRelaxedControl(grid, table, binning, normalize=False)

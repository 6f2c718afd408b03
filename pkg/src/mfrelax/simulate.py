"""Interacting-particle Euler-Maruyama simulation of the controlled mean-field
SDE, for strict controls and for relaxed controls driven by the finite-action
orthogonal martingale measure

    dX = sum_i b(t, X, E X, a_i) alpha_i dt + sum_i sigma(t, X, E X, a_i) sqrt(alpha_i) dW^i.

E X_t is replaced by the empirical mean of all N particles.  Noise comes from
a counter-based generator with one standard normal per (particle, step,
action), so a strict simulation that draws from the active action's stream
reproduces the relaxed simulation of its Dirac embedding bit for bit, and the
result does not depend on how particles are split across workers.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .controls import RelaxedControl, StrictControl, TimeGrid, as_relaxed, normalize_weights
from .problems import ProblemSpec


class SimulationError(RuntimeError):
    def __init__(self, step, particle, value):
        super().__init__(f"non-finite state {value!r} at step {step}, particle {particle}")
        self.step = step
        self.particle = particle


@dataclass(frozen=True)
class SimConfig:
    particles: int
    grid: TimeGrid
    seed: int = 0
    workers: int = 1
    clamp: float | None = None

    def __post_init__(self):
        if self.particles < 2:
            raise ValueError("need at least two particles")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 bits")

    def with_seed(self, seed: int) -> "SimConfig":
        return SimConfig(self.particles, self.grid, seed, self.workers, self.clamp)


@dataclass
class PathBundle:
    states: np.ndarray        # (N, K+1)
    means: np.ndarray         # (K+1,)
    eff_noise: np.ndarray     # (N, K): sum_i sqrt(alpha_i) dW^i actually applied
    grid: TimeGrid
    seed: int
    n_actions: int
    control: object
    control_id: tuple
    problem: str = "custom"
    kind: str = "relaxed"
    meta: dict = field(default_factory=dict)

    @property
    def particles(self) -> int:
        return self.states.shape[0]

    def increments(self, k: int) -> np.ndarray:
        """Per-action Brownian increments dW^i_k, shape (N, n), regenerated
        from the counter-based stream."""
        z = _kernels.counter_normals_dense(self.seed, k, np.arange(self.particles), self.n_actions)
        return np.sqrt(self.grid.dt) * z

    @property
    def noise(self) -> np.ndarray:
        """All per-action increments, shape (N, K, n).  Memory N*K*n floats."""
        return np.stack([self.increments(k) for k in range(self.grid.steps)], axis=1)


def _chunks(n, workers):
    edges = np.linspace(0, n, min(workers, n) + 1).astype(int)
    return [slice(a, b) for a, b in zip(edges[:-1], edges[1:])]


def _check_finite(x, k, offset=0):
    bad = np.flatnonzero(~np.isfinite(x))
    if bad.size:
        j = bad[0]
        raise SimulationError(k, offset + int(j), float(x[j]))


def _run(spec: ProblemSpec, cfg: SimConfig, step_fn, control, kind):
    grid = cfg.grid
    if abs(grid.T - spec.T) > 1e-12 * spec.T:
        raise ValueError(f"grid horizon {grid.T} != problem horizon {spec.T}")
    if control.grid != grid:
        raise ValueError(f"control grid {control.grid} != simulation grid {grid}")
    if control.n_actions != len(spec.action_grid):
        raise ValueError("control and problem disagree on the number of actions")
    n, K = cfg.particles, grid.steps
    states = np.empty((n, K + 1))
    states[:, 0] = spec.x0
    means = np.empty(K + 1)
    eff = np.empty((n, K))
    chunks = _chunks(n, cfg.workers)
    pool = ThreadPoolExecutor(cfg.workers) if len(chunks) > 1 else None
    try:
        for k in range(K):
            # pairwise-summed mean over the full ensemble, fixed order
            means[k] = np.sum(states[:, k]) / n
            t = grid.t(k)

            def work(sl, k=k, t=t):
                x_new, e = step_fn(k, t, sl, states, means[k])
                if cfg.clamp is not None:
                    x_new = np.clip(x_new, -cfg.clamp, cfg.clamp)
                _check_finite(x_new, k, sl.start)
                states[sl, k + 1] = x_new
                eff[sl, k] = e

            if pool is None:
                for sl in chunks:
                    work(sl)
            else:
                for fut in [pool.submit(work, sl) for sl in chunks]:
                    fut.result()
        means[K] = np.sum(states[:, K]) / n
    finally:
        if pool is not None:
            pool.shutdown()
    return PathBundle(states, means, eff, grid, cfg.seed, len(spec.action_grid), control,
                      control.identity(), spec.name, kind)


def simulate_strict(spec: ProblemSpec, u: StrictControl, cfg: SimConfig) -> PathBundle:
    """Euler-Maruyama under a strict feedback control; particle p at step k
    uses the normal of stream (p, k, u(k, X_k^p))."""
    dt = cfg.grid.dt
    sqrt_dt = np.sqrt(dt)

    def step(k, t, sl, states, m):
        x = states[sl, k]
        idx = u.indices(k, x, states[sl])
        a = spec.actions[idx]
        bb = np.broadcast_to(spec.b(t, x, m, a), x.shape)
        ss = np.broadcast_to(spec.sigma(t, x, m, a), x.shape)
        z = _kernels.counter_normals(cfg.seed, k, np.arange(sl.start, sl.stop), idx)
        dw = sqrt_dt * z
        return x + bb * dt + ss * dw, dw

    return _run(spec, cfg, step, u, "strict")


def simulate_relaxed(spec: ProblemSpec, mu: RelaxedControl, cfg: SimConfig) -> PathBundle:
    """Euler-Maruyama for the relaxed state equation under the finite-action
    martingale measure; only streams of actions with positive weight are drawn."""
    mu = as_relaxed(mu)
    dt = cfg.grid.dt
    sqrt_dt = np.sqrt(dt)

    def step(k, t, sl, states, m):
        x = np.ascontiguousarray(states[sl, k])
        rows, cols, w = mu.support(k, x, states[sl])
        bb = np.ascontiguousarray(spec.at_pairs("b", t, x, m, rows, cols))
        ss = np.ascontiguousarray(spec.at_pairs("sigma", t, x, m, rows, cols))
        z = _kernels.counter_normals(cfg.seed, k, rows + sl.start, cols)
        return _kernels.pair_step(x, rows, np.ascontiguousarray(w), bb, ss, z, dt, sqrt_dt)

    return _run(spec, cfg, step, mu, "relaxed")


# ---------------------------------------------------------------------------
# martingale measure
# ---------------------------------------------------------------------------

@dataclass
class MartingaleMeasurePath:
    """Per-action terminal values M_T^i = sum_k sqrt(alpha_k^i) dW_k^i and
    occupation int_0^T alpha^i dt, both shape (N, n).  The full (N, K, n)
    increments are kept only when requested."""

    terminal: np.ndarray
    occupation: np.ndarray
    grid: TimeGrid
    increments: np.ndarray | None = None

    def totals(self, cells) -> np.ndarray:
        """M_T(B) per particle for a set B of action indices."""
        return self.terminal[:, list(cells)].sum(axis=1)

    def intensity(self, cells) -> np.ndarray:
        """int_0^T sum_{i in B} alpha^i dt per particle (the covariance measure of B)."""
        return self.occupation[:, list(cells)].sum(axis=1)


def martingale_measure(paths: PathBundle, mu: RelaxedControl, keep_increments=False) -> MartingaleMeasurePath:
    mu = as_relaxed(mu)
    n, K, n_act = paths.particles, paths.grid.steps, paths.n_actions
    terminal = np.zeros((n, n_act))
    occupation = np.zeros((n, n_act))
    inc = np.empty((n, K, n_act)) if keep_increments else None
    for k in range(K):
        w = normalize_weights(mu.weights(k, paths.states[:, k], paths.states))
        dm = np.sqrt(w) * paths.increments(k)
        terminal += dm
        occupation += paths.grid.dt * w
        if inc is not None:
            inc[:, k] = dm
    return MartingaleMeasurePath(terminal, occupation, paths.grid, inc)


@dataclass
class CovarianceEstimate:
    value: float
    stderr: float


def orthogonality_check(mmp: MartingaleMeasurePath, cells_b, cells_c) -> CovarianceEstimate:
    """Empirical E[M_T(B) M_T(C)] with its standard error, for disjoint B, C."""
    cells_b, cells_c = set(cells_b), set(cells_c)
    if not cells_b or not cells_c:
        raise ValueError("cell sets must be nonempty")
    if cells_b & cells_c:
        raise ValueError(f"action cells overlap: {sorted(cells_b & cells_c)}")
    prod = mmp.totals(sorted(cells_b)) * mmp.totals(sorted(cells_c))
    return CovarianceEstimate(float(prod.mean()), float(prod.std(ddof=1) / np.sqrt(prod.size)))


def quadratic_variation_check(mmp: MartingaleMeasurePath, cells) -> tuple[CovarianceEstimate, float]:
    """Empirical E[M_T(B)^2] against E int sum_{i in B} alpha^i dt."""
    sq = mmp.totals(sorted(cells)) ** 2
    est = CovarianceEstimate(float(sq.mean()), float(sq.std(ddof=1) / np.sqrt(sq.size)))
    return est, float(mmp.intensity(sorted(cells)).mean())

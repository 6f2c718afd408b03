"""Successive-approximation solver for relaxed controls.

Each iteration simulates the ensemble under the current tabular control,
solves both adjoint equations, and moves the weights of every visited
(time step, state bin) cell toward the action that maximizes the bin-averaged
generalized Hamiltonian:

    weights <- (1 - rho) weights + rho onehot(argmax)

Bins nobody visited at a step copy the update of the nearest visited bin, so
the feedback learned where the ensemble is extends to states it may reach
after the update.

Cells whose current weights already attain that maximum are left alone, so a
control satisfying the pointwise maximum condition is a fixed point.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .adjoint import RegressionBasis, RegressionError, solve_first_order, solve_second_order
from .controls import StateBinning, TabularRelaxedControl, as_relaxed, tabulate
from .cost import estimate_cost
from .problems import ProblemSpec
from .simulate import SimConfig, simulate_relaxed
from .smp import SmpReport, near_optimality_check, smp_residual

log = logging.getLogger(__name__)

SEED_POLICIES = ("fixed", "refresh")
TRACE_COLUMNS = ("iter", "J", "stderr", "residual", "delta", "residual_stderr")


@dataclass(frozen=True)
class OptimizerConfig:
    max_iters: int = 30
    damping: float = 0.5
    tol: float = 1e-4
    basis: RegressionBasis = RegressionBasis()
    seed_policy: str = "fixed"
    binning: StateBinning = StateBinning.centered()
    patience: int = 20

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not 0 < self.damping <= 1:
            raise ValueError(f"damping must lie in (0, 1], got {self.damping}")
        if not self.tol > 0:
            raise ValueError(f"tolerance must be positive, got {self.tol}")
        if self.seed_policy not in SEED_POLICIES:
            raise ValueError(f"seed_policy must be one of {SEED_POLICIES}")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


@dataclass
class OptimizerTrace:
    J: list = field(default_factory=list)
    stderr: list = field(default_factory=list)
    residual: list = field(default_factory=list)
    residual_stderr: list = field(default_factory=list)
    delta: list = field(default_factory=list)     # max L1 weight change of the update
    best_iter: int = -1
    stop_reason: str = ""
    early_stopped: bool = False
    error: str | None = None
    T: float = 1.0

    def __len__(self):
        return len(self.J)

    def rows(self):
        for i in range(len(self)):
            yield (i, self.J[i], self.stderr[i], self.residual[i], self.delta[i], self.residual_stderr[i])


def iteration_seed(seed: int, it: int) -> int:
    """Independent 64-bit seed for iteration ``it`` of the refreshed policy."""
    ss = np.random.SeedSequence(seed, spawn_key=(it,))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _nearest_visited(visited):
    """For every bin, the closest visited bin (ties to the lower one)."""
    vis = np.flatnonzero(visited)
    bins = np.arange(visited.size)
    pos = np.searchsorted(vis, bins)
    left = vis[np.clip(pos - 1, 0, vis.size - 1)]
    right = vis[np.clip(pos, 0, vis.size - 1)]
    return np.where(np.abs(bins - left) <= np.abs(right - bins), left, right)


def _improvement_step(binning, n_bins, bin_targets):
    """Collects, per time step, the bin maximizers of the H-table."""

    def on_step(k, table, sup):
        x_bins = bin_targets["bins"][:, k]
        best, top, counts = _kernels.bin_argmax(x_bins, np.ascontiguousarray(table), n_bins)
        rows, cols, w = sup
        here = np.bincount(rows, weights=w * table[rows, cols], minlength=table.shape[0])
        cur = np.bincount(x_bins, weights=here, minlength=n_bins) / np.maximum(counts, 1)
        gain = top - cur
        move = (counts > 0) & (gain > 1e-12 * (1.0 + np.abs(top)))
        near = _nearest_visited(counts > 0)
        bin_targets["best"][k] = best[near]
        bin_targets["move"][k] = move[near]

    return on_step


def optimize(spec: ProblemSpec, init, cfg: OptimizerConfig, sim: SimConfig):
    """Returns (best-J control, trace)."""
    binning = cfg.binning
    init = as_relaxed(init)
    mu = init if isinstance(init, TabularRelaxedControl) and init.binning == binning \
        else tabulate(init, binning)
    if mu.grid != sim.grid:
        raise ValueError("initial control grid does not match the simulation grid")
    K, n_bins, n_act = sim.grid.steps, binning.bins, len(spec.action_grid)
    trace = OptimizerTrace(T=sim.grid.T)
    best_mu, best_j, stale = mu, np.inf, 0

    for it in range(cfg.max_iters):
        run_cfg = sim if cfg.seed_policy == "fixed" else sim.with_seed(iteration_seed(sim.seed, it))
        paths = simulate_relaxed(spec, mu, run_cfg)
        cost = estimate_cost(spec, paths, mu)
        targets = {"bins": binning.index(paths.states),
                   "best": np.zeros((K, n_bins), dtype=np.int64),
                   "move": np.zeros((K, n_bins), dtype=bool)}
        try:
            a1 = solve_first_order(spec, paths, mu, cfg.basis)
            a2 = solve_second_order(spec, paths, mu, a1, cfg.basis)
        except RegressionError as exc:
            trace.error = f"iteration {it}: {exc}"
            trace.stop_reason = "adjoint failure"
            log.warning("optimizer aborted: %s", trace.error)
            break
        report = smp_residual(spec, paths, mu, a1, a2, on_step=_improvement_step(binning, n_bins, targets))

        trace.J.append(cost.value)
        trace.stderr.append(cost.stderr)
        trace.residual.append(report.global_residual)
        trace.residual_stderr.append(report.global_stderr)
        if cost.value < best_j:
            best_mu, best_j, trace.best_iter, stale = mu, cost.value, it, 0
        else:
            stale += 1
        log.info("iter %d  J=%.6g +- %.2g  residual=%.3g", it, cost.value, cost.stderr,
                 report.global_residual)

        if report.global_residual <= cfg.tol:
            trace.delta.append(0.0)
            trace.stop_reason = "converged"
            break
        if stale >= cfg.patience:
            trace.delta.append(0.0)
            trace.stop_reason = "no improvement"
            trace.early_stopped = True
            break

        table = mu.table.copy()
        move = targets["move"]
        onehot = np.zeros((K, n_bins, n_act))
        np.put_along_axis(onehot, targets["best"][:, :, None], 1.0, axis=2)
        rho = cfg.damping
        table[move] = (1.0 - rho) * table[move] + rho * onehot[move]
        trace.delta.append(float(np.abs(table - mu.table).sum(axis=2).max()))
        mu = TabularRelaxedControl(sim.grid, table, binning, name=f"{init.name}@{it + 1}")
    else:
        trace.stop_reason = "max_iters"
    return best_mu, trace


@dataclass
class SequenceSummary:
    best_so_far: np.ndarray
    residual: np.ndarray
    epsilon: np.ndarray
    near_opt: np.ndarray       # per-iteration pass/fail
    final_J: float
    final_residual: float


def minimizing_sequence_report(trace: OptimizerTrace, reference_value: float | None = None):
    """Best-so-far cost curve and the near-optimality check at each iteration.

    epsilon_i = max(0, J_i - reference), where the reference defaults to the
    best cost seen in the run.
    """
    if len(trace) == 0:
        raise ValueError("trace is empty")
    J = np.asarray(trace.J)
    ref = J.min() if reference_value is None else reference_value
    eps = np.maximum(0.0, J - ref)
    ok = []
    for i in range(len(trace)):
        rep = SmpReport(trace.residual[i], trace.residual_stderr[i], np.nan, np.nan, -1,
                        np.empty(0), np.nan, trace.T)
        ok.append(near_optimality_check(rep, eps[i]).passed)
    return SequenceSummary(np.minimum.accumulate(J), np.asarray(trace.residual), eps,
                           np.asarray(ok), float(J[-1]), float(trace.residual[-1]))

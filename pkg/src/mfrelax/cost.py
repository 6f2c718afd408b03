"""Monte Carlo cost estimates and the chattering value-gap experiment."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .controls import (ChatteringSchedule, CoarsenedRelaxedControl, RelaxedControl, as_relaxed,
                       chattering, constant_control)
from .problems import ProblemSpec
from .simulate import PathBundle, SimConfig, simulate_relaxed, simulate_strict


@dataclass
class CostEstimate:
    value: float
    stderr: float
    particles: int
    steps: int
    per_particle: np.ndarray

    def __repr__(self):
        return f"CostEstimate({self.value:.6g} +- {self.stderr:.2g}, N={self.particles}, K={self.steps})"


def _check_same_control(paths: PathBundle, control):
    if as_relaxed(control).identity() != paths.control_id:
        raise ValueError(f"paths were simulated under {paths.control!r}, not {control!r}")


def particle_costs(spec: ProblemSpec, paths: PathBundle, control) -> np.ndarray:
    """Per particle: sum_k dt sum_i h(t_k, X_k, m_k, a_i) alpha_i + g(X_K, m_K)."""
    _check_same_control(paths, control)
    mu = as_relaxed(control)
    grid = paths.grid
    states, means = paths.states, paths.means
    acc = np.zeros(paths.particles)
    for k in range(grid.steps):
        x = states[:, k]
        acc += grid.dt * spec.view(grid.t(k), x, means[k], mu.support(k, x, states))("h")
    return acc + spec.terminal("g", states[:, -1], means[-1])


def estimate_cost(spec: ProblemSpec, paths: PathBundle, control) -> CostEstimate:
    c = particle_costs(spec, paths, control)
    n = c.size
    return CostEstimate(float(c.mean()), float(c.std(ddof=1) / np.sqrt(n)), n, paths.grid.steps, c)


def simulate(spec: ProblemSpec, control, cfg: SimConfig) -> PathBundle:
    if isinstance(control, RelaxedControl):
        return simulate_relaxed(spec, control, cfg)
    return simulate_strict(spec, control, cfg)


@dataclass
class GapRow:
    m: int
    j_chatter: float
    se_chatter: float
    j_relaxed: float
    se_relaxed: float
    gap: float
    gap_stderr: float


GAP_COLUMNS = ("m", "J_chatter", "stderr_chatter", "J_relaxed", "stderr_relaxed", "gap", "gap_stderr")


def chattered_strict(mu: RelaxedControl, blocks: int):
    """Strict control on ``mu``'s grid switching inside each of ``blocks``
    equal time blocks, following the weights at the block start."""
    steps = mu.grid.steps
    if steps % blocks:
        raise ValueError(f"grid of {steps} steps cannot be split into {blocks} blocks")
    coarse = CoarsenedRelaxedControl(mu, steps // blocks)
    return chattering(ChatteringSchedule(coarse, steps // blocks))


def value_gap_experiment(spec: ProblemSpec, mu: RelaxedControl, m_list, cfg: SimConfig) -> list[GapRow]:
    """|J(chattered) - J(mu)| for each number m of switching blocks over [0, T].

    All simulations share the seed, so the strict and relaxed runs use common
    random numbers (the strict run reads the active action's stream).
    """
    m_list = list(m_list)
    if not m_list or any(b <= a for a, b in zip(m_list, m_list[1:])):
        raise ValueError("m_list must be nonempty and strictly increasing")
    mu = as_relaxed(mu)
    relaxed_paths = simulate_relaxed(spec, mu, cfg)
    c_rel = particle_costs(spec, relaxed_paths, mu)
    n = c_rel.size
    j_rel, se_rel = c_rel.mean(), c_rel.std(ddof=1) / np.sqrt(n)
    rows = []
    for m in m_list:
        u = chattered_strict(mu, m)
        paths = simulate_strict(spec, u, cfg)
        c = particle_costs(spec, paths, u)
        diff = c - c_rel
        rows.append(GapRow(m, float(c.mean()), float(c.std(ddof=1) / np.sqrt(n)), float(j_rel),
                           float(se_rel), float(abs(diff.mean())), float(diff.std(ddof=1) / np.sqrt(n))))
    return rows


def cost_scale(spec: ProblemSpec, j_relaxed: float, cfg: SimConfig) -> float:
    """max(|J(mu)|, smallest cost among constant strict controls)."""
    best = np.inf
    for i in range(len(spec.action_grid)):
        u = constant_control(cfg.grid, len(spec.action_grid), i)
        best = min(best, estimate_cost(spec, simulate_strict(spec, u, cfg), u).value)
    return max(abs(j_relaxed), best)

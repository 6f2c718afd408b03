"""Hamiltonian, generalized Hamiltonian and maximum-principle residuals.

    H(t, x, y, a, p, q)  = b p + sigma q - h
    calH(a)              = H(t, x, y, a, p, q - P sigma_bar) - sigma(a)^2 P / 2

where sigma_bar is the control-weighted diffusion at the reference state.  At
a measure the generalized Hamiltonian is the weight average over actions.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adjoint import AdjointFirst, AdjointSecond
from .controls import as_relaxed
from .cost import _check_same_control
from .problems import ProblemSpec
from .simulate import PathBundle


def _finite(name, *arrays):
    for v in arrays:
        if not np.all(np.isfinite(v)):
            raise ValueError(f"non-finite input to {name}")


def _ham(spec, t, x, y, a, p, q):
    return spec.b(t, x, y, a) * p + spec.sigma(t, x, y, a) * q - spec.h(t, x, y, a)


def _hfun(spec, t, x, y, a, p, q, P, sigma_bar):
    # b p + s (q - P sigma_bar) - h - s^2 P / 2, with sigma evaluated once
    s = spec.sigma(t, x, y, a)
    return spec.b(t, x, y, a) * p + s * (q - P * sigma_bar - 0.5 * s * P) - spec.h(t, x, y, a)


def hamiltonian(spec: ProblemSpec, t, x, y, a, p, q):
    """b p + sigma q - h, broadcast over all arguments."""
    _finite("hamiltonian", t, x, y, a, p, q)
    return _ham(spec, t, x, y, a, p, q)


def h_function(spec: ProblemSpec, t, x, y, a, p, q, P, sigma_bar):
    """Generalized Hamiltonian at action(s) ``a`` around the reference state."""
    _finite("h_function", t, x, y, a, p, q, P, sigma_bar)
    return _hfun(spec, t, x, y, a, p, q, P, sigma_bar)


def h_function_table(spec: ProblemSpec, t, x, y, p, q, P, sigma_bar):
    """Generalized Hamiltonian for every particle (rows) and grid action (cols)."""
    col = lambda v: np.asarray(v, dtype=np.float64)[:, None]
    a = spec.actions[None, :]
    out = _hfun(spec, t, col(x), y, a, col(p), col(q), col(P), col(sigma_bar))
    out = np.broadcast_to(out, (np.size(x), a.shape[1]))
    _finite("h_function_table", out)
    return out


def at_measure(table, weights):
    """sum_i weights_i calH(a_i) row by row."""
    return np.einsum("ij,ij->i", np.asarray(weights, dtype=np.float64), table)


@dataclass
class NearOptCheck:
    passed: bool
    epsilon: float
    bound: float          # T eps^(1/3)
    threshold: float      # bound + 3 stderr

    def __bool__(self):
        return self.passed


@dataclass
class SmpReport:
    global_residual: float        # E int [max_a calH(a) - calH(mu)] dt
    global_stderr: float
    constant_action_residual: float   # max_a E int [calH(a) - calH(mu)] dt
    constant_action_stderr: float
    best_constant_action: int
    per_time_violation: np.ndarray    # max_a mean calH(a) - mean calH(mu), per step
    range_scale: float            # E int [max_a calH - min_a calH] dt
    T: float
    near_opt: NearOptCheck | None = field(default=None)

    @property
    def stderr(self):
        return self.global_stderr

    @property
    def normalized(self) -> float:
        if self.range_scale <= 0:
            return 0.0 if self.global_residual <= 0 else np.inf
        return self.global_residual / self.range_scale

    def integrated_violation(self, dt) -> float:
        return float(dt * np.maximum(self.per_time_violation, 0.0).sum())


def smp_residual(spec: ProblemSpec, paths: PathBundle, control, adj1: AdjointFirst,
                 adj2: AdjointSecond, on_step=None) -> SmpReport:
    """Maximum-principle residuals of ``control`` along ``paths``.

    ``on_step(k, table, support)``, if given, sees each per-step table of the
    generalized Hamiltonian (particles x actions) and the control's
    (rows, cols, weights) support.
    """
    _check_same_control(paths, control)
    shape = paths.states.shape
    if adj1.p.shape != shape or adj2.P.shape != shape:
        raise ValueError("adjoints were not solved on these paths")
    mu = as_relaxed(control)
    grid, states, means = paths.grid, paths.states, paths.means
    n_part, K, n_act = paths.particles, grid.steps, len(spec.action_grid)
    dt = grid.dt

    gap = np.zeros(n_part)
    spread = np.zeros(n_part)
    per_action = np.zeros((n_part, n_act))
    violation = np.empty(K)
    for k in range(K):
        t, x, m = grid.t(k), states[:, k], means[k]
        sup = mu.support(k, x, states)
        view = spec.view(t, x, m, sup)
        table = h_function_table(spec, t, x, m, adj1.p[:, k], adj1.q[:, k], adj2.P[:, k],
                                 view("sigma"))
        here = view.sum(table[sup[0], sup[1]])
        top = table.max(axis=1)
        gap += dt * (top - here)
        spread += dt * (top - table.min(axis=1))
        per_action += dt * (table - here[:, None])
        violation[k] = np.max(np.sum(table, axis=0) / n_part) - np.sum(here) / n_part
        if on_step is not None:
            on_step(k, table, sup)

    sqrt_n = np.sqrt(n_part)
    const_means = per_action.sum(axis=0) / n_part
    best = int(np.argmax(const_means))
    return SmpReport(
        global_residual=float(np.sum(gap) / n_part),
        global_stderr=float(gap.std(ddof=1) / sqrt_n),
        constant_action_residual=float(const_means[best]),
        constant_action_stderr=float(per_action[:, best].std(ddof=1) / sqrt_n),
        best_constant_action=best,
        per_time_violation=violation,
        range_scale=float(np.sum(spread) / n_part),
        T=grid.T,
    )


def near_optimality_check(report: SmpReport, epsilon: float) -> NearOptCheck:
    """Pass iff residual <= T eps^(1/3) + 3 stderr.  Also stored on ``report``."""
    if not epsilon >= 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    bound = report.T * float(epsilon) ** (1.0 / 3.0)
    threshold = bound + 3.0 * report.global_stderr
    check = NearOptCheck(bool(report.global_residual <= threshold), float(epsilon), bound, threshold)
    report.near_opt = check
    return check

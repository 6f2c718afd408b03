"""Backward regression solvers for the first- and second-order adjoint
equations along a simulated particle ensemble.

First order (mean-field):
    dp = -[bx p + E(by p) + sx q + E(sy q) - hx - E(hy)] dt + q dW + dM,
    p(T) = -gx - E(gy)
Second order:
    dP = -[2 bx P + sx^2 P + 2 sx Q + Hxx] dt + Q dW + dN,   P(T) = -gxx
with Hxx = bxx p + sxx q - hxx.  Every coefficient is averaged against the
relaxed weights; the squared term uses the weighted average of sx^2.

Scheme, for k = K-1 .. 0, with B(x) polynomials of the centered, scaled state
and dW_k the effective increment sum_i sqrt(alpha_i) dW^i_k that drove X:
    regress y_{k+1} on [B(X_k), B(X_k) dW_k]; the dW_k part is q_k dW_k
    y_k = E_k[y_{k+1} + driver(t_k, X_k, y_{k+1}, q_k) dt - q_k dW_k]
The last regression residual is the discrete increment of the orthogonal
martingale; it has zero ensemble mean because the basis holds the constant.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .controls import as_relaxed
from .cost import _check_same_control
from .problems import ProblemSpec
from .simulate import PathBundle


class RegressionError(RuntimeError):
    pass


@dataclass(frozen=True)
class RegressionBasis:
    degree: int = 2
    ridge: float | None = None     # None -> 1e-8 * N
    max_condition: float = 1e10

    def __post_init__(self):
        if self.degree < 1:
            raise ValueError("basis degree must be >= 1")
        if self.ridge is not None and self.ridge < 0:
            raise ValueError("ridge must be nonnegative")


class _Projector:
    """Least-squares projections onto span{1, z, ..., z^d}, z = (x - mean)/std,
    and onto that span joined with its product by a normalized increment.

    The intercept is never penalized, so constants are reproduced exactly.
    Degenerate ensembles (all states equal) fall back to the constant alone.
    """

    def __init__(self, x, xi, basis: RegressionBasis, step):
        n = x.size
        mean = np.sum(x) / n
        sd = np.sqrt(np.sum((x - mean) ** 2) / n)
        if sd <= 1e-12 * (1.0 + abs(mean)):
            A = np.ones((n, 1))
        else:
            A = np.vander((x - mean) / sd, basis.degree + 1, increasing=True)
        self.A = A
        self.J = np.hstack([A, A * xi[:, None]])
        lam = 1e-8 * n if basis.ridge is None else basis.ridge
        # ridge-augmented normal equations; the intercept is not penalized
        G = self.J.T @ self.J
        G[np.arange(1, G.shape[0]), np.arange(1, G.shape[0])] += lam
        ev = np.linalg.eigvalsh(G)
        self.condition = float(np.sqrt(ev[-1] / ev[0])) if ev[0] > 0 else np.inf
        if not self.condition <= basis.max_condition:
            raise RegressionError(f"regression at step {step} is ill-conditioned "
                                  f"(condition number {self.condition:.3g})")
        p = A.shape[1]
        self.G = G
        self.GA = G[:p, :p]

    def __call__(self, y):
        return self.A @ np.linalg.solve(self.GA, self.A.T @ y)

    def slope(self, y):
        """Fitted coefficient function of the increment in the joint regression."""
        c = np.linalg.solve(self.G, self.J.T @ y)
        return self.A @ c[self.A.shape[1]:]


def _mean(v):
    return np.sum(v) / v.size


def _check_finite(name, v, k):
    if not np.all(np.isfinite(v)):
        raise RegressionError(f"non-finite {name} at step {k}")


@dataclass
class AdjointDiagnostics:
    residual_mean: np.ndarray     # per-step mean of the martingale increment
    residual_stderr: np.ndarray
    conditions: np.ndarray        # per-step condition number of the design
    target_scale: np.ndarray      # per-step max |regression target|, sets the rounding floor
    sup_norm: float               # E sup_k |y_k|^2
    q_energy: float               # E sum_k q_k^2 dt

    def martingale_ok(self, z=3.0) -> bool:
        floor = 1e-12 * (1.0 + self.target_scale)
        return bool(np.all(np.abs(self.residual_mean) <= z * self.residual_stderr + floor))


@dataclass
class AdjointFirst:
    p: np.ndarray                 # (N, K+1)
    q: np.ndarray                 # (N, K)
    residual_qv: float            # E [M, M]_T
    diagnostics: AdjointDiagnostics = field(repr=False)


@dataclass
class AdjointSecond:
    P: np.ndarray
    Q: np.ndarray
    residual_qv: float
    diagnostics: AdjointDiagnostics = field(repr=False)


def _backward(terminal, driver, paths, basis):
    grid = paths.grid
    K = grid.steps
    dt = grid.dt
    sqrt_dt = np.sqrt(dt)
    n = paths.particles
    y = np.empty((n, K + 1))
    z = np.empty((n, K))
    y[:, K] = terminal
    res_mean = np.empty(K)
    res_se = np.empty(K)
    conds = np.empty(K)
    scale = np.empty(K)
    qv = np.zeros(n)
    for k in range(K - 1, -1, -1):
        dw = paths.eff_noise[:, k]
        proj = _Projector(paths.states[:, k], dw / sqrt_dt, basis, k)
        conds[k] = proj.condition
        nxt = y[:, k + 1]
        z[:, k] = proj.slope(nxt) / sqrt_dt
        f = driver(k, nxt, z[:, k])
        target = nxt + f * dt - z[:, k] * dw
        y[:, k] = proj(target)
        _check_finite("adjoint", y[:, k], k)
        _check_finite("adjoint martingale integrand", z[:, k], k)
        inc = target - y[:, k]
        scale[k] = np.max(np.abs(target))
        qv += inc**2
        res_mean[k] = _mean(inc)
        res_se[k] = inc.std(ddof=1) / np.sqrt(n)
    diag = AdjointDiagnostics(res_mean, res_se, conds, scale,
                              float(np.mean(np.max(y**2, axis=1))),
                              float(np.mean(np.sum(z**2, axis=1) * dt)))
    return y, z, float(qv.mean()), diag


def solve_first_order(spec: ProblemSpec, paths: PathBundle, control,
                      basis: RegressionBasis = RegressionBasis()) -> AdjointFirst:
    _check_same_control(paths, control)
    mu = as_relaxed(control)
    grid, states, means = paths.grid, paths.states, paths.means
    xT, mT = states[:, -1], means[-1]
    terminal = -spec.terminal("g_x", xT, mT) - _mean(spec.terminal("g_y", xT, mT))

    def driver(k, p_next, q):
        t, x, m = grid.t(k), states[:, k], means[k]
        bar = spec.view(t, x, m, mu.support(k, x, states))
        bx, by, sx, sy = bar("b_x"), bar("b_y"), bar("sigma_x"), bar("sigma_y")
        hx, hy = bar("h_x"), bar("h_y")
        return (bx * p_next + _mean(by * p_next) + sx * q + _mean(sy * q)
                - hx - _mean(hy))

    p, q, qv, diag = _backward(terminal, driver, paths, basis)
    return AdjointFirst(p, q, qv, diag)


def solve_second_order(spec: ProblemSpec, paths: PathBundle, control, first: AdjointFirst,
                       basis: RegressionBasis = RegressionBasis()) -> AdjointSecond:
    _check_same_control(paths, control)
    if first.p.shape != paths.states.shape:
        raise ValueError("first-order adjoint was not solved on these paths")
    mu = as_relaxed(control)
    grid, states, means = paths.grid, paths.states, paths.means
    terminal = -spec.terminal("g_xx", states[:, -1], means[-1])

    def driver(k, P_next, Q):
        t, x, m = grid.t(k), states[:, k], means[k]
        bar = spec.view(t, x, m, mu.support(k, x, states))
        bx = bar("b_x")
        sx_vals = bar.values("sigma_x")
        sx, sx2 = bar.sum(sx_vals), bar.sum(sx_vals**2)
        hxx = bar("b_xx") * first.p[:, k] + bar("sigma_xx") * first.q[:, k] - bar("h_xx")
        return 2.0 * bx * P_next + sx2 * P_next + 2.0 * sx * Q + hxx

    P, Q, qv, diag = _backward(terminal, driver, paths, basis)
    return AdjointSecond(P, Q, qv, diag)

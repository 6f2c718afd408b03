"""Deterministic Riccati oracle for the mean-field LQ benchmark.

Splitting X = (X - E X) + E X decouples the problem into a centered part with
gain K(t) and a mean part with gain Kbar(t):

    -K'    = 2 a1 K        - (b0^2/r) K^2    + qx,        K(T)    = gx
    -Kbar' = 2 (a1+a2) Kbar - (b0^2/r) Kbar^2 + qx + qy,  Kbar(T) = gx + gy

The optimal feedback is u = -(b0/r) (K (x - m) + Kbar m), the first-order
adjoint is p = -(K (x - m) + Kbar m), and the second-order adjoint solves the
linear equation -P' = 2 a1 P - qx, P(T) = -gx.
"""
from __future__ import annotations

import numpy as np

from .controls import FeedbackControl, FeedbackRelaxedControl, TimeGrid
from .problems import ActionGrid, LqParams


def rk4_backward(rhs, y_T, T, n):
    """Integrate y' = rhs(t, y) from T down to 0 with n RK4 steps.

    Returns node times and values, both ordered from t=0 to t=T.
    """
    h = -T / n
    t = T
    y = float(y_T)
    ts = [t]
    ys = [y]
    for _ in range(n):
        k1 = rhs(t, y)
        k2 = rhs(t + h / 2, y + h / 2 * k1)
        k3 = rhs(t + h / 2, y + h / 2 * k2)
        k4 = rhs(t + h, y + h * k3)
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        t = t + h
        ts.append(t)
        ys.append(y)
    return np.array(ts[::-1]), np.array(ys[::-1])


class LqRiccatiOracle:
    """Riccati gains, mean path, adjoints and value of the LQ benchmark,
    sampled on the nodes of ``grid`` (RK4 runs ``refine`` times finer)."""

    def __init__(self, params: LqParams, grid: TimeGrid, refine: int = 10):
        self.params = p = params
        self.grid = grid
        n = grid.steps * refine
        beta = p.b0**2 / p.r
        _, K = rk4_backward(lambda t, k: -(2 * p.a1 * k - beta * k * k + p.qx), p.gx, p.T, n)
        _, Kb = rk4_backward(
            lambda t, k: -(2 * (p.a1 + p.a2) * k - beta * k * k + p.qx + p.qy), p.gx + p.gy, p.T, n)
        _, Pi = rk4_backward(lambda t, v: -(2 * p.a1 * v + p.qx), p.gx, p.T, n)
        self.K = K[::refine].copy()
        self.Kbar = Kb[::refine].copy()
        self.Pi = Pi[::refine].copy()

        # mean ODE m' = (a1 + a2 - beta Kbar) m solved as an exponential of the
        # trapezoid-integrated rate
        h = p.T / n
        rate = p.a1 + p.a2 - beta * Kb
        log_growth = np.concatenate(([0.0], np.cumsum(0.5 * h * (rate[1:] + rate[:-1]))))
        m = p.x0 * np.exp(log_growth)
        self.mean = m[::refine].copy()
        # value: 1/2 Kbar(0) x0^2 + 1/2 s0^2 int_0^T K dt (Simpson on the fine grid)
        w = np.ones(n + 1)
        w[1:-1:2] = 4.0
        w[2:-1:2] = 2.0
        self.value = 0.5 * Kb[0] * p.x0**2 + 0.5 * p.s0**2 * (h / 3) * np.dot(w, K)

    def feedback(self, k, x, gain_scale=1.0):
        """Clamped optimal feedback at grid node k, using the oracle mean path."""
        p = self.params
        m = self.mean[k]
        u = -(p.b0 / p.r) * gain_scale * (self.K[k] * (x - m) + self.Kbar[k] * m)
        return np.clip(u, -p.u_max, p.u_max)

    def costate(self, k, x, m):
        return -(self.K[k] * (x - m) + self.Kbar[k] * m)

    def second_order(self, k):
        return -self.Pi[k]

    def control(self, actions: ActionGrid, gain_scale=1.0) -> FeedbackControl:
        """Strict control picking the grid action nearest the clamped feedback."""
        def rule(k, x):
            return actions.nearest(self.feedback(k, x, gain_scale))

        return FeedbackControl(self.grid, len(actions), rule, name=f"lq-oracle(gain={gain_scale!r})")

    def mixture(self, actions: ActionGrid) -> FeedbackRelaxedControl:
        """Relaxed control mixing the two grid actions that bracket the
        feedback, so the mixed action equals the clamped feedback exactly."""
        a = actions.actions
        n = a.size

        def rule(k, x):
            u = self.feedback(k, x)
            hi = np.clip(np.searchsorted(a, u, side="right"), 1, n - 1)
            lo = hi - 1
            w_hi = np.clip((u - a[lo]) / (a[hi] - a[lo]), 0.0, 1.0)
            w = np.zeros((np.size(x), n))
            rows = np.arange(np.size(x))
            w[rows, lo] = 1.0 - w_hi
            w[rows, hi] += w_hi
            return w

        return FeedbackRelaxedControl(self.grid, n, rule, name="lq-oracle-mixture")

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from mfrelax import LqParams, LqRiccatiOracle, SimConfig, TimeGrid, estimate_cost, make_lq_meanfield, simulate_relaxed


def scipy_riccati(a, beta, q, terminal, T, t_eval):
    sol = solve_ivp(lambda t, k: -(2 * a * k - beta * k * k + q), (T, 0.0), [terminal],
                    t_eval=t_eval[::-1], rtol=1e-12, atol=1e-14)
    return sol.y[0][::-1]


def test_gains_match_an_independent_ode_solver():
    p = LqParams()
    g = TimeGrid(1.0, 50)
    orc = LqRiccatiOracle(p, g)
    beta = p.b0**2 / p.r
    K = scipy_riccati(p.a1, beta, p.qx, p.gx, p.T, g.nodes)
    Kb = scipy_riccati(p.a1 + p.a2, beta, p.qx + p.qy, p.gx + p.gy, p.T, g.nodes)
    np.testing.assert_allclose(orc.K, K, rtol=1e-9)
    np.testing.assert_allclose(orc.Kbar, Kb, rtol=1e-9)


def test_gain_closed_form_without_drift_or_running_cost():
    # a1 = qx = 0, b0 = r = 1: K(t) = gx / (1 + gx (T - t))
    p = LqParams(a1=0.0, a2=0.0, qx=0.0, qy=0.0, gx=2.0, gy=0.0)
    g = TimeGrid(1.0, 40)
    orc = LqRiccatiOracle(p, g)
    np.testing.assert_allclose(orc.K, 2.0 / (1 + 2.0 * (1 - g.nodes)), rtol=1e-10)
    np.testing.assert_allclose(orc.Pi, 2.0, rtol=1e-12)


def test_value_matches_deterministic_limit():
    # s0 = 0: the value is 1/2 Kbar(0) x0^2
    p = LqParams(s0=0.0)
    orc = LqRiccatiOracle(p, TimeGrid(1.0, 100))
    assert orc.value == pytest.approx(0.5 * orc.Kbar[0] * p.x0**2, rel=1e-14)


def test_mixture_reproduces_clamped_feedback_in_the_mean(lq_params):
    spec = make_lq_meanfield(lq_params)
    g = TimeGrid(1.0, 20)
    orc = LqRiccatiOracle(lq_params, g)
    mu = orc.mixture(spec.action_grid)
    x = np.linspace(-5, 5, 101)
    for k in (0, 7, 19):
        w = mu.weights(k, x)
        assert np.all((w > 0).sum(axis=1) <= 2)
        np.testing.assert_allclose(w @ spec.actions, orc.feedback(k, x), atol=1e-12)


def test_mixture_cost_near_value(lq_params, grid200, lq_oracle):
    spec = make_lq_meanfield(lq_params)
    mu = lq_oracle.mixture(spec.action_grid)
    est = estimate_cost(spec, simulate_relaxed(spec, mu, SimConfig(10_000, grid200, seed=1)), mu)
    assert abs(est.value - lq_oracle.value) <= 0.02 * lq_oracle.value

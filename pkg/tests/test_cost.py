import numpy as np
import pytest

from mfrelax import (ActionGrid, FeedbackControl, LqParams, LqRiccatiOracle, ProblemSpec, SimConfig,
                     TimeGrid, constant_control, constant_relaxed, cost_scale, delta_embedding,
                     estimate_cost, make_chattering_problem, make_lq_meanfield, simulate_relaxed,
                     simulate_strict, value_gap_experiment)
from mfrelax.cost import chattered_strict
from mfrelax.problems import ZERO, constant


def chatter_gap_oracle(m, steps, kappa=0.0):
    """Exact left-rectangle cost of the deterministic triangle wave: each of the
    m blocks spends S = steps/(2m) steps going down at speed 1 and S steps back."""
    S = steps // (2 * m)
    dt = 1.0 / steps
    return (1 + kappa) * m * dt**3 * (2 * S**3 + S) / 3


def triangle_wave_cost(m, steps):
    """Same quantity by direct summation of the Euler recursion."""
    dt = 1.0 / steps
    block = steps // m
    x, total = 0.0, 0.0
    for k in range(steps):
        total += dt * x * x
        x += (-1.0 if (k % block) < block // 2 else 1.0) * dt
    return total


def test_constant_running_cost():
    spec = ProblemSpec(T=1.0, x0=0.3, action_grid=ActionGrid(np.array([0.0])), b=ZERO,
                       sigma=constant(0.5), h=constant(1.0), g=ZERO)
    g = TimeGrid(1.0, 10)
    u = constant_control(g, 1, 0)
    est = estimate_cost(spec, simulate_strict(spec, u, SimConfig(20, g, seed=1)), u)
    assert est.value == pytest.approx(1.0, abs=1e-15)
    assert est.stderr <= 1e-15


def test_frozen_paths_terminal_cost():
    spec = ProblemSpec(T=1.0, x0=0.3, action_grid=ActionGrid(np.array([0.0])), b=ZERO, sigma=ZERO,
                       h=ZERO, g=lambda x, y: x**2)
    g = TimeGrid(1.0, 10)
    u = constant_control(g, 1, 0)
    est = estimate_cost(spec, simulate_strict(spec, u, SimConfig(20, g)), u)
    assert est.value == pytest.approx(0.3**2, rel=1e-15) and est.stderr <= 1e-16


def test_lq_oracle_cost(lq_params, lq_spec, grid200, lq_oracle):
    u = lq_oracle.control(lq_spec.action_grid)
    est = estimate_cost(lq_spec, simulate_strict(lq_spec, u, SimConfig(10_000, grid200, seed=3)), u)
    assert abs(est.value - lq_oracle.value) <= 0.02 * lq_oracle.value


def test_paths_must_match_control():
    spec = make_chattering_problem(0.1)
    g = TimeGrid(1.0, 4)
    paths = simulate_strict(spec, constant_control(g, 2, 0), SimConfig(5, g))
    with pytest.raises(ValueError, match="simulated under"):
        estimate_cost(spec, paths, constant_control(g, 2, 0))


def test_delta_embedding_cost_is_bit_identical():
    spec = make_lq_meanfield(LqParams())
    g = TimeGrid(1.0, 40)
    u = FeedbackControl(g, 41, lambda k, x: np.clip((x * 10 + 20).astype(int), 0, 40))
    cfg = SimConfig(500, g, seed=4)
    a = estimate_cost(spec, simulate_strict(spec, u, cfg), u)
    mu = delta_embedding(u)
    b = estimate_cost(spec, simulate_relaxed(spec, mu, cfg), mu)
    assert a.value == b.value and a.stderr == b.stderr


@pytest.mark.parametrize("kappa", [0.0, 1.5])
def test_deterministic_chattering_gaps_match_oracle(kappa):
    spec = make_chattering_problem(0.0, kappa)
    g = TimeGrid(1.0, 256)
    rows = value_gap_experiment(spec, constant_relaxed(g, [0.5, 0.5]), [8, 16, 32, 64], SimConfig(4, g))
    gaps = [r.gap for r in rows]
    for r in rows:
        assert r.j_relaxed == 0.0
        assert abs(r.gap - chatter_gap_oracle(r.m, 256, kappa)) <= 1e-10
        assert abs(r.gap - (1 + kappa) * triangle_wave_cost(r.m, 256)) <= 1e-12
    assert all(b < a for a, b in zip(gaps, gaps[1:]))


def test_delta_control_has_zero_gap():
    spec = make_chattering_problem(0.3)
    g = TimeGrid(1.0, 64)
    mu = constant_relaxed(g, [0.0, 1.0])
    rows = value_gap_experiment(spec, mu, [2, 8, 32], SimConfig(200, g, seed=2))
    assert all(r.gap == 0.0 for r in rows)


def test_gap_arguments():
    spec = make_chattering_problem(0.0)
    g = TimeGrid(1.0, 64)
    mu = constant_relaxed(g, [0.5, 0.5])
    for bad in ([], [8, 8], [16, 8]):
        with pytest.raises(ValueError):
            value_gap_experiment(spec, mu, bad, SimConfig(2, g))
    with pytest.raises(ValueError, match="blocks"):
        chattered_strict(mu, 5)


def test_cost_scale_on_chattering():
    spec = make_chattering_problem(0.0)
    g = TimeGrid(1.0, 100)
    # constant +-1: cost = sum_k dt (k dt)^2
    expect = np.sum(g.nodes[:-1] ** 2) * g.dt
    assert cost_scale(spec, 0.0, SimConfig(2, g)) == pytest.approx(expect, rel=1e-12)
    assert cost_scale(spec, -5.0, SimConfig(2, g)) == 5.0


def test_cost_continuity_along_shrinking_disagreement(lq_params, lq_spec):
    # v_j agrees with the oracle except on [0, 2^-j); d(u, v_j) -> 0
    g = TimeGrid(1.0, 128)
    orc = LqRiccatiOracle(lq_params, g)
    u = orc.control(lq_spec.action_grid)
    cfg = SimConfig(4000, g, seed=5)
    pu = simulate_strict(lq_spec, u, cfg)
    ju = estimate_cost(lq_spec, pu, u).per_particle
    diffs, ses = [], []
    for j in range(1, 6):
        cut = g.steps >> j
        v = FeedbackControl(g, 41, lambda k, x, cut=cut: np.where(k < cut, 40, u.indices(k, x)))
        d = estimate_cost(lq_spec, simulate_strict(lq_spec, v, cfg), v).per_particle - ju
        diffs.append(abs(d.mean()))
        ses.append(d.std(ddof=1) / np.sqrt(d.size))
    for a, b, sa, sb in zip(diffs, diffs[1:], ses, ses[1:]):
        assert b <= a + 3 * np.hypot(sa, sb)
    assert diffs[-1] < diffs[0] / 4

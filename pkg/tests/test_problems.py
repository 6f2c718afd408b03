import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mfrelax import (ActionGrid, LqParams, ProblemSpec, SimConfig, TimeGrid, constant_relaxed,
                     estimate_cost, make_chattering_problem, make_lq_meanfield, simulate_relaxed,
                     validate_problem)
from mfrelax.problems import ZERO, constant

finite = st.floats(-50, 50, allow_nan=False)


def zero_spec(**over):
    kw = dict(T=1.0, x0=0.0, action_grid=ActionGrid(np.array([0.0, 1.0])), b=ZERO, sigma=ZERO,
              h=ZERO, g=ZERO)
    kw.update(over)
    return ProblemSpec(**kw)


class TestActionGrid:
    def test_rejects_bad_grids(self):
        for bad in ([], [0.0, 0.0], [1.0, 0.0], [0.0, np.inf], [np.nan]):
            with pytest.raises(ValueError):
                ActionGrid(np.array(bad))

    def test_uniform(self):
        g = ActionGrid.uniform(-1, 1, 5)
        assert g.actions.tolist() == [-1.0, -0.5, 0.0, 0.5, 1.0]
        assert len(g) == 5

    def test_actions_are_read_only(self):
        g = ActionGrid.uniform(0, 1, 3)
        with pytest.raises(ValueError):
            g.actions[0] = 5.0

    @given(st.lists(st.integers(-40, 40), min_size=1, max_size=20, unique=True),
           st.integers(-100, 100))
    def test_nearest_is_a_closest_action(self, values, u2):
        # integer grids and half-integer queries make ties exact
        g = ActionGrid(np.sort(values).astype(float))
        u = u2 / 2
        i = int(g.nearest(u))
        d = np.abs(g.actions - u)
        assert d[i] == d.min()
        assert i == int(np.flatnonzero(d == d.min())[0])     # ties to the lower index


class TestValidation:
    def test_all_zero_spec_is_valid_with_zero_error(self):
        rep = validate_problem(zero_spec())
        assert rep.valid
        assert max(rep.worst.values()) == 0.0

    @pytest.mark.parametrize("make", [lambda: make_lq_meanfield(LqParams()),
                                      lambda: make_chattering_problem(0.0),
                                      lambda: make_chattering_problem(0.3, kappa=2.0)])
    def test_builtins_pass(self, make):
        rep = validate_problem(make(), samples=100, step=1e-4, tol=1e-5)
        assert rep.valid, rep.summary()

    def test_wrong_derivative_is_named(self):
        spec = zero_spec(b=lambda t, x, y, a: 3.0 * x + a, b_x=constant(6.0))
        rep = validate_problem(spec)
        assert not rep.valid
        assert rep.failures == ["b_x"]
        assert rep.worst["b_x"] > 0.5

    def test_non_finite_value_names_function_and_point(self):
        spec = zero_spec(h=lambda t, x, y, a: np.where(x > 0, np.inf, 0.0))
        rep = validate_problem(spec)
        assert not rep.valid
        fname, (t, x, y, a) = rep.errors[0]
        assert fname == "h" and x > 0
        assert "non-finite h" in rep.summary()

    def test_argument_checks(self):
        with pytest.raises(ValueError):
            validate_problem(zero_spec(), samples=0)
        with pytest.raises(ValueError):
            validate_problem(zero_spec(), step=0.0)

    def test_horizon_must_be_positive(self):
        with pytest.raises(ValueError):
            zero_spec(T=0.0)

    def test_rerun_is_deterministic(self):
        spec = make_lq_meanfield(LqParams())
        assert validate_problem(spec, seed=4).worst == validate_problem(spec, seed=4).worst


class TestLqSpec:
    def test_param_invariants(self):
        for bad in (dict(r=0.0), dict(qx=-1.0), dict(gx=-0.1), dict(u_max=0.0), dict(T=-1.0)):
            with pytest.raises(ValueError):
                LqParams(**bad)
        with pytest.raises(ValueError):
            make_lq_meanfield(LqParams(), n_actions=1)

    def test_reduced_running_cost(self):
        p = LqParams(a1=0, a2=0, b0=1, s0=0, qx=1, qy=0, r=1, gx=0, gy=0)
        spec = make_lq_meanfield(p)
        t, x, y, u = 0.3, np.array([0.5, -2.0]), 7.0, np.array([1.0, 0.25])
        np.testing.assert_array_equal(spec.h(t, x, y, u), 0.5 * (x**2 + u**2))
        np.testing.assert_array_equal(spec.b(t, x, y, u), u)

    @given(finite, finite)
    def test_terminal_gradient(self, x, y):
        p = LqParams()
        spec = make_lq_meanfield(p)
        assert spec.g_x(x, y) == p.gx * x
        assert spec.g_y(x, y) == p.gy * y

    def test_actions_span_the_box(self):
        spec = make_lq_meanfield(LqParams(u_max=2.0), n_actions=9)
        assert spec.actions[0] == -2.0 and spec.actions[-1] == 2.0 and len(spec.action_grid) == 9


class TestChatteringSpec:
    def test_half_half_mixture_keeps_zero_cost(self):
        spec = make_chattering_problem(0.0)
        grid = TimeGrid(1.0, 64)
        mu = constant_relaxed(grid, [0.5, 0.5])
        paths = simulate_relaxed(spec, mu, SimConfig(4, grid))
        assert np.all(paths.states == 0.0)
        assert estimate_cost(spec, paths, mu).value == 0.0

    def test_constant_mixture_grid_search_picks_half(self):
        # deterministic dynamics: X_t = (2w - 1) t, cost = sum_k dt x_k^2
        spec = make_chattering_problem(0.0)
        grid = TimeGrid(1.0, 100)
        ws = np.round(np.arange(11) * 0.1, 10)
        costs = []
        for w in ws:
            mu = constant_relaxed(grid, [1 - w, w])
            costs.append(estimate_cost(spec, simulate_relaxed(spec, mu, SimConfig(2, grid)), mu).value)
            exact = (2 * w - 1) ** 2 * np.sum((grid.nodes[:-1]) ** 2) * grid.dt
            assert costs[-1] == pytest.approx(exact, rel=1e-12, abs=1e-15)
        assert ws[int(np.argmin(costs))] == 0.5

    def test_rejects_negative_parameters(self):
        with pytest.raises(ValueError):
            make_chattering_problem(-0.1)
        with pytest.raises(ValueError):
            make_chattering_problem(0.0, kappa=-1.0)


class TestWeightedView:
    @given(st.integers(1, 30), st.integers(0, 2**32))
    def test_weighted_matches_dense_grid_evaluation(self, n, seed):
        r = np.random.default_rng(seed)
        spec = make_lq_meanfield(LqParams(), n_actions=7)
        x = r.normal(size=n)
        w = r.dirichlet(np.ones(7), size=n)
        w[r.random(w.shape) < 0.4] = 0.0
        w[:, 3] += 1e-3
        w /= w.sum(axis=1, keepdims=True)
        for f in ("b", "h", "sigma", "h_x"):
            dense = (spec.on_grid(f, 0.2, x, 0.1) * w).sum(axis=1)
            np.testing.assert_allclose(spec.weighted(f, 0.2, x, 0.1, w), dense, rtol=1e-13, atol=1e-14)

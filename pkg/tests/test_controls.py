import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mfrelax import (ChatteringSchedule, FeedbackControl, FeedbackRelaxedControl, SimConfig,
                     StateBinning, TabularRelaxedControl, TabularStrictControl, TimeGrid,
                     chattering, constant_control, constant_relaxed, control_distance,
                     control_from_text, control_to_text, delta_embedding, make_chattering_problem,
                     normalize_weights, simulate_strict, tabulate)
from mfrelax.controls import CoarsenedRelaxedControl, RelaxedControl

GRID = TimeGrid(1.0, 8)


def random_table(seed, steps=8, bins=6, n=4, sparsity=0.4):
    r = np.random.default_rng(seed)
    t = r.dirichlet(np.ones(n), size=(steps, bins))
    t[r.random(t.shape) < sparsity] = 0.0
    t[..., 0] += 1e-9
    return t


class TestGridAndBinning:
    def test_grid(self):
        g = TimeGrid(2.0, 4)
        assert g.dt == 0.5 and g.nodes.tolist() == [0, 0.5, 1, 1.5, 2] and g.refine(3).steps == 12
        with pytest.raises(ValueError):
            TimeGrid(1.0, 0)
        with pytest.raises(ValueError):
            TimeGrid(0.0, 3)

    def test_binning_clamps_outside(self):
        b = StateBinning(-1, 1, 4)
        assert b.index([-5, -1, -0.49, 0, 0.99, 7]).tolist() == [0, 0, 1, 2, 3, 3]
        with pytest.raises(ValueError):
            StateBinning(1, 1, 4)

    @given(st.floats(0.1, 10), st.integers(1, 200), st.floats(-3, 3))
    def test_centered_binning_puts_center_mid_bin(self, hw, bins, c):
        b = StateBinning.centered(hw, bins, c)
        j = int(b.index(c))
        assert b.centers[j] == pytest.approx(c, abs=1e-9 * (1 + hw))


class TestNormalization:
    @given(st.lists(st.floats(0, 1e6), min_size=1, max_size=30).filter(lambda v: sum(v) > 0))
    def test_sums_to_one(self, w):
        out = normalize_weights(w)
        assert abs(out.sum() - 1.0) <= 1e-12
        assert np.all(out >= 0)

    @pytest.mark.parametrize("bad", [[-0.1, 1.1], [0.0, 0.0], [np.nan, 1.0], [np.inf, 1.0]])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            normalize_weights(bad)

    @given(st.integers(0, 2**32))
    def test_table_rows_are_probability_vectors(self, seed):
        mu = TabularRelaxedControl(GRID, random_table(seed) * 7.3, StateBinning(-2, 2, 6))
        assert np.all(np.abs(mu.table.sum(axis=2) - 1.0) <= 1e-12)


class TestDeltaEmbedding:
    def test_constant_index(self):
        mu = delta_embedding(constant_control(GRID, 3, 2))
        assert mu.weights(3, np.array([0.1, -4.0])).tolist() == [[0, 0, 1], [0, 0, 1]]

    def test_sign_rule(self):
        u = FeedbackControl(GRID, 2, lambda k, x: (x > 0).astype(int))
        x = np.array([-1.0, 2.0, 0.0])
        assert delta_embedding(u).weights(0, x).tolist() == [[1, 0], [0, 1], [1, 0]]

    @given(st.integers(0, 2**32))
    def test_argmax_round_trip(self, seed):
        r = np.random.default_rng(seed)
        table = r.integers(0, 5, size=(8, 10))
        u = TabularStrictControl(GRID, 5, table, StateBinning(-3, 3, 10))
        mu = delta_embedding(u)
        for k in r.integers(0, 8, 5):
            x = r.normal(scale=3, size=200)
            assert np.array_equal(mu.argmax(k, x), u.indices(k, x))
            rows, cols, vals = mu.support(k, x)
            assert np.array_equal(cols, u.indices(k, x)) and np.all(vals == 1.0)


class TestSupport:
    @given(st.integers(0, 2**32))
    def test_tabular_support_equals_nonzero_scan(self, seed):
        r = np.random.default_rng(seed)
        mu = TabularRelaxedControl(GRID, random_table(seed), StateBinning(-2, 2, 6))
        for k in range(8):
            x = r.normal(scale=2, size=50)
            fast = mu.support(k, x)
            slow = RelaxedControl.support(mu, k, x)
            for a, b in zip(fast, slow):
                assert np.array_equal(a, b)

    def test_negative_weight_rejected(self):
        class Bad(RelaxedControl):
            def weights(self, k, x, states=None):
                return np.tile([-0.5, 1.5], (np.size(x), 1))

        with pytest.raises(ValueError, match="negative"):
            Bad(GRID, 2, "bad").support(0, np.zeros(3))


class TestDistance:
    def paths(self):
        spec = make_chattering_problem(0.5)
        return simulate_strict(spec, constant_control(TimeGrid(1.0, 10), 2, 0), SimConfig(50, TimeGrid(1.0, 10)))

    def test_identity_and_half_horizon(self):
        p = self.paths()
        g = p.grid
        u = constant_control(g, 2, 0)
        v = FeedbackControl(g, 2, lambda k, x: np.full(np.shape(x), int(k >= 5)))
        assert control_distance(u, u, p) == 0.0
        assert control_distance(u, v, p) == pytest.approx(0.5, abs=1e-15)

    @given(st.integers(0, 2**32))
    def test_symmetry_and_triangle(self, seed):
        p = self.paths()
        r = np.random.default_rng(seed)
        b = StateBinning(-2, 2, 5)
        u, v, w = (TabularStrictControl(p.grid, 2, r.integers(0, 2, (10, 5)), b) for _ in range(3))
        assert control_distance(u, v, p) == control_distance(v, u, p)
        assert control_distance(u, w, p) <= control_distance(u, v, p) + control_distance(v, w, p) + 1e-12
        assert 0 <= control_distance(u, v, p) <= p.grid.T

    def test_grid_mismatch(self):
        p = self.paths()
        with pytest.raises(ValueError):
            control_distance(constant_control(GRID, 2, 0), constant_control(GRID, 2, 1), p)


class TestChattering:
    def test_half_half_two_substeps(self):
        u = chattering(ChatteringSchedule(constant_relaxed(GRID, [0.5, 0.5]), 2))
        assert u.grid.steps == 16
        x = np.zeros(3)
        assert [int(u.indices(j, x)[0]) for j in range(4)] == [0, 1, 0, 1]

    @pytest.mark.parametrize("m", [1, 3, 8])
    def test_degenerate_weights_equal_delta(self, m):
        u = chattering(ChatteringSchedule(constant_relaxed(GRID, [1, 0, 0]), m))
        assert all(np.all(u.indices(j, np.zeros(4)) == 0) for j in range(u.grid.steps))

    @given(st.integers(1, 64), st.integers(2, 6), st.integers(0, 2**32))
    def test_occupation_within_n_over_m(self, m, n, seed):
        w = np.random.default_rng(seed).dirichlet(np.ones(n))
        u = chattering(ChatteringSchedule(constant_relaxed(GRID, w), m))
        idx = np.array([int(u.indices(j, np.zeros(1))[0]) for j in range(u.grid.steps)])
        occ = np.bincount(idx, minlength=n) / idx.size
        assert np.max(np.abs(occ - w)) <= n / m

    def test_test_function_error_decays_like_one_over_m(self):
        r = np.random.default_rng(1)
        w = np.array([0.37, 0.21, 0.42])
        f = r.normal(size=(8, 3))
        errs = []
        for m in (4, 16, 64, 256):
            u = chattering(ChatteringSchedule(constant_relaxed(GRID, w), m))
            dt = u.grid.dt
            total = sum(dt * f[j // m, int(u.indices(j, np.zeros(1))[0])] for j in range(u.grid.steps))
            errs.append(abs(total - GRID.dt * np.sum(f @ w)))
        assert errs[-1] <= errs[0] / 16 + 1e-12
        for e, m in zip(errs, (4, 16, 64, 256)):
            assert e <= 3.0 / m

    def test_weights_frozen_at_block_start(self):
        # weights follow the sign of x; the chattered control must read x at the block start
        base = FeedbackRelaxedControl(GRID, 2, lambda k, x: np.where(x[:, None] > 0, [0.0, 1.0], [1.0, 0.0]))
        u = chattering(ChatteringSchedule(base, 4))
        states = np.zeros((1, u.grid.steps + 1))
        states[0, 4] = 1.0
        states[0, 5] = -1.0
        assert int(u.indices(5, states[:, 5], states)[0]) == 1

    def test_schedule_needs_m_at_least_one(self):
        with pytest.raises(ValueError):
            ChatteringSchedule(constant_relaxed(GRID, [1.0]), 0)


class TestTextFormat:
    @given(st.integers(0, 2**32))
    def test_round_trip_is_bit_exact(self, seed):
        mu = TabularRelaxedControl(TimeGrid(0.7, 8), random_table(seed), StateBinning(-2.5, 1.25, 6))
        back = control_from_text(control_to_text(mu))
        assert np.array_equal(back.table, mu.table)
        assert back.grid == mu.grid and back.binning == mu.binning
        assert back.identity() == mu.identity()
        assert control_to_text(back) == control_to_text(mu)

    def test_rejects_missing_rows_and_bad_weights(self):
        mu = TabularRelaxedControl(GRID, random_table(0), StateBinning(-2, 2, 6))
        text = control_to_text(mu)
        with pytest.raises(ValueError, match="rows"):
            control_from_text("\n".join(text.splitlines()[:-1]))
        lines = text.splitlines()
        lines[-1] = "7,5," + ",".join(["0.5"] * 4)
        with pytest.raises(ValueError, match="probability"):
            control_from_text("\n".join(lines))


def test_tabulate_and_coarsen():
    b = StateBinning(-1, 1, 4)
    mu = FeedbackRelaxedControl(GRID, 2, lambda k, x: np.stack([np.full_like(x, k + 1.0), np.ones_like(x)], 1))
    tab = tabulate(mu, b)
    np.testing.assert_allclose(tab.table[3, 0], [4 / 5, 1 / 5])
    coarse = CoarsenedRelaxedControl(tab, 4)
    assert coarse.grid.steps == 2
    np.testing.assert_array_equal(coarse.weights(1, np.zeros(1)), tab.weights(4, np.zeros(1)))
    with pytest.raises(ValueError):
        CoarsenedRelaxedControl(tab, 3)

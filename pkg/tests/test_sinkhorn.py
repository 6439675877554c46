from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from csa.dataset import ClassFrequencyBounds
from csa.sinkhorn import (AugmentedMarginals, TransportError, allocation_marginals, augmented_marginals,
                          build_augmented, cost_from_probabilities, dual_objective, entropic_objective,
                          extract_assignments, lp_oracle, sinkhorn_anneal, sinkhorn_solve,
                          transport_objective)

from instances import full_allocation_bounds, random_bounds, random_instance


def _greedy_coupling(rng, row, col):
    """A feasible coupling: northwest-corner fill after random row/column permutations."""
    r, c = row.copy(), col.copy()
    q = np.zeros((r.size, c.size))
    rows, cols = list(rng.permutation(r.size)), list(rng.permutation(c.size))
    i, j = 0, 0
    while i < len(rows) and j < len(cols):
        a, b = rows[i], cols[j]
        x = min(r[a], c[b])
        q[a, b] += x
        r[a] -= x
        c[b] -= x
        if r[a] <= 1e-15:
            i += 1
        else:
            j += 1
    return q


class TestBuildAugmented:
    def test_worked_example(self):
        bounds = ClassFrequencyBounds([0.5, 0.5], [1.0, 1.0], [0.0, 0.0])
        cost, marg = build_augmented(np.ones((2, 2)), bounds, 1.0)
        np.testing.assert_allclose(marg.row, [1, 1, 4])
        np.testing.assert_allclose(marg.col, [2, 2, 2])
        assert marg.row.sum() == marg.col.sum() == 6
        assert cost.shape == (3, 3)
        assert np.all(cost[2, :] == 0) and np.all(cost[:, 2] == 0)
        np.testing.assert_array_equal(cost[:2, :2], 1.0)

    def test_full_allocation_has_empty_slack_column(self):
        _, marg = build_augmented(np.zeros((4, 2)), full_allocation_bounds(2), 1.0)
        assert marg.col[-1] == 0.0

    def test_rho_out_of_range(self):
        with pytest.raises(TransportError):
            augmented_marginals(3, full_allocation_bounds(2), 0.0)

    def test_infeasible_mass_reports_sums(self):
        bounds = ClassFrequencyBounds([0.5, 0.5], [0.5, 0.5], [0.5, 0.5])
        marg = AugmentedMarginals(np.array([1.0, 1.0, 0.5]), np.array([1.0, 1.0, 0.0]))
        with pytest.raises(TransportError, match="sum\\(r\\)"):
            build_augmented(np.zeros((2, 2)), bounds, 1.0, marginals=marg)

    def test_non_finite_cost(self):
        with pytest.raises(TransportError):
            build_augmented(np.array([[np.inf, 0.0]]), full_allocation_bounds(2), 0.5)

    @given(st.integers(1, 50), st.lists(st.integers(1, 20), min_size=2, max_size=6),
           st.fractions(Fraction(1, 100), 1), st.fractions(1, 2))
    @settings(max_examples=200)
    def test_balance_identity_exact(self, n, counts, rho, slack):
        # exact rational arithmetic: N + N(sum w+ - rho sum w-) == N sum w+ + N(1 - rho sum w-)
        total = sum(counts)
        w = [Fraction(c, total) for c in counts]
        wp = [min(slack * x, Fraction(1)) for x in w]
        wm = [(2 - slack) * x for x in w]
        row = [Fraction(1)] * n + [n * (sum(wp) - rho * sum(wm))]
        col = [n * x for x in wp] + [n * (1 - rho * sum(wm))]
        assert sum(row) == sum(col)

    def test_cost_floor_keeps_costs_finite(self):
        cost = cost_from_probabilities(np.array([[1.0, 0.0]]))
        assert np.isfinite(cost).all() and cost[0, 1] == pytest.approx(-np.log(1e-12))

    def test_sla_marginals_without_lower_bound(self):
        bounds = random_bounds(np.random.default_rng(0), 3).without_lower()
        marg = augmented_marginals(7, bounds, 0.5)
        assert marg.col[-1] == pytest.approx(7.0)


class TestSinkhornSolve:
    def test_constant_cost_gives_product_coupling(self):
        r, c = np.full(4, 0.75), np.full(3, 1.0)
        sol = sinkhorn_solve(np.full((4, 3), 2.5), AugmentedMarginals(r, c), epsilon=0.01)
        np.testing.assert_allclose(sol.coupling, np.outer(r, c) / r.sum(), atol=1e-8)

    def test_two_by_two_identity(self):
        marg = AugmentedMarginals(np.ones(2), np.ones(2))
        sol = sinkhorn_solve(np.array([[0.0, 1.0], [1.0, 0.0]]), marg, epsilon=0.01)
        np.testing.assert_allclose(sol.coupling, np.eye(2), atol=1e-4)

    def test_log_domain_small_epsilon(self):
        cost = np.array([[0.0, 27.6], [27.6, 0.0]])
        sol = sinkhorn_solve(cost, AugmentedMarginals(np.ones(2), np.ones(2)), epsilon=1e-3)
        assert np.isfinite(sol.coupling).all()
        np.testing.assert_allclose(sol.coupling, np.eye(2), atol=1e-8)

    @given(st.integers(0, 2**31))
    @settings(max_examples=25, deadline=None)
    def test_marginals_at_convergence(self, seed):
        cost, marg, *_ = random_instance(np.random.default_rng(seed), epsilon=0.05)
        sol = sinkhorn_solve(cost, marg, epsilon=0.05, max_iters=10_000, tol=1e-9)
        assert np.all(sol.coupling >= 0)
        assert np.abs(sol.coupling.sum(axis=1) - marg.row).max() <= 1e-6
        assert np.abs(sol.coupling.sum(axis=0) - marg.col).max() <= 1e-6
        assert sol.marginal_residual <= 1e-6

    @given(st.integers(0, 2**31))
    @settings(max_examples=25, deadline=None)
    def test_dual_objective_non_decreasing(self, seed):
        # Sinkhorn is block coordinate ascent on the entropic dual
        cost, marg, *_ = random_instance(np.random.default_rng(seed), epsilon=0.05)
        values = []
        sinkhorn_solve(cost, marg, 0.05, max_iters=300, tol=0.0,
                       callback=lambda j, la, lb: values.append(dual_objective(cost, marg, la, lb, 0.05)))
        scale = max(1.0, abs(values[0]))
        assert all(b >= a - 1e-10 * scale for a, b in zip(values, values[1:]))

    def test_primal_matches_dual_at_convergence(self):
        cost, marg, *_ = random_instance(np.random.default_rng(5), epsilon=0.1)
        sol = sinkhorn_solve(cost, marg, 0.1, max_iters=20_000, tol=1e-12)
        primal = entropic_objective(sol.coupling, cost, 0.1)
        dual = dual_objective(cost, marg, sol.log_row_scaling, sol.log_col_scaling, 0.1)
        assert primal == pytest.approx(dual, abs=1e-8)

    def test_iteration_cap(self):
        cost, marg, *_ = random_instance(np.random.default_rng(1))
        assert sinkhorn_solve(cost, marg, 0.01, max_iters=3, tol=0.0).iterations_used == 3

    def test_shape_mismatch(self):
        with pytest.raises(TransportError):
            sinkhorn_solve(np.zeros((2, 2)), AugmentedMarginals(np.ones(3), np.ones(3)))

    def test_json_export(self):
        sol = sinkhorn_solve(np.zeros((2, 2)), AugmentedMarginals(np.ones(2), np.ones(2)))
        assert '"iterations_used"' in sol.to_json()


class TestLpOracle:
    def test_single_cell(self):
        flow, obj = lp_oracle(np.array([[3.0]]), AugmentedMarginals(np.array([2.0]), np.array([2.0])))
        assert flow.tolist() == [[2.0]] and obj == 6.0

    def test_identity_favoring(self):
        cost = 1.0 - np.eye(3)
        flow, obj = lp_oracle(cost, AugmentedMarginals(np.ones(3), np.ones(3)))
        np.testing.assert_allclose(flow, np.eye(3))
        assert obj == 0.0

    def test_beats_random_feasible_couplings(self):
        rng = np.random.default_rng(0)
        cost = rng.uniform(0, 5, (5, 3))
        row = rng.uniform(0.5, 2, 5)
        col = rng.uniform(0.5, 2, 3)
        col *= row.sum() / col.sum()
        flow, obj = lp_oracle(cost, AugmentedMarginals(row, col))
        for _ in range(1000):
            q = _greedy_coupling(rng, row, col)
            lam = rng.random()
            q = lam * q + (1 - lam) * _greedy_coupling(rng, row, col)
            assert obj <= transport_objective(q, cost) + 1e-9

    @given(st.integers(0, 2**31))
    @settings(max_examples=40, deadline=None)
    def test_matches_highs(self, seed):
        linprog = pytest.importorskip("scipy.optimize").linprog
        cost, marg, *_ = random_instance(np.random.default_rng(seed))
        flow, obj = lp_oracle(cost, marg)
        m, n = cost.shape
        a_eq = np.vstack([np.kron(np.eye(m), np.ones(n)), np.kron(np.ones(m), np.eye(n))])
        res = linprog(cost.ravel(), A_eq=a_eq[:-1], b_eq=np.r_[marg.row, marg.col][:-1], method="highs")
        assert res.status == 0
        assert obj == pytest.approx(res.fun, abs=1e-7)
        assert np.all(flow >= -1e-12)
        np.testing.assert_allclose(flow.sum(axis=1), marg.row, atol=1e-9)
        np.testing.assert_allclose(flow.sum(axis=0), marg.col, atol=1e-9)

    def test_too_large(self):
        with pytest.raises(TransportError, match="too large"):
            lp_oracle(np.zeros((20, 3)), AugmentedMarginals(np.ones(20), np.full(3, 20 / 3)))


def _entropy(q):
    return -float(np.where(q > 0, q * (np.log(np.where(q > 0, q, 1.0)) - 1.0), 0.0).sum())


class TestEntropicToLp:
    @pytest.mark.xfail(strict=True, reason="entropic bias at eps=0.01 exceeds 1e-3 of the cost range "
                                           "on some instances (about 1 in 7 flat instances)")
    def test_default_epsilon_close_to_lp(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            n, k = 10, 4
            mean = np.random.default_rng(rng.integers(2**31)).dirichlet(np.ones(k), n)
            bounds = random_bounds(rng, k)
            cost, marg = build_augmented(cost_from_probabilities(mean), bounds, float(rng.uniform(0.1, 1)))
            sol = sinkhorn_anneal(cost, marg, 0.01, max_iters=20_000, tol=1e-9)
            _, opt = lp_oracle(cost, marg)
            body = cost[:n, :k]
            assert abs(transport_objective(sol.coupling, cost) - opt) <= 1e-3 * np.ptp(body)

    @given(st.integers(0, 2**31))
    @settings(max_examples=30, deadline=None)
    def test_gap_within_entropy_bound(self, seed):
        # optimality of the entropic plan: <Q_eps, C> - OPT <= eps (H(Q_eps) - H(Q_lp))
        cost, marg, *_ = random_instance(np.random.default_rng(seed))
        sol = sinkhorn_anneal(cost, marg, 0.01, max_iters=20_000, tol=1e-11)
        flow, opt = lp_oracle(cost, marg)
        gap = transport_objective(sol.coupling, cost) - opt
        assert -1e-6 <= gap <= 0.01 * (_entropy(sol.coupling) - _entropy(flow)) + 1e-6

    @given(st.integers(0, 2**31))
    @settings(max_examples=15, deadline=None)
    def test_gap_shrinks_with_epsilon(self, seed):
        cost, marg, *_ = random_instance(np.random.default_rng(seed))
        _, opt = lp_oracle(cost, marg)
        gaps = []
        for eps in (0.1, 0.01, 0.001):
            sol = sinkhorn_anneal(cost, marg, eps, max_iters=20_000, tol=1e-10)
            gaps.append(abs(transport_objective(sol.coupling, cost) - opt))
        assert gaps[1] <= gaps[0] + 1e-7 and gaps[2] <= gaps[1] + 1e-7

    def test_anneal_matches_cold_solve(self):
        cost, marg, *_ = random_instance(np.random.default_rng(3), epsilon=0.05)
        cold = sinkhorn_solve(cost, marg, 0.05, max_iters=50_000, tol=1e-12)
        warm = sinkhorn_anneal(cost, marg, 0.05, max_iters=50_000, tol=1e-12)
        np.testing.assert_allclose(warm.coupling, cold.coupling, atol=1e-8)


class TestExtractAssignments:
    def test_dominant_mass(self):
        assert extract_assignments(np.array([[0.9, 0.05, 0.05], [0.0, 0.0, 0.0]])) == [(0, 0)]

    def test_slack_dominates(self):
        assert extract_assignments(np.array([[0.2, 0.2, 0.6], [0.0, 0.0, 0.0]])) == []

    def test_tie_with_slack_not_assigned(self):
        assert extract_assignments(np.array([[0.5, 0.0, 0.5], [0.0, 0.0, 0.0]])) == []

    def test_class_tie_broken_by_mean_prob(self):
        q = np.array([[0.4, 0.4, 0.2], [0.0, 0.0, 0.0]])
        assert extract_assignments(q, mean_probs=np.array([[0.3, 0.7]])) == [(0, 1)]
        assert extract_assignments(q) == [(0, 0)]

    def test_full_allocation_assigns_everyone(self):
        rng = np.random.default_rng(2)
        n, k = 9, 3
        mean = rng.dirichlet(np.ones(k), n)
        cost, marg = build_augmented(cost_from_probabilities(mean), full_allocation_bounds(k), 1.0)
        sol = sinkhorn_anneal(cost, marg, 0.01, max_iters=5000, tol=1e-9)
        assert sorted(i for i, _ in extract_assignments(sol.coupling, n, k, mean)) == list(range(n))

    @given(st.integers(0, 2**31), st.floats(-5, 5))
    @settings(max_examples=30, deadline=None)
    def test_constant_shift_invariance(self, seed, shift):
        # a shift of every augmented entry moves the objective by shift * sum(r) and
        # rescales the Gibbs kernel uniformly, so the coupling is unchanged
        cost, marg, mean, *_ = random_instance(np.random.default_rng(seed))
        n, k = mean.shape
        a = sinkhorn_anneal(cost, marg, 0.01, max_iters=5000, tol=1e-10)
        b = sinkhorn_anneal(cost + shift, marg, 0.01, max_iters=5000, tol=1e-10)
        np.testing.assert_allclose(a.coupling, b.coupling, atol=1e-7)
        assert extract_assignments(a.coupling, n, k, mean) == extract_assignments(b.coupling, n, k, mean)

    @given(st.integers(0, 2**31))
    @settings(max_examples=30, deadline=None)
    def test_assigned_mass_meets_lower_bound(self, seed):
        cost, marg, mean, bounds, rho = random_instance(np.random.default_rng(seed))
        n, k = mean.shape
        sol = sinkhorn_anneal(cost, marg, 0.01, max_iters=5000, tol=1e-9)
        assert sol.coupling[:n, :k].sum() >= n * rho * bounds.w_minus.sum() - 1e-6
        assert np.all(sol.coupling[:n, :k].sum(axis=0) <= n * bounds.w_plus + 1e-6)


def test_allocation_marginals_reject_infeasible():
    with pytest.raises(TransportError, match="infeasible"):
        allocation_marginals(4, np.array([0.2, 0.2]), 0.9)

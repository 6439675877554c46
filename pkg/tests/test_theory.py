import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from csa.theory import (CORRECT, PacBayesSetup, Theorem1Setup, estimation_errors, individual_losses, ipm_tv,
                        kl, majority_vote, majority_vote_loss, pac_bayes_report, pac_bayes_rhs,
                        pinsker_surrogate, tandem_loss, theorem1_bound, theorem1_csv, theorem1_monte_carlo,
                        theorem1_sweep)


def _plug_in(n=50, trials=10_000):
    return Theorem1Setup.bernoulli([[0.0], [1.0]], [1.0], [n, n], [1.0, 1.0], 1.0, trials)


def _simplex(rng, m):
    x = rng.exponential(size=m)
    return x / x.sum()


def _random_setup(rng, trials=2000):
    k, d = int(rng.integers(2, 5)), int(rng.integers(1, 5))
    return Theorem1Setup.bernoulli(rng.normal(0, 1, (k, d)), rng.uniform(0.5, 2, d), rng.integers(5, 500, k),
                                   rng.uniform(0.8, 1, k), float(rng.uniform(0.5, 3)), trials)


def _naive_errors(setup, rng, trials):
    """Per-sample simulation of the corrupted-sample generating process."""
    k = setup.class_count
    out = np.empty(trials)
    for t in range(trials):
        total = 0.0
        for c in range(k):
            n = setup.pseudo_counts[c]
            correct = rng.random(n) < setup.indicator_means[c]
            others = [j for j in range(k) if j != c]
            wrong_class = rng.choice(others, size=n)
            z = rng.standard_normal((n, setup.dim)) * np.sqrt(setup.noise_variances)
            x = np.where(correct[:, None], 0.0, setup.class_means[wrong_class] - setup.class_means[c]) + z
            total += np.abs(x.mean(axis=0)).sum()
        out[t] = total
    return out


class TestTheorem1Setup:
    def test_bernoulli_variance(self):
        s = Theorem1Setup.bernoulli([[0.0], [1.0]], [1.0], [3, 4], [0.9, 0.5], 1.0)
        np.testing.assert_allclose(s.indicator_variances, [0.09, 0.25])
        assert np.all(s.indicator_variances <= s.indicator_means * (1 - s.indicator_means) + 1e-12)

    @pytest.mark.parametrize("field,value", [("class_means", [[0.0]]), ("noise_variances", [0.0]),
                                             ("pseudo_counts", [0, 1]), ("indicator_means", [1.2, 0.5]),
                                             ("delta", 0.0), ("trials", 0)])
    def test_validation(self, field, value):
        kwargs = dict(class_means=[[0.0], [1.0]], noise_variances=[1.0], pseudo_counts=[1, 1],
                      indicator_means=[1.0, 1.0], indicator_variances=[0.0, 0.0], delta=1.0)
        kwargs[field] = value
        with pytest.raises(ValueError):
            Theorem1Setup(**kwargs)

    def test_gaps(self):
        s = Theorem1Setup.bernoulli([[0.0, 0.0], [1.0, 2.0], [3.0, 0.0]], [1, 1], [1, 1, 1], [1, 1, 1], 1.0)
        np.testing.assert_allclose(s.other_class_gaps(), [3.0, 3.5, 3.5])


class TestTheorem1Bound:
    def test_plug_in_value(self):
        assert theorem1_bound(_plug_in()) == pytest.approx(1 - 4 * math.exp(-6.25), abs=1e-15)
        assert theorem1_bound(_plug_in()) == pytest.approx(0.99227, abs=1e-5)

    def test_abundant_clean_data_tends_to_one(self):
        assert theorem1_bound(_plug_in(n=100_000)) == pytest.approx(1.0, abs=1e-12)

    def test_vacuous_returned_as_is(self):
        s = Theorem1Setup.bernoulli([[0.0], [5.0]], [1.0], [50, 50], [0.5, 0.5], 0.1)
        assert theorem1_bound(s) < 0

    @given(st.integers(0, 2**31), st.integers(0, 3), st.integers(1, 500))
    @settings(max_examples=50)
    def test_increasing_in_counts(self, seed, which, extra):
        s = _random_setup(np.random.default_rng(seed))
        which %= s.class_count
        counts = s.pseudo_counts.copy()
        counts[which] += extra
        assert theorem1_bound(dataclasses.replace(s, pseudo_counts=counts)) >= theorem1_bound(s)

    @given(st.integers(0, 2**31), st.floats(1.0, 10.0))
    @settings(max_examples=50)
    def test_decreasing_in_noise_and_indicator_variance(self, seed, factor):
        s = _random_setup(np.random.default_rng(seed))
        assert theorem1_bound(dataclasses.replace(s, noise_variances=s.noise_variances * factor)) <= theorem1_bound(s)
        assert theorem1_bound(dataclasses.replace(s, indicator_variances=s.indicator_variances * factor)) \
            <= theorem1_bound(s)

    @given(st.integers(0, 2**31))
    @settings(max_examples=50)
    def test_decreasing_in_dimension(self, seed):
        rng = np.random.default_rng(seed)
        s = _random_setup(rng)
        wider = dataclasses.replace(s, class_means=np.c_[s.class_means, np.zeros(s.class_count)],
                                    noise_variances=np.r_[s.noise_variances, rng.uniform(0.5, 2)])
        assert theorem1_bound(wider) <= theorem1_bound(s)

    @given(st.integers(0, 2**31))
    @settings(max_examples=50)
    def test_decreasing_in_classes_with_clean_labels(self, seed):
        rng = np.random.default_rng(seed)
        s = _random_setup(rng)
        s = dataclasses.replace(s, indicator_variances=np.zeros(s.class_count))
        more = dataclasses.replace(s, class_means=np.vstack([s.class_means, rng.normal(size=s.dim)]),
                                   pseudo_counts=np.r_[s.pseudo_counts, rng.integers(5, 500)],
                                   indicator_means=np.r_[s.indicator_means, 1.0],
                                   indicator_variances=np.zeros(s.class_count + 1))
        assert theorem1_bound(more) <= theorem1_bound(s)


class TestTheorem1MonteCarlo:
    def test_plug_in_empirical_above_bound(self):
        p, se = theorem1_monte_carlo(_plug_in(), seed=0)
        assert p >= theorem1_bound(_plug_in())

    def test_noiseless_clean_labels_always_succeed(self):
        s = Theorem1Setup.bernoulli([[0.0, 1.0], [2.0, 3.0]], [1e-30, 1e-30], [5, 5], [1.0, 1.0], 1e-6, 500)
        assert theorem1_monte_carlo(s, 1) == (1.0, 0.0)

    def test_deterministic(self):
        s = _random_setup(np.random.default_rng(0), trials=2500)
        assert theorem1_monte_carlo(s, 3) == theorem1_monte_carlo(s, 3)

    def test_matches_per_sample_simulation(self):
        s = Theorem1Setup.bernoulli([[0.0, 0.0], [1.0, 0.5], [-1.0, 1.0]], [1.0, 0.5], [20, 30, 25],
                                    [0.9, 0.8, 0.7], 1.0)
        fast = estimation_errors(s, np.random.default_rng(0), 4000)
        slow = _naive_errors(s, np.random.default_rng(1), 4000)
        for q in (0.25, 0.5, 0.75):
            assert abs(np.quantile(fast, q) - np.quantile(slow, q)) < 0.05
        assert abs(fast.mean() - slow.mean()) < 4 * math.hypot(fast.std(), slow.std()) / math.sqrt(4000)

    def test_monotone_in_counts(self):
        base = Theorem1Setup.bernoulli([[0.0, 0.0], [1.0, 1.0]], [1.0, 1.0], [50, 50], [0.95, 0.95], 0.8)
        rows = theorem1_sweep([dataclasses.replace(base, pseudo_counts=np.array([n, n]))
                               for n in (50, 100, 200, 400, 800)])
        for a, b in zip(rows, rows[1:]):
            assert b.empirical >= a.empirical - 3 * math.hypot(a.stderr, b.stderr)

    def test_randomized_validity_with_mostly_correct_labels(self):
        rng = np.random.default_rng(11)
        rows = []
        while len(rows) < 10:
            s = _random_setup(rng)
            if theorem1_bound(s) > 0:
                rows.extend(theorem1_sweep([s]))
        assert all(r.holds for r in rows)

    def test_bias_counterexample(self):
        # class 1 is half mislabeled: its estimate is biased by 0.5 * 8 = 4 > delta,
        # yet the bound only charges Var(I) * gap / delta^2 for it
        s = Theorem1Setup.bernoulli([[0.0], [8.0]], [1.0], [2000, 2000], [1.0, 0.5], 3.0, 2000)
        assert theorem1_bound(s) == pytest.approx(1 / 9, abs=1e-12)
        (row,) = theorem1_sweep([s])
        assert row.empirical == 0.0 and not row.holds

    def test_csv(self):
        rows = theorem1_sweep([_plug_in(trials=100), _plug_in(n=80, trials=100)])
        lines = theorem1_csv(rows).splitlines()
        assert lines[0].startswith("setup,classes,dim") and len(lines) == 3
        assert lines[1].split(",")[3] == "50 50"


class TestTandemLoss:
    def test_single_model_is_error_rate(self):
        correct = np.array([[True, False, True, False, False]])
        assert tandem_loss(correct, [1.0]) == pytest.approx(0.6)

    def test_disjoint_errors(self):
        correct = np.array([[False, True, True, True], [True, True, False, False]])
        xi = np.array([0.3, 0.7])
        assert tandem_loss(correct, xi) == pytest.approx(0.09 * 0.25 + 0.49 * 0.5, abs=1e-15)

    def test_all_wrong(self):
        assert tandem_loss(np.zeros((3, 4), bool), np.full(3, 1 / 3)) == pytest.approx(1.0)

    @given(st.integers(0, 2**31), st.integers(1, 6), st.integers(1, 20))
    @settings(max_examples=40)
    def test_uniform_weights_loop_oracle(self, seed, m, n):
        correct = np.random.default_rng(seed).random((m, n)) < 0.6
        total = 0.0
        for a in range(m):
            for b in range(m):
                total += sum((not correct[a, i]) and (not correct[b, i]) for i in range(n)) / n
        assert abs(tandem_loss(correct, np.full(m, 1 / m)) - total / m**2) <= 1e-12

    def test_correctness_indicator(self):
        correct = np.array([[True, True, False]])
        assert tandem_loss(correct, [1.0], CORRECT) == pytest.approx(2 / 3)
        with pytest.raises(ValueError):
            tandem_loss(correct, [1.0], "other")


class TestMajorityVote:
    def test_unanimous_correct(self):
        y = np.array([0, 1, 2, 1])
        assert majority_vote_loss(np.tile(y, (3, 1)), np.full(3, 1 / 3), y) == 0.0

    def test_point_mass(self):
        y = np.array([0, 1, 1, 0])
        preds = np.array([[0, 0, 1, 1], [1, 1, 0, 0]])
        assert majority_vote_loss(preds, [1.0, 0.0], y) == 0.5
        assert majority_vote_loss(preds, [0.0, 1.0], y) == 0.5

    def test_two_of_three_correct(self):
        y = np.array([0, 1, 2, 0, 1, 2])
        preds = np.array([y, y, (y + 1) % 3])
        preds[0, :3], preds[2, :3] = (y[:3] + 2) % 3, y[:3]
        assert majority_vote_loss(preds, np.full(3, 1 / 3), y) == 0.0

    def test_tie_goes_to_lowest_class(self):
        assert majority_vote(np.array([[2], [1]]), [0.5, 0.5], 3).tolist() == [1]

    @given(st.integers(0, 2**31), st.integers(1, 7), st.integers(2, 4))
    @settings(max_examples=60)
    def test_bounded_by_individual_and_tandem_losses(self, seed, m, k):
        rng = np.random.default_rng(seed)
        y = rng.integers(0, k, 50)
        wrong = rng.random((m, 50)) < rng.uniform(0, 0.7, (m, 1))
        preds = np.where(wrong, (y + rng.integers(1, k, (m, 50))) % k, y)
        xi = _simplex(rng, m)
        mv = majority_vote_loss(preds, xi, y, k)
        correct = preds == y
        assert mv <= 2 * float(xi @ individual_losses(correct)) + 1e-12
        assert mv <= 4 * tandem_loss(correct, xi) + 1e-12


class TestDivergences:
    def test_identical(self):
        p = [0.2, 0.3, 0.5]
        assert ipm_tv(p, p) == 0.0 and kl(p, p) == 0.0

    def test_point_mass_against_uniform(self):
        assert ipm_tv([1, 0], [0.5, 0.5]) == 0.5
        assert kl([1, 0], [0.5, 0.5]) == pytest.approx(math.log(2))
        assert pinsker_surrogate([1, 0], [0.5, 0.5]) == pytest.approx(0.5887, abs=1e-4)

    def test_kl_infinite_off_support(self):
        assert kl([0.5, 0.5], [1.0, 0.0]) == math.inf

    def test_not_a_distribution(self):
        with pytest.raises(ValueError):
            ipm_tv([0.5, 0.6], [0.5, 0.5])

    @given(st.integers(0, 2**31), st.integers(2, 10))
    def test_pinsker(self, seed, m):
        rng = np.random.default_rng(seed)
        p, q = _simplex(rng, m), _simplex(rng, m)
        assert ipm_tv(p, q) <= pinsker_surrogate(p, q) + 1e-12


class TestPacBayesRhs:
    def test_equal_prior_and_posterior(self):
        correct = np.array([[True] * 8 + [False] * 2, [True] * 10])
        s = PacBayesSetup([0.5, 0.5], [0.5, 0.5], correct, 0.05)
        expected = 4 * 0.1 + math.sqrt(8 * math.log(10 / 0.05) / 9)
        assert pac_bayes_rhs(s, "tv") == pytest.approx(expected, rel=1e-12)
        assert pac_bayes_rhs(s, "kl") == pytest.approx(expected, rel=1e-12)

    @given(st.integers(0, 2**31), st.integers(1, 8), st.integers(2, 60))
    @settings(max_examples=60)
    def test_tv_not_above_kl(self, seed, m, n):
        rng = np.random.default_rng(seed)
        s = PacBayesSetup(_simplex(rng, m), _simplex(rng, m), rng.random((m, n)) < 0.7)
        assert pac_bayes_rhs(s, "tv") <= pac_bayes_rhs(s, "kl") + 1e-12

    def test_needs_two_samples(self):
        with pytest.raises(ValueError):
            pac_bayes_rhs(PacBayesSetup([1.0], [1.0], np.ones((1, 1), bool)))

    @pytest.mark.parametrize("kwargs", [{"posterior": [0.5, 0.6]}, {"prior": [1.0]}, {"delta": 1.0},
                                        {"correct": np.ones((3, 4), bool)}])
    def test_setup_validation(self, kwargs):
        base = dict(posterior=[0.5, 0.5], prior=[0.5, 0.5], correct=np.ones((2, 4), bool))
        base.update(kwargs)
        with pytest.raises(ValueError):
            PacBayesSetup(**base)

    def test_bad_choice(self):
        with pytest.raises(ValueError):
            pac_bayes_rhs(PacBayesSetup([1.0], [1.0], np.ones((1, 3), bool)), "hellinger")

    def test_frequentist_validity(self):
        rng = np.random.default_rng(0)
        m, k, n_l, delta = 5, 3, 60, 0.05
        accuracy = rng.uniform(0.55, 0.8, m)
        xi, pi = _simplex(rng, m), np.full(m, 1 / m)

        def draw(n):
            y = rng.integers(0, k, n)
            wrong = rng.random((m, n)) >= accuracy[:, None]
            return np.where(wrong, (y + rng.integers(1, k, (m, n))) % k, y), y

        held = 0
        for _ in range(1000):
            lp, ly = draw(n_l)
            tp, ty = draw(500)
            report = pac_bayes_report(lp, ly, tp, ty, xi, pi, delta, k)
            held += report.majority_vote_loss <= report.rhs_tv
        assert held / 1000 >= 1 - delta


class TestPacBayesReport:
    def test_fields(self):
        y = np.array([0, 1, 0, 1])
        preds = np.array([[0, 1, 0, 0], [0, 1, 1, 1]])
        r = pac_bayes_report(preds, y, preds, y, [0.5, 0.5], [0.5, 0.5])
        assert r.weighted_loss == pytest.approx(0.25)
        assert r.tandem_loss == pytest.approx(0.125)
        assert r.rhs_tv <= r.rhs_kl
        assert len(r.as_row()) == 5

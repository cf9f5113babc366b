import math

import numpy as np
import pytest

from deepnmmc.nmmc import (
    CodeTransform,
    DegenerateInputError,
    NmmcConfig,
    NmmcState,
    assignment_probs,
    crp_conditional,
    gibbs_assign,
    likelihood_score,
    pa_update,
    resample_alpha,
    run_nmmc,
    sample_new_theta,
)


def make_state(assignments, thetas, alpha=4.0, lam=15.0, C=0.001):
    assignments = np.asarray(assignments, dtype=np.int64)
    thetas = np.asarray(thetas, dtype=np.float64)
    counts = np.bincount(assignments[assignments >= 0], minlength=thetas.shape[0])
    return NmmcState(assignments, thetas, counts, alpha, lam, C)


def hinge(state, x, z, z_hat):
    return max(0.0, 1.0 - (state.thetas[z] @ x - state.thetas[z_hat] @ x))


class TestCrp:
    def test_examples(self):
        np.testing.assert_allclose(crp_conditional([2], 1.0, 2), [2 / 3, 1 / 3], rtol=1e-15)
        np.testing.assert_allclose(crp_conditional([3, 1], 4.0, 4), [3 / 8, 1 / 8, 4 / 8], rtol=1e-15)

    def test_small_alpha(self):
        assert crp_conditional([5, 2], 1e-12, 7)[-1] < 1e-12

    def test_errors(self):
        with pytest.raises(ValueError):
            crp_conditional([3, -1], 1.0, 2)
        with pytest.raises(ValueError):
            crp_conditional([3, 1], 1.0, 5)

    def test_normalized(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            counts = rng.integers(0, 50, rng.integers(1, 30))
            p = crp_conditional(counts, rng.gamma(1.0) + 1e-3, int(counts.sum()))
            assert abs(p.sum() - 1.0) < 1e-12

    def test_sequential_table_count(self):
        # 10^4 sequential seatings of 1000 customers, vectorised over runs.
        alpha, n, runs = 4.0, 1000, 10_000
        rng = np.random.default_rng(1)
        tables = np.ones(runs)
        for i in range(1, n):
            p_new = crp_conditional([i], alpha, i)[-1]
            tables += rng.random(runs) < p_new
        expected = sum(alpha / (alpha + i - 1) for i in range(1, n + 1))
        se = tables.std(ddof=1) / math.sqrt(runs)
        assert abs(tables.mean() - expected) < 3 * se

    def test_full_seating_matches_expectation(self):
        # Seating through the full conditional, including which table is chosen.
        alpha, n, runs = 4.0, 60, 1000
        rng = np.random.default_rng(2)
        sizes = []
        for _ in range(runs):
            counts = np.array([1])
            for i in range(1, n):
                k = rng.choice(counts.size + 1, p=crp_conditional(counts, alpha, i))
                counts = np.append(counts, 1) if k == counts.size else counts + (np.arange(counts.size) == k)
            sizes.append(counts.size)
        expected = sum(alpha / (alpha + i - 1) for i in range(1, n + 1))
        assert abs(np.mean(sizes) - expected) < 3 * np.std(sizes) / math.sqrt(runs)


class TestLikelihood:
    def test_examples(self):
        assert likelihood_score([3.0, -1.0], [0.0, 0.0], 15.0) == 1.0
        assert likelihood_score([0.0, 2.0], [1.0, 0.0], 0.5) == pytest.approx(math.exp(-0.5))
        assert likelihood_score([1.0, 0.0], [2.0, 0.0], 0.25) == pytest.approx(math.e, rel=1e-15)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            likelihood_score([1.0], [1.0, 2.0], 1.0)

    def test_scale_property(self):
        rng = np.random.default_rng(3)
        for _ in range(2000):
            x, theta = rng.standard_normal(4), rng.standard_normal(4) * rng.uniform(0.01, 1)
            lam, s = rng.uniform(0.05, 2), rng.uniform(1.01, 3)
            increases = math.log(likelihood_score(x, s * theta, lam)) > math.log(likelihood_score(x, theta, lam))
            predicted = x @ theta > lam * (s + 1) * (theta @ theta)
            margin = abs(x @ theta - lam * (s + 1) * (theta @ theta))
            if margin > 1e-9:
                assert increases == predicted


class TestNewTheta:
    def test_gaussian_limit(self):
        rng = np.random.default_rng(4)
        draws = np.array([sample_new_theta(1, 1e9, rng)[0] for _ in range(100_000)])
        assert abs(draws.var() - 1.0) < 0.05

    def test_zero_mean(self):
        rng = np.random.default_rng(5)
        draws = np.array([sample_new_theta(1, 3.0, rng)[0] for _ in range(100_000)])
        assert abs(draws.mean()) < 0.02

    def test_reproducible(self):
        a = sample_new_theta(5, 3.0, np.random.default_rng(6))
        b = sample_new_theta(5, 3.0, np.random.default_rng(6))
        assert np.array_equal(a, b)

    def test_scale(self):
        a = sample_new_theta(5, 3.0, np.random.default_rng(6), scale=0.5)
        b = sample_new_theta(5, 3.0, np.random.default_rng(6))
        np.testing.assert_allclose(a, 0.5 * b, rtol=1e-15)

    def test_bad_args(self):
        with pytest.raises(ValueError):
            sample_new_theta(0, 3.0, np.random.default_rng(0))
        with pytest.raises(ValueError):
            sample_new_theta(2, 0.0, np.random.default_rng(0))


class TestGibbs:
    def test_zero_thetas_reduce_to_crp(self):
        state = make_state([0, 0, 1, 1, 2, 2], np.zeros((3, 2)))
        p = assignment_probs(state, np.array([0.3, 0.7]), state.counts, np.zeros(2))
        np.testing.assert_allclose(p, crp_conditional(state.counts, 4.0, 6), atol=1e-15)
        assert abs(p.sum() - 1.0) < 1e-12 and (p > 0).all()

    def test_tiny_alpha_single_cluster(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            state = make_state([0, 0, 0], np.zeros((1, 2)), alpha=1e-300)
            gibbs_assign(state, np.array([1.0, 0.5]), 1, rng)
            assert state.K == 1 and state.assignments[1] == 0

    def test_frequency_matches_analytic_ratio(self):
        x = np.array([1.0, 0.0])
        thetas = np.array([[1.0, 0.0], [0.0, 1.0]])
        lam = 0.1
        base = make_state([0, 0, 0, 1, 1, 1, 0], thetas, lam=lam)
        s = thetas @ x - lam * (thetas ** 2).sum(axis=1)
        ratio = math.exp(s[0]) / (math.exp(s[0]) + math.exp(s[1]))
        rng = np.random.default_rng(8)
        hits = total = 0
        for _ in range(10_000):
            state = make_state(base.assignments.copy(), thetas.copy(), lam=lam)
            gibbs_assign(state, x, 6, rng)
            k = state.assignments[6]
            if k < 2:
                hits += k == 0
                total += 1
        sigma = math.sqrt(ratio * (1 - ratio) / total)
        assert abs(hits / total - ratio) < 2 * sigma

    def test_emptied_cluster_is_compacted(self):
        state = make_state([0, 1, 2, 2], np.array([[0.0], [-50.0], [1.0]]), alpha=1e-300, lam=1.0)
        gibbs_assign(state, np.array([1.0]), 1, np.random.default_rng(0))
        state.check()
        assert state.K == 2
        assert state.thetas.tolist() == [[0.0], [1.0]]
        assert state.assignments.tolist()[2:] == [1, 1]

    def test_new_cluster_adopts_draw(self):
        # A heavy CRP new-cluster mass forces a new cluster whose theta is the t draw.
        state = make_state([0, 0], np.zeros((1, 3)), alpha=1e300, lam=1.0)
        rng = np.random.default_rng(9)
        expected = sample_new_theta(3, 3.0, np.random.default_rng(9))
        gibbs_assign(state, np.zeros(3), 1, rng)
        assert state.K == 2
        np.testing.assert_array_equal(state.thetas[1], expected)


class TestPa:
    def test_hand_example(self):
        state = make_state([0, 1], np.zeros((2, 2)), C=0.001)
        _, trace = pa_update(state, np.array([1.0, 0.0]), 0)
        assert trace == (1, 0.0, 1.0, 0.001)
        np.testing.assert_array_equal(state.thetas, [[0.001, 0.0], [-0.001, 0.0]])

    def test_passive_when_margin_met(self):
        state = make_state([0, 1], [[2.0, 0.0], [0.0, 0.0]])
        before = state.thetas.copy()
        _, trace = pa_update(state, np.array([1.0, 0.0]), 0)
        assert trace.loss == 0.0 and trace.step == 0.0 and trace.margin == 2.0
        np.testing.assert_array_equal(state.thetas, before)

    def test_single_cluster(self):
        state = make_state([0, 0], np.ones((1, 2)))
        _, trace = pa_update(state, np.zeros(2), 0)
        assert trace.margin == math.inf and trace.loss == 0.0 and trace.predicted_label == -1

    def test_degenerate(self):
        state = make_state([0, 1], np.zeros((2, 2)))
        with pytest.raises(DegenerateInputError):
            pa_update(state, np.zeros(2), 0)

    def test_label_range(self):
        with pytest.raises(ValueError):
            pa_update(make_state([0, 1], np.zeros((2, 2))), np.ones(2), 2)

    def test_tie_goes_to_lowest_index(self):
        state = make_state([0, 1, 2], np.zeros((3, 2)))
        _, trace = pa_update(state, np.array([1.0, 1.0]), 2)
        assert trace.predicted_label == 0

    def test_kkt_and_locality(self):
        rng = np.random.default_rng(10)
        checked = 0
        for _ in range(10_000):
            k = int(rng.integers(2, 6))
            thetas = rng.standard_normal((k, 5)) * rng.uniform(0.01, 2)
            state = make_state(np.arange(k), thetas.copy(), C=float(rng.uniform(0.01, 5)))
            x = rng.standard_normal(5) * rng.uniform(0.1, 3)
            z = int(rng.integers(k))
            _, trace = pa_update(state, x, z)
            assert trace.loss == max(0.0, 1.0 - trace.margin)
            assert 0.0 <= trace.step <= state.C
            if trace.loss > 0:
                assert trace.step == min(state.C, trace.loss / (x @ x))
            moved = np.flatnonzero((state.thetas != thetas).any(axis=1))
            assert set(moved.tolist()) <= {z, trace.predicted_label}
            if 0 < trace.step < state.C:
                assert hinge(state, x, z, trace.predicted_label) < 1e-9
                checked += 1
        assert checked > 1000


class TestAlpha:
    def test_mean_grows_with_k(self):
        rng = np.random.default_rng(11)

        def mean_alpha(k):
            state = make_state(np.arange(1000) % k, np.zeros((k, 1)), alpha=4.0)
            return np.mean([resample_alpha(state, 1.0, 1.0, rng) for _ in range(10_000)])

        assert mean_alpha(20) > mean_alpha(2)

    def test_prior_dominates(self):
        rng = np.random.default_rng(12)
        state = make_state(np.arange(100) % 5, np.zeros((5, 1)))
        draws = [resample_alpha(state, 1e6, 2e5, rng) for _ in range(200)]
        assert abs(np.mean(draws) - 5.0) < 0.05 and np.std(draws) < 0.05

    def test_reproducible_and_positive(self):
        state = make_state(np.arange(50) % 3, np.zeros((3, 1)))
        a = resample_alpha(state, 1.0, 1.0, np.random.default_rng(13))
        b = resample_alpha(state, 1.0, 1.0, np.random.default_rng(13))
        assert a == b and a > 0


def blobs(seed=0, n=60):
    rng = np.random.default_rng(seed)
    centers = np.array([[3.0, 0, 0], [0, 3.0, 0], [0, 0, 3.0]])
    y = np.arange(n) % 3
    return centers[y] + 0.3 * rng.standard_normal((n, 3)), y


class TestRun:
    def test_invariants_every_sweep(self):
        x, _ = blobs()

        def check(rec, state):
            state.check()
            assert rec.K == state.K

        result = run_nmmc(x, NmmcConfig(lam=0.5, iterations=5, seed=1), callback=check)
        assert len(result.log) == 6 and [r.iteration for r in result.log] == list(range(6))
        assert (result.assignments >= 0).all()

    def test_deterministic(self):
        x, _ = blobs()
        config = NmmcConfig(lam=0.5, iterations=5, seed=3)
        a, b = run_nmmc(x, config), run_nmmc(x, config)
        assert np.array_equal(a.assignments, b.assignments)
        assert np.array_equal(a.state.thetas, b.state.thetas)
        assert [r.objective for r in a.log] == [r.objective for r in b.log]

    def test_two_identical_points_tiny_alpha(self):
        result = run_nmmc(np.ones((2, 3)), NmmcConfig(alpha_init=1e-300, iterations=1))
        assert result.state.K == 1

    def test_needs_two_rows(self):
        with pytest.raises(ValueError):
            run_nmmc(np.ones((1, 3)))

    def test_predict_uses_scores(self):
        state = make_state([0, 1], [[1.0, 0.0], [0.0, 1.0]], lam=0.1)
        assert state.predict(np.array([[2.0, 0.0], [0.0, 2.0]])).tolist() == [0, 1]


class TestCodeTransform:
    def test_target_norm_and_bias(self):
        rng = np.random.default_rng(14)
        codes = rng.random((200, 6))
        tf = CodeTransform.fit(codes, 50.0, 0.1)
        out = tf.apply(codes)
        assert out.shape == (200, 7) and tf.out_dim == 7
        np.testing.assert_allclose(out[:, -1], 5.0)
        np.testing.assert_allclose(math.sqrt((out[:, :6] ** 2).sum(axis=1).mean()), 50.0)
        np.testing.assert_allclose(out[:, :6].mean(axis=0), 0.0, atol=1e-12)
        assert tf.code_weights(np.ones((3, 7))).shape == (3, 6)

    def test_scaling_equivalent_to_rescaled_lambda(self):
        # score(s x, theta; lam) == score(x, s theta; lam / s^2)
        rng = np.random.default_rng(15)
        x, theta, lam, s = rng.random(5), rng.standard_normal(5), 2.0, 7.0
        a = (s * x) @ theta - lam * theta @ theta
        b = x @ (s * theta) - lam / s ** 2 * (s * theta) @ (s * theta)
        assert a == pytest.approx(b, rel=1e-12)

    def test_vector_and_identity(self):
        tf = CodeTransform.identity(3)
        v = np.array([0.1, 0.2, 0.3])
        assert np.array_equal(tf.apply(v), v)

    def test_bad_args(self):
        with pytest.raises(ValueError):
            CodeTransform.fit(np.ones((5, 2)), 1.0)
        with pytest.raises(ValueError):
            CodeTransform.fit(np.random.default_rng(0).random((5, 2)), 0.0)

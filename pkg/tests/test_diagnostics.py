import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from ensembleiv.data import Samples, SecondPhaseSpec
from ensembleiv.dgp import MainDgpConfig, generate_main
from ensembleiv.diagnostics import (
    DiagnosticWarning,
    ErrorColumns,
    compute_ts,
    diagnostic_from_predictions,
    diagnostic_residuals,
    fisher_combine,
    fisher_statistic,
    paired_reduction_test,
    permutation_test,
    relevance_exclusion_summary,
    run_diagnostic,
    transformed_error_columns,
    ts_under_permutation,
)
from ensembleiv.ensemble import EnsembleParams, predict_learners, train_ensemble
from ensembleiv.errors import ConfigurationError
from ensembleiv.iv import SelectionConfig, pairwise_lambda, select_instruments, transformed_candidates
from ensembleiv.rng import RngStream

from conftest import make_samples

SPEC = SecondPhaseSpec("linear", "mlv", ("w1", "w2"))


def orthonormal_centered(g, n, k):
    A = g.normal(size=(n, k))
    A -= A.mean(axis=0)
    Q, _ = np.linalg.qr(A)
    return Q


class TestResiduals:
    def test_noiseless(self):
        g = np.random.default_rng(0)
        n = 60
        X, W = g.normal(size=n), g.normal(size=(n, 2))
        s = Samples(V=np.zeros((n, 1)), Y=1 + 0.5 * X + W @ [2.0, 1.0], W=W, X=X)
        r = diagnostic_residuals(s.take(np.arange(40)), s.take(np.arange(40, 60)), SPEC)
        assert np.max(np.abs(r)) < 1e-8

    def test_duplicated_half(self):
        half = make_samples(50, seed=1)
        copy = Samples(V=half.V, Y=half.Y, W=half.W, X=half.X, ids=half.ids + 100)
        from ensembleiv.regression import DesignMatrix, ols_residuals

        in_sample = ols_residuals(DesignMatrix.build(half.X, half.W), half.Y)
        np.testing.assert_allclose(diagnostic_residuals(half, copy, SPEC), in_sample, atol=1e-10)

    def test_mean_zero_under_correct_specification(self):
        means = []
        for rep in range(100):
            s = make_samples(200, seed=100 + rep)
            means.append(diagnostic_residuals(s.take(np.arange(150)), s.take(np.arange(150, 200)), SPEC).mean())
        means = np.array(means)
        assert abs(means.mean()) < 3 * means.std(ddof=1) / np.sqrt(means.size)

    def test_logistic_response_residuals(self):
        g = np.random.default_rng(2)
        n = 400
        X, W = g.normal(size=n), g.normal(size=(n, 2))
        Y = (g.uniform(size=n) < 1 / (1 + np.exp(-(X + W[:, 0])))).astype(float)
        s = Samples(V=np.zeros((n, 1)), Y=Y, W=W, X=X)
        r = diagnostic_residuals(s.take(np.arange(300)), s.take(np.arange(300, 400)),
                                 SecondPhaseSpec("logistic", "mlv", ("w1", "w2")))
        assert np.all(np.abs(r) < 1)


class TestStatistic:
    def test_orthogonalized_residual(self):
        g = np.random.default_rng(3)
        C = g.normal(size=(80, 3))
        Cc = C - C.mean(axis=0)
        r = g.normal(size=80)
        r = r - r.mean()
        r = r - Cc @ np.linalg.lstsq(Cc, r, rcond=None)[0]
        assert compute_ts(C, r).ts_observed == pytest.approx(0.0, abs=1e-12)

    def test_two_pairs_arithmetic(self):
        g = np.random.default_rng(4)
        Q = orthonormal_centered(g, 50, 3)
        r, u, v = Q.T
        c1 = 0.3 * r + np.sqrt(1 - 0.09) * u
        c2 = -0.1 * r + np.sqrt(1 - 0.01) * v
        res = compute_ts(np.column_stack([c1, c2]), r, pairs=[(0, 1), (1, 0)])
        assert res.pair_correlations[(0, 1)] == pytest.approx(0.3)
        assert res.pair_correlations[(1, 0)] == pytest.approx(-0.1)
        assert res.ts_observed == pytest.approx(0.2)

    def test_two_learners_two_pairs(self):
        g = np.random.default_rng(5)
        x = g.normal(size=100)
        P = x[:, None] + g.normal(size=(100, 2))
        cols = transformed_error_columns(pairwise_lambda(P, x), P, x)
        assert cols.pairs == ((0, 1), (1, 0))
        assert len(compute_ts(cols, g.normal(size=100)).pair_correlations) == 2

    def test_columns_match_direct_formula(self):
        g = np.random.default_rng(6)
        x = g.normal(size=60)
        P = x[:, None] + g.normal(size=(60, 3))
        lm = pairwise_lambda(P, x)
        cols = transformed_error_columns(lm, P, x)
        i, j = cols.pairs[2]
        direct = lm.sigma[i] * P[:, j] - lm.lam[i, j] * lm.sigma[j] * P[:, i] - x
        np.testing.assert_allclose(cols.values[:, 2], direct)

    def test_zero_variance_column_excluded(self):
        g = np.random.default_rng(7)
        C = np.column_stack([g.normal(size=30), np.ones(30)])
        with pytest.warns(DiagnosticWarning):
            res = compute_ts(C, g.normal(size=30))
        assert res.excluded_pairs == ((1, 1),)

    def test_identity_permutation(self):
        g = np.random.default_rng(8)
        C, r = g.normal(size=(40, 4)), g.normal(size=40)
        assert ts_under_permutation(C, r, np.arange(40)) == pytest.approx(compute_ts(C, r).ts_observed, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), q=st.integers(1, 6))
def test_ts_and_p_bounds(seed, q):
    g = np.random.default_rng(seed)
    C = g.normal(size=(30, q))
    r = C[:, 0] * g.uniform(-1, 1) + g.normal(size=30)
    res = permutation_test(C, r, 100, RngStream(seed))
    assert 0 <= res.ts_observed <= 1
    assert 0 < res.p_value <= 1
    expected = (1 + np.sum(res.permutation_distribution >= res.ts_observed - 1e-12)) / 101
    assert res.p_value == pytest.approx(expected)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31), perm_seed=st.integers(0, 2**31))
def test_p_value_invariant_to_learner_labels(seed, perm_seed):
    g = np.random.default_rng(seed)
    x = g.normal(size=60)
    P = x[:, None] + g.normal(size=(60, 4))
    r = g.normal(size=60) + 0.3 * (P[:, 0] - x)
    order = np.random.default_rng(perm_seed).permutation(4)
    a, _ = diagnostic_from_predictions(P, x, P, x, r, permutations=200, rng=RngStream(1))
    b, _ = diagnostic_from_predictions(P[:, order], x, P[:, order], x, r, permutations=200, rng=RngStream(1))
    assert a.p_value == b.p_value
    assert a.ts_observed == pytest.approx(b.ts_observed, rel=1e-10)


def test_null_calibration():
    g = np.random.default_rng(9)
    p = []
    for rep in range(200):
        C = g.normal(size=(120, 5))
        r = g.normal(size=120)
        p.append(permutation_test(C, r, 100, RngStream(rep)).p_value)
    p = np.array(p)
    assert stats.kstest(p, "uniform").pvalue > 0.01
    rate = np.mean(p <= 0.05)
    assert abs(rate - 0.05) <= 3 * np.sqrt(0.05 * 0.95 / p.size)


def test_permutation_count_minimum():
    with pytest.raises(ConfigurationError):
        permutation_test(np.ones((5, 1)), np.arange(5.0), 10, RngStream(0))


def test_permutation_deterministic():
    g = np.random.default_rng(10)
    C, r = g.normal(size=(50, 3)), g.normal(size=50)
    a = permutation_test(C, r, 300, RngStream(4))
    b = permutation_test(C, r, 300, RngStream(4))
    np.testing.assert_array_equal(a.permutation_distribution, b.permutation_distribution)


class TestFisher:
    def test_single(self):
        assert fisher_combine([0.37]) == pytest.approx(0.37)

    def test_ones(self):
        assert fisher_combine([1.0, 1.0]) == pytest.approx(1.0)

    def test_three_halves(self):
        assert fisher_statistic([0.5] * 3) == pytest.approx(-6 * np.log(0.5))
        assert fisher_statistic([0.5] * 3) == pytest.approx(4.159, abs=1e-3)
        assert fisher_combine([0.5] * 3) == pytest.approx(stats.chi2.sf(-6 * np.log(0.5), 6))

    def test_zero_clamped(self):
        with pytest.warns(DiagnosticWarning):
            assert 0 < fisher_combine([0.0, 0.5], permutations=99) < 0.05

    def test_invalid(self):
        with pytest.raises(ConfigurationError):
            fisher_combine([1.5])

    @settings(max_examples=50, deadline=None)
    @given(p=st.lists(st.floats(1e-6, 1.0), min_size=1, max_size=6), k=st.integers(0, 5),
           shrink=st.floats(0.0, 1.0))
    def test_monotone(self, p, k, shrink):
        k = k % len(p)
        lower = list(p)
        lower[k] = max(p[k] * shrink, 1e-7)
        assert fisher_combine(lower) <= fisher_combine(p) + 1e-12


class TestRelevanceExclusion:
    def test_identical_instrument(self):
        g = np.random.default_rng(11)
        x = g.normal(size=40)
        P = x[:, None] + g.normal(size=(40, 2))
        s = relevance_exclusion_summary(P, x, [P[:, [0]], P[:, [1]]], "before")
        np.testing.assert_allclose(s.relevance, 1.0)

    def test_orthogonal_error(self):
        g = np.random.default_rng(12)
        Q = orthonormal_centered(g, 50, 2)
        x = g.normal(size=50)
        P = (x + Q[:, 0])[:, None]
        s = relevance_exclusion_summary(P, x, [Q[:, [1]]], "after")
        assert s.exclusion[0] == pytest.approx(0.0, abs=1e-12)

    def test_bounds_and_stage(self):
        g = np.random.default_rng(13)
        x = g.normal(size=30)
        P = x[:, None] + g.normal(size=(30, 3))
        s = relevance_exclusion_summary(P, x, [g.normal(size=(30, 2))] * 3, "before")
        assert np.all((s.relevance >= 0) & (s.relevance <= 1) & (s.exclusion >= 0) & (s.exclusion <= 1))
        with pytest.raises(ConfigurationError):
            relevance_exclusion_summary(P, x, [P], "during")

    def test_transformation_lowers_exclusion_measure(self):
        data = generate_main(MainDgpConfig(n_label=1000, n_unlabel=3000), RngStream(5))
        train, test, unl = data.take(np.arange(750)), data.take(np.arange(750, 1000)), data.take(
            np.arange(1000, 4000))
        model = train_ensemble(train, "regression", EnsembleParams(n_learners=20), RngStream(6))
        P_test, P_unl = predict_learners(model, test.V).values, predict_learners(model, unl.V).values
        lm = pairwise_lambda(P_test, test.X)
        before, after = [], []
        for i in range(20):
            before.append(np.delete(P_unl, i, axis=1))
            keys, Z = transformed_candidates(lm, P_unl, i)
            after.append(select_instruments(P_unl[:, i], Z, SelectionConfig("pca", 3), keys=keys).columns)
        b = relevance_exclusion_summary(P_unl, unl.X, before, "before")
        a = relevance_exclusion_summary(P_unl, unl.X, after, "after")
        assert a.exclusion.mean() < b.exclusion.mean()


def test_paired_reduction():
    g = np.random.default_rng(14)
    before = g.uniform(0.2, 0.3, 50)
    t, p = paired_reduction_test(before, before - 0.05 + g.normal(0, 0.01, 50))
    assert t > 0 and p < 1e-6


def test_run_diagnostic_end_to_end():
    data = generate_main(MainDgpConfig(n_label=600, n_unlabel=1200), RngStream(7))
    train, test, diag = data.take(np.arange(400)), data.take(np.arange(400, 600)), data.take(np.arange(600, 1200))
    model = train_ensemble(train, "regression", EnsembleParams(n_learners=6), RngStream(8))
    with warnings.catch_warnings():
        warnings.simplefilter("error", DiagnosticWarning)
        res, raw = run_diagnostic(model, train, test, diag, SPEC, permutations=200, rng=RngStream(9))
    assert len(res.pair_correlations) == 30 and res.permutations == 200
    assert 0 < res.p_value <= 1 and np.isnan(raw.p_value)
    d = res.to_dict(max_pairs=10)
    assert "pair_correlations" not in d and d["n_pairs"] == 30


def test_error_columns_labels():
    with pytest.raises(ValueError):
        ErrorColumns.from_matrix(np.ones((4, 2)), pairs=[(0, 1)])

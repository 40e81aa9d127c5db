import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit

from ensembleiv.data import PartitionedDataset, Samples
from ensembleiv.errors import BootstrapDegeneracyError, ConvergenceError, EstimationError, SingularDesignError
from ensembleiv.regression import (
    CoefficientEstimate,
    DesignMatrix,
    bootstrap_estimates,
    fit_2sls,
    fit_2sri,
    fit_logistic,
    fit_ols,
    logistic_loglik,
    resample_partitions,
)
from ensembleiv.rng import RngStream


def classical_me(g, n, beta=0.5):
    x = g.normal(size=n)
    xhat = x + g.normal(0, 0.5, n)
    z = x + g.normal(0, 0.5, n)
    return x, xhat, z


class TestOLS:
    def test_exact_line(self):
        x = np.arange(6.0)
        fit = fit_ols(DesignMatrix.build(x), 2 * x)
        np.testing.assert_allclose(fit.point, [0, 2], atol=1e-12)
        np.testing.assert_allclose(fit.se, 0, atol=1e-12)

    def test_constant_outcome(self):
        x = np.array([0.3, 1.0, 2.0, 5.0])
        fit = fit_ols(DesignMatrix.build(x), np.full(4, 2.5))
        np.testing.assert_allclose(fit.point, [2.5, 0.0], atol=1e-12)

    def test_normal_equations_oracle(self):
        X = np.array([[1, 0.2, 3.0], [1, 1.5, -1.0], [1, 2.0, 0.5], [1, -0.7, 2.2], [1, 0.9, 0.1]])
        y = np.array([1.0, -0.5, 2.0, 0.3, 1.1])
        fit = fit_ols(DesignMatrix(("intercept", "mlv", "w1"), X), y)
        np.testing.assert_allclose(fit.point, np.linalg.inv(X.T @ X) @ X.T @ y, atol=1e-10)

    def test_rank_deficient(self):
        x = np.arange(5.0)
        with pytest.raises(SingularDesignError) as info:
            fit_ols(DesignMatrix.build(x, 2 * x), np.ones(5))
        assert info.value.columns

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31), n=st.integers(8, 60))
    def test_residuals_orthogonal_to_design(self, seed, n):
        g = np.random.default_rng(seed)
        d = DesignMatrix.build(g.normal(size=n), g.normal(size=(n, 2)))
        y = g.normal(size=n)
        fit = fit_ols(d, y)
        resid = y - d.matrix @ fit.point
        assert np.max(np.abs(d.matrix.T @ resid)) < 1e-9 * max(1.0, np.abs(y).sum())
        assert np.all(fit.se >= 0)


class TestLogistic:
    def test_balanced_intercept_only(self):
        d = DesignMatrix(("intercept",), np.ones((10, 1)))
        fit = fit_logistic(d, np.array([0, 1] * 5, dtype=float))
        assert fit.point[0] == pytest.approx(0.0, abs=1e-12)

    def test_independent_covariate_slope(self):
        g = np.random.default_rng(11)
        x = g.normal(size=2000)
        y = (g.uniform(size=2000) < 0.4).astype(float)
        fit = fit_logistic(DesignMatrix.build(x), y)
        assert abs(fit["mlv"]) < 3 * fit.se_of("mlv")

    def test_score_zero_by_finite_differences(self):
        g = np.random.default_rng(5)
        x = g.normal(size=1500)
        y = (g.uniform(size=1500) < expit(-0.4 + 1.2 * x)).astype(float)
        d = DesignMatrix.build(x)
        fit = fit_logistic(d, y)
        h = 1e-5
        for k in range(2):
            e = np.zeros(2)
            e[k] = h
            fd = (logistic_loglik(d.matrix, y, fit.point + e) - logistic_loglik(d.matrix, y, fit.point - e)) / (2 * h)
            assert abs(fd) < 1e-6

    def test_separation_detected(self):
        x = np.linspace(-1, 1, 20)
        with pytest.raises(ConvergenceError):
            fit_logistic(DesignMatrix.build(x), (x > 0).astype(float))

    def test_rejects_non_binary(self):
        with pytest.raises(ValueError):
            fit_logistic(DesignMatrix.build(np.arange(4.0)), np.array([0, 0.5, 1, 1]))


class TestTwoSLS:
    def test_self_instrument_equals_ols(self):
        g = np.random.default_rng(0)
        x, w = g.normal(size=200), g.normal(size=(200, 2))
        y = 1 + x + w @ [1.0, -1.0] + g.normal(size=200)
        iv = fit_2sls(y, x, x, w)
        ols = fit_ols(DesignMatrix.build(x, w), y)
        np.testing.assert_allclose(iv.point, ols.point, rtol=0, atol=1e-12)
        np.testing.assert_allclose(iv.se, ols.se, rtol=1e-10)

    def test_orthogonal_instrument_flagged(self):
        g = np.random.default_rng(1)
        n = 300
        x = g.normal(size=n)
        z = g.normal(size=n)
        basis = np.column_stack([np.ones(n), x])
        z = z - basis @ np.linalg.lstsq(basis, z, rcond=None)[0]
        y = x + g.normal(size=n)
        try:
            fit = fit_2sls(y, x, z)
        except SingularDesignError:
            return
        assert fit.diagnostics["first_stage_f"] < 1e-6

    def test_classical_measurement_error(self):
        g = np.random.default_rng(2)
        x, xhat, z = classical_me(g, 10000)
        y = 1 + 0.5 * x + g.normal(size=10000)
        naive = fit_ols(DesignMatrix.build(xhat), y)
        iv = fit_2sls(y, xhat, z)
        assert naive["mlv"] < 0.5 - 3 * naive.se_of("mlv")
        assert abs(iv["mlv"] - 0.5) < 3 * iv.se_of("mlv")

    def test_needs_instrument(self):
        with pytest.raises(ValueError):
            fit_2sls(np.ones(5), np.arange(5.0), np.empty((5, 0)))


class TestTwoSRI:
    def test_no_measurement_error_reduces_to_logistic(self):
        g = np.random.default_rng(3)
        x = g.normal(size=800)
        y = (g.uniform(size=800) < expit(0.3 + x)).astype(float)
        cf = fit_2sri(y, x, x)
        plain = fit_logistic(DesignMatrix.build(x), y)
        np.testing.assert_allclose(cf.point, plain.point, atol=1e-6)

    def test_stage_one_residual_orthogonal(self):
        from ensembleiv.regression import _first_stage

        g = np.random.default_rng(4)
        n = 400
        x, Z, W = g.normal(size=n), g.normal(size=(n, 2)), g.normal(size=(n, 1))
        _, resid, _ = _first_stage(x + Z[:, 0], Z, W, True)
        basis = np.column_stack([np.ones(n), W, Z])
        assert np.max(np.abs(basis.T @ resid)) < 1e-9

    def test_closer_than_naive_logistic(self):
        g = np.random.default_rng(6)
        naive, cf = [], []
        for _ in range(100):
            x, xhat, z = classical_me(g, 1000)
            y = (g.uniform(size=1000) < expit(0.5 + x)).astype(float)
            naive.append(fit_logistic(DesignMatrix.build(xhat), y)["mlv"])
            cf.append(fit_2sri(y, xhat, z)["mlv"])
        assert abs(np.mean(cf) - 1.0) < abs(np.mean(naive) - 1.0)


def _dataset(n, seed):
    g = np.random.default_rng(seed)
    x = g.normal(size=n)
    y = 1 + 2 * x + g.normal(size=n)
    pool = Samples(V=x[:, None], Y=y, W=np.empty((n, 0)), X=x)
    test = Samples(V=np.zeros((4, 1)), Y=np.zeros(4), W=np.empty((4, 0)), X=np.zeros(4), ids=n + np.arange(4))
    unl = Samples(V=np.zeros((4, 1)), Y=np.zeros(4), W=np.empty((4, 0)), ids=n + 4 + np.arange(4))
    return PartitionedDataset(pool, test, unl)


def _ols_procedure(d):
    return fit_ols(DesignMatrix.build(d.train.X), d.train.Y)


class TestBootstrap:
    def test_constant_procedure(self):
        def const(d):
            return CoefficientEstimate(("a",), [1.0], [0.0], "ols")

        est = bootstrap_estimates(const, _dataset(30, 0), 20, RngStream(0))
        assert est.se[0] == 0.0 and est.se_source == "bootstrap"

    def test_deterministic(self):
        a = bootstrap_estimates(_ols_procedure, _dataset(100, 1), 30, RngStream(7))
        b = bootstrap_estimates(_ols_procedure, _dataset(100, 1), 30, RngStream(7))
        np.testing.assert_array_equal(a.se, b.se)

    def test_matches_analytic(self):
        data = _dataset(500, 2)
        boot = bootstrap_estimates(_ols_procedure, data, 200, RngStream(3))
        analytic = _ols_procedure(data).se
        assert np.all(np.abs(boot.se / analytic - 1) <= 0.2)

    def test_degenerate(self):
        calls = {"n": 0}

        def flaky(d):
            calls["n"] += 1
            if calls["n"] > 1:
                raise EstimationError("boom")
            return CoefficientEstimate(("a",), [1.0], [0.0], "ols")

        with pytest.raises(BootstrapDegeneracyError):
            bootstrap_estimates(flaky, _dataset(30, 0), 10, RngStream(0))

    def test_resample_keeps_sizes_and_disjoint_ids(self):
        data = _dataset(50, 3)
        out = resample_partitions(data, RngStream(1))
        assert [len(p) for p in out.partitions().values()] == [len(p) for p in data.partitions().values()]


def test_coefficient_estimate_roundtrip():
    est = CoefficientEstimate(("a", "b"), [1.0, 2.0], [0.1, 0.2], "2sls", diagnostics={"k": 1})
    back = CoefficientEstimate.from_dict(est.to_dict())
    np.testing.assert_array_equal(back.point, est.point)
    assert back.estimator == "2sls" and back["b"] == 2.0
    with pytest.raises(ValueError):
        CoefficientEstimate(("a",), [1.0], [-1.0], "ols")

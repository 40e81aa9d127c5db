
import numpy as np
import pytest
from scipy.special import expit

from ensembleiv.config import load_config, monte_carlo_config
from ensembleiv.dgp import (
    MAIN_TRUTH,
    PERIPHERAL_TRUTH,
    MainDgpConfig,
    PeripheralDgpConfig,
    generate_main,
    generate_main_dgp,
    generate_peripheral_dgp,
)
from ensembleiv.ensemble import EnsembleParams
from ensembleiv.errors import ConfigurationError, DataIOError, ShapeError
from ensembleiv.harness import (
    MonteCarloConfig,
    emit_report,
    estimation_mse,
    load_report,
    mse_from_summary,
    run_monte_carlo,
    run_repetition,
)
from ensembleiv.iv import SelectionConfig
from ensembleiv.rng import RngStream


class TestMainDgp:
    def test_noiseless_outcome(self):
        s = generate_main(MainDgpConfig(n_label=50, n_unlabel=100, sigma_eps=0.0), RngStream(0))
        np.testing.assert_allclose(s.Y, 1 + 0.5 * s.X + 2 * s.W[:, 0] + s.W[:, 1], atol=1e-12)

    def test_logistic_intercept_only_rate(self):
        cfg = MainDgpConfig(second_phase="logistic", n_label=2000, n_unlabel=8000, coefficients=(1, 0, 0, 0))
        y = generate_main(cfg, RngStream(1)).Y
        p = expit(1.0)
        assert p == pytest.approx(0.731, abs=5e-4)
        assert abs(y.mean() - p) < 3 * np.sqrt(p * (1 - p) / y.size)

    def test_control_scales(self):
        s = generate_main(MainDgpConfig(n_label=2000, n_unlabel=8000), RngStream(2))
        assert s.W[:, 1].var() == pytest.approx(100, rel=0.1)
        assert s.W[:, 0].var() == pytest.approx(400 / 12, rel=0.1)

    def test_binary_label_median_split(self):
        s = generate_main(MainDgpConfig("binary", n_label=100, n_unlabel=300), RngStream(3))
        assert set(np.unique(s.X)) == {0.0, 1.0}
        assert s.X.mean() == pytest.approx(0.5)

    def test_partition_sizes(self):
        d = generate_main_dgp(MainDgpConfig(n_label=400, n_unlabel=1000), RngStream(4), k=4)
        assert (len(d.train), len(d.test), len(d.unlabel)) == (300, 100, 1000)

    def test_truth(self):
        assert MAIN_TRUTH == (1.0, 0.5, 2.0, 1.0)

    @pytest.mark.parametrize("kw", [dict(mlv_family="ordinal"), dict(second_phase="probit"),
                                    dict(n_label=100, n_unlabel=100), dict(coefficients=(1, 2))])
    def test_invalid(self, kw):
        with pytest.raises(ConfigurationError):
            MainDgpConfig(**kw)


class TestPeripheralDgp:
    def test_error_covariance(self):
        (s,) = generate_peripheral_dgp(PeripheralDgpConfig(0.3, 20000, (20000 - 6, 3, 3)), RngStream(5))[:1]
        assert np.cov(s.X1 - s.X, s.eps)[0, 1] == pytest.approx(0.09, rel=0.1)
        assert s.eps.var() == pytest.approx(2 * 0.09 + 0.04 + 1.0, rel=0.05)

    def test_small_sigma_decouples(self):
        (s,) = generate_peripheral_dgp(PeripheralDgpConfig(1e-4, 20000, (19994, 3, 3)), RngStream(6))[:1]
        assert abs(np.corrcoef(s.X1 - s.X, s.eps)[0, 1]) < 0.03

    def test_outcome_equation(self):
        parts = generate_peripheral_dgp(PeripheralDgpConfig(), RngStream(7))
        assert [len(p) for p in parts] == [3000, 1000, 1000]
        for p in parts:
            np.testing.assert_allclose(p.Y, 1 + p.X + 0.5 * p.W + p.eps)
        assert PERIPHERAL_TRUTH == (1.0, 1.0, 0.5)

    def test_invalid(self):
        with pytest.raises(ConfigurationError):
            PeripheralDgpConfig(sigma=0.0)
        with pytest.raises(ConfigurationError):
            PeripheralDgpConfig(split=(1, 2, 3))


class TestMse:
    def test_truth_everywhere(self):
        assert estimation_mse(np.tile([1.0, 2.0], (5, 1)), [1.0, 2.0]) == 0.0

    def test_printed_biased_column(self):
        mse = mse_from_summary([0.756, 0.553, 2.000, 1.000], [0.070, 0.014, 0.003, 0.002], [1, 0.5, 2, 1])
        assert mse == pytest.approx(0.0623 + 0.0051, abs=1e-4)
        assert round(mse, 3) == 0.067

    def test_two_rep_toy(self):
        # mean (1, 1), per-coordinate sample variance 1 each
        est = np.array([[1 - np.sqrt(0.5), 1 + np.sqrt(0.5)], [1 + np.sqrt(0.5), 1 - np.sqrt(0.5)]])
        assert estimation_mse(est, [1.0, 1.0]) == pytest.approx(2.0)

    def test_errors(self):
        with pytest.raises(ShapeError):
            estimation_mse(np.zeros((3, 2)), [0.0])
        with pytest.raises(ConfigurationError):
            estimation_mse(np.zeros((1, 2)), [0.0, 0.0])


SMALL = MonteCarloConfig(dgp=MainDgpConfig(n_label=240, n_unlabel=600),
                         ensemble=EnsembleParams(n_learners=8), reps=3,
                         estimators=("biased", "unbiased", "ensembleiv", "regcal"),
                         selections=(SelectionConfig("pca", 2),), seed=3)


@pytest.fixture(scope="module")
def small_report():
    return run_monte_carlo(SMALL)


class TestHarness:
    def test_fold_default(self):
        assert MonteCarloConfig().k == 4
        assert MonteCarloConfig(ensemble=EnsembleParams("boosting")).k == 3
        assert MonteCarloConfig(k=5).k == 5

    def test_validation(self):
        with pytest.raises(ConfigurationError):
            MonteCarloConfig(reps=1)
        with pytest.raises(ConfigurationError):
            MonteCarloConfig(estimators=("oracle",))
        with pytest.raises(ConfigurationError):
            MonteCarloConfig(estimators=("subset_trees",), ensemble=EnsembleParams(n_learners=20), subset_size=20)

    def test_summary_matches_per_rep(self, small_report):
        assert list(small_report.per_rep) == ["biased", "unbiased", "ensembleiv[pca2]", "regcal"]
        for label in small_report.per_rep:
            pts = np.array([r["point"] for r in small_report.per_rep[label]])
            s = small_report.summary(label)
            np.testing.assert_allclose(s["mean"], pts.mean(axis=0))
            assert s["mse"] == pytest.approx(estimation_mse(pts, MAIN_TRUTH))

    def test_repetition_reproducible(self, small_report):
        again = run_repetition(SMALL, 1)
        np.testing.assert_array_equal(again["biased"]["point"], small_report.per_rep["biased"][1]["point"])

    def test_json_roundtrip(self, small_report, tmp_path):
        emit_report(small_report, "json", tmp_path, stem="r")
        back = load_report(tmp_path / "r.json")
        for label in small_report.per_rep:
            np.testing.assert_allclose(back.points(label), small_report.points(label))
            assert back.summary(label)["mse"] == pytest.approx(small_report.summary(label)["mse"])

    def test_csv_rows(self, small_report):
        text = emit_report(small_report, "csv")
        assert len(text.strip().splitlines()) == 1 + 4 * 4

    def test_table_format(self, small_report):
        text = emit_report(small_report, "table")
        sd = small_report.summary("biased")["sd"][1]
        assert f"({sd:.3f})" in text
        assert text.splitlines()[-2].startswith("MSE")

    def test_bad_format_and_path(self, small_report, tmp_path):
        with pytest.raises(ConfigurationError):
            emit_report(small_report, "xml")
        blocker = tmp_path / "file"
        blocker.write_text("")
        with pytest.raises(DataIOError):
            emit_report(small_report, "json", blocker / "sub")
        with pytest.raises(DataIOError):
            load_report(tmp_path / "missing.json")


class TestConfigFile:
    def test_roundtrip(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("seed: 9\nensemble: {technique: boosting, n_learners: 20}\n"
                     "selection: [{method: top_n, n: 2}]\nharness: {reps: 5, estimators: [biased, ensembleiv]}\n")
        mc = monte_carlo_config(load_config(p))
        assert (mc.seed, mc.reps, mc.k, mc.ensemble.n_learners) == (9, 5, 3, 20)
        assert mc.selections == (SelectionConfig("top_n", 2),)

    @pytest.mark.parametrize("text", ["bogus: 1\n", "harness: {speed: 3}\n", "diagnostic: {alpah: 0.1}\n",
                                      "- a\n- b\n", "ensemble: {technique: [unclosed\n"])
    def test_rejected(self, tmp_path, text):
        p = tmp_path / "c.yaml"
        p.write_text(text)
        with pytest.raises(ConfigurationError):
            monte_carlo_config(load_config(p))

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataIOError):
            load_config(tmp_path / "none.yaml")

    def test_unknown_dataclass_key(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("dgp: {n_rows: 5}\n")
        with pytest.raises(ConfigurationError):
            monte_carlo_config(load_config(p))


def test_workers_do_not_change_results():
    cfg = MonteCarloConfig(dgp=MainDgpConfig(n_label=120, n_unlabel=300), ensemble=EnsembleParams(n_learners=4),
                           reps=2, estimators=("biased",), seed=11)
    a, b = run_monte_carlo(cfg), run_monte_carlo(cfg, workers=2)
    np.testing.assert_array_equal(a.points("biased"), b.points("biased"))


def test_progress_callback():
    seen = []
    cfg = MonteCarloConfig(dgp=MainDgpConfig(n_label=120, n_unlabel=300), ensemble=EnsembleParams(n_learners=4),
                           reps=2, estimators=("unbiased",))
    run_monte_carlo(cfg, progress=lambda i, n: seen.append((i, n)))
    assert seen == [(1, 2), (2, 2)]

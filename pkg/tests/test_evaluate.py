import csv
import json
import math

import numpy as np
import pytest
import torch

from citytft.dataio import NormalizationStats
from citytft.evaluate import (
    EvalReport,
    PredictionSeries,
    StatsMismatchError,
    assemble_prediction,
    build_report,
    comparison_rows,
    confusion_counts,
    f1_score,
    mape_nonzero,
    rmse,
    write_report_csv,
    write_report_json,
)
from citytft.model import ModelOutput

STATS = NormalizationStats(
    mean={"heat": 10.0, "cool": -5.0}, std={"heat": 4.0, "cool": 2.0}
)
QUANTILES = (0.1, 0.5, 0.9)


def _output(probs, medians):
    """ModelOutput with the given (n, 2) probabilities and normalized medians."""
    probs = torch.as_tensor(probs, dtype=torch.float64).reshape(1, -1, 2)
    medians = torch.as_tensor(medians, dtype=torch.float64).reshape(1, -1, 2)
    proj = torch.stack([medians - 1.0, medians, medians + 1.0], dim=-1)
    return ModelOutput(trigger_probs=probs, quantile_proj=proj)


class TestAssemble:
    def test_triggered_uses_denormalized_median(self):
        # normalized median 8.0 denormalizes to 8*4+10 = 42 kWh on the heat channel
        out = _output([[0.9, 0.1]], [[8.0, 0.0]])
        series = assemble_prediction(out, STATS, np.array([[40.0, 0.0]]), QUANTILES)
        assert series.predicted[0, 0] == pytest.approx(42.0)
        assert series.predicted[0, 1] == 0.0
        assert series.triggered[0, 0] and not series.triggered[0, 1]

    def test_below_threshold_is_zero_regardless_of_projection(self):
        out = _output([[0.4, 0.4]], [[100.0, -100.0]])
        series = assemble_prediction(out, STATS, np.zeros((1, 2)), QUANTILES)
        assert (series.predicted == 0.0).all()

    def test_threshold_one_silences_everything(self):
        out = _output([[0.999, 0.999]], [[3.0, -3.0]])
        series = assemble_prediction(out, STATS, np.zeros((1, 2)), QUANTILES, threshold=1.0)
        assert (series.predicted == 0.0).all()

    def test_median_required(self):
        out = _output([[0.9, 0.9]], [[0.0, 0.0]])
        with pytest.raises(ValueError, match="median"):
            assemble_prediction(out, STATS, np.zeros((1, 2)), (0.1, 0.9))

    def test_zero_iff_not_triggered(self):
        gen = np.random.default_rng(0)
        probs = gen.uniform(0, 1, (40, 2))
        medians = gen.normal(2, 1, (40, 2))  # denormalized values stay away from 0
        out = _output(probs, medians)
        series = assemble_prediction(out, STATS, np.zeros((40, 2)), QUANTILES, threshold=0.5)
        np.testing.assert_array_equal(series.predicted == 0.0, ~series.triggered)


class TestF1:
    def test_perfect_agreement(self):
        assert f1_score([1, 0, 1], [1, 0, 1]) == 100.0

    def test_hand_enumerated_confusion(self):
        pred = [1, 1, 0, 0]
        actual = [1, 0, 1, 0]
        assert confusion_counts(pred, actual) == (1, 1, 1, 1)
        assert f1_score(pred, actual) == pytest.approx(50.0)

    def test_all_negative_degenerate_rule(self):
        assert f1_score([0, 0, 0], [0, 0, 0]) == 100.0

    def test_no_true_positives(self):
        assert f1_score([1, 1], [0, 0]) == 0.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            f1_score([1, 0], [1])


class TestRmse:
    def test_perfect(self):
        assert rmse([1.0, 2.0], [1.0, 2.0]) == 0.0

    def test_hand_computed_total(self):
        assert rmse([0.0, 3.0], [0.0, 0.0], "all") == pytest.approx(math.sqrt(9 / 2), abs=1e-12)

    def test_empty_nonzero_subset_absent(self):
        assert rmse([0.0, 3.0], [0.0, 0.0], "nonzero") is None

    def test_signed_errors(self):
        # cooling convention: errors on signed values
        assert rmse([-4.0], [-6.0], "all") == pytest.approx(2.0)

    def test_unknown_subset(self):
        with pytest.raises(ValueError):
            rmse([1.0], [1.0], "some")


class TestMape:
    def test_perfect(self):
        assert mape_nonzero([10.0], [10.0]) == 0.0

    def test_single_point(self):
        assert mape_nonzero([8.0], [10.0]) == pytest.approx(20.0)

    def test_hand_mean(self):
        assert mape_nonzero([8.0, 11.0], [10.0, 10.0]) == pytest.approx(15.0)

    def test_empty_subset_absent(self):
        assert mape_nonzero([1.0, 2.0], [0.0, 0.0]) is None

    def test_negative_actuals_use_magnitudes(self):
        assert mape_nonzero([-8.0], [-10.0]) == pytest.approx(20.0)


def _series(predicted, actual, triggered=None):
    predicted = np.asarray(predicted, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if triggered is None:
        triggered = predicted != 0.0
    return PredictionSeries(
        trigger_prob=triggered.astype(float), predicted=predicted, actual=actual,
        triggered=triggered, threshold=0.5,
    )


class TestReports:
    def test_oracle_perfect_predictor(self):
        actual = np.array([[5.0, 0.0], [0.0, -3.0], [2.0, -1.0], [0.0, 0.0]])
        series = _series(actual.copy(), actual)
        for scope in ("overall", "heat_only", "cool_only"):
            report = build_report(series, scope)
            assert report.f1_percent == 100.0
            assert report.rmse_total_kwh == 0.0
            assert report.rmse_nonzero_kwh == 0.0
            assert report.mape_nonzero_percent == 0.0

    def test_scoping_rule(self):
        actual = np.array([[5.0, 0.0], [5.0, -2.0]])
        predicted = np.array([[4.0, 0.0], [5.0, -2.0]])
        heat = build_report(_series(predicted, actual), "heat_only")
        cool = build_report(_series(predicted, actual), "cool_only")
        overall = build_report(_series(predicted, actual), "overall")
        assert heat.n_nonzero == 2 and cool.n_nonzero == 1
        assert overall.n_nonzero == 3
        assert heat.rmse_total_kwh == pytest.approx(math.sqrt(1 / 2))

    def test_confusion_recombination(self):
        gen = np.random.default_rng(1)
        actual = gen.choice([0.0, 4.0], (50, 2)) * np.array([1.0, -1.0])
        predicted = gen.choice([0.0, 4.0], (50, 2)) * np.array([1.0, -1.0])
        series = _series(predicted, actual)
        overall = build_report(series, "overall")
        heat = build_report(series, "heat_only")
        cool = build_report(series, "cool_only")
        for field in ("tp", "fp", "fn", "tn", "n_nonzero"):
            assert getattr(overall, field) == getattr(heat, field) + getattr(cool, field)

    def test_total_rmse_below_nonzero_rmse_on_clean_zeros(self):
        # model exact on true zeros, same per-point error on non-zeros
        actual = np.array([[10.0, 0.0], [0.0, -10.0], [20.0, 0.0]])
        predicted = np.where(np.abs(actual) > 0, actual + 2.0 * np.sign(actual), 0.0)
        report = build_report(_series(predicted, actual), "overall")
        assert report.rmse_total_kwh < report.rmse_nonzero_kwh
        assert report.rmse_nonzero_kwh == pytest.approx(2.0)


class TestBruteForceAgreement:
    """Vectorized metrics against plain-loop references on random instances."""

    @staticmethod
    def _f1_reference(pred, actual):
        tp = sum(1 for p, a in zip(pred, actual) if p and a)
        fp = sum(1 for p, a in zip(pred, actual) if p and not a)
        fn = sum(1 for p, a in zip(pred, actual) if not p and a)
        if tp == 0 and fp == 0 and fn == 0:
            return 100.0
        return 100.0 * 2 * tp / (2 * tp + fp + fn)

    @staticmethod
    def _rmse_reference(pred, actual, nonzero, eps=1e-6):
        pairs = [
            (p, a) for p, a in zip(pred, actual) if (abs(a) > eps if nonzero else True)
        ]
        if not pairs:
            return None
        return math.sqrt(sum((p - a) ** 2 for p, a in pairs) / len(pairs))

    @staticmethod
    def _mape_reference(pred, actual, eps=1e-6):
        pairs = [(p, a) for p, a in zip(pred, actual) if abs(a) > eps]
        if not pairs:
            return None
        return 100.0 * sum(abs(p - a) / abs(a) for p, a in pairs) / len(pairs)

    def test_agreement_on_random_instances(self):
        gen = np.random.default_rng(42)
        for _ in range(200):
            n = int(gen.integers(1, 30))
            actual = gen.choice([0.0, 0.0, 1.0, -1.0], n) * gen.uniform(0.5, 30, n)
            pred = np.where(gen.uniform(size=n) > 0.3, actual + gen.normal(0, 2, n), 0.0)
            assert f1_score(pred != 0, np.abs(actual) > 1e-6) == pytest.approx(
                self._f1_reference(pred != 0, np.abs(actual) > 1e-6), abs=1e-9
            )
            for nonzero in (False, True):
                got = rmse(pred, actual, "nonzero" if nonzero else "all")
                want = self._rmse_reference(pred.tolist(), actual.tolist(), nonzero)
                if want is None:
                    assert got is None
                else:
                    assert got == pytest.approx(want, abs=1e-9)
            got = mape_nonzero(pred, actual)
            want = self._mape_reference(pred.tolist(), actual.tolist())
            if want is None:
                assert got is None
            else:
                assert got == pytest.approx(want, abs=1e-9)


class TestWriters:
    def _rows(self):
        report = EvalReport("overall", 95.0, 2.5, 1.25, 12.0, 10, 1, 1, 8, 11)
        absent = EvalReport("cool_only", 100.0, None, 0.0, None, 0, 0, 0, 20, 0)
        return comparison_rows({"tft": {"overall": report, "heat_only": report, "cool_only": absent}})

    def test_csv_columns_and_absent_cells(self, tmp_path):
        path = tmp_path / "report.csv"
        write_report_csv(path, self._rows())
        with open(path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == [
            "model", "scope", "f1_percent", "rmse_nonzero_kwh", "rmse_total_kwh",
            "mape_nonzero_percent",
        ]
        assert len(rows) == 4
        cool_row = [r for r in rows if r[1] == "cool_only"][0]
        assert cool_row[3] == "" and cool_row[5] == ""

    def test_json_nulls(self, tmp_path):
        path = tmp_path / "report.json"
        write_report_json(path, self._rows())
        data = json.loads(path.read_text())
        cool = [r for r in data if r["scope"] == "cool_only"][0]
        assert cool["rmse_nonzero_kwh"] is None
        assert cool["mape_nonzero_percent"] is None

    def test_stats_mismatch_error_type(self):
        assert issubclass(StatsMismatchError, RuntimeError)

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aadom.anomaly import fit_reference
from aadom.dsp import FrequencyBand
from aadom.errors import InvalidGrid, InvalidP, IoFailure, OneClassOnly
from aadom.metrics import (
    COLUMNS,
    PLOT_COLUMNS,
    THRESHOLD_NOTE,
    EvalReport,
    ScoredSet,
    auc,
    best_band,
    decision_metrics,
    emit_report,
    evaluate_scores,
    pauc,
    report_from_csv,
    report_to_csv,
    report_to_markdown,
    report_to_plotdata,
    run_band_sweep,
    run_threshold_sweep,
)

BAND = FrequencyBand(2000, 5000)


def brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in pos for b in neg)
    return wins / (len(pos) * len(neg))


def _random_set(rng, n=None):
    n = n or int(rng.integers(2, 201))
    labels = rng.integers(0, 2, n)
    labels[0], labels[1] = 0, 1
    # coarse rounding forces ties
    scores = np.round(rng.standard_normal(n) + labels * rng.uniform(0, 2), int(rng.integers(0, 3)))
    return scores, labels


class TestAuc:
    def test_examples(self):
        assert auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75, abs=1e-15)
        assert auc([1, 2, 3, 4], [0, 0, 1, 1]) == 1.0
        assert auc([5.0] * 6, [0, 1, 0, 1, 0, 1]) == 0.5

    def test_one_class(self):
        with pytest.raises(OneClassOnly):
            auc([0.1, 0.2], [1, 1])
        with pytest.raises(OneClassOnly):
            pauc([0.1, 0.2], [0, 0])

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            s, y = _random_set(rng)
            assert abs(auc(s, y) - brute_auc(s, y)) <= 1e-12

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_monotone_transform_invariant(self, seed):
        rng = np.random.default_rng(seed)
        s, y = _random_set(rng, 60)
        assert auc(np.exp(3 * s) + 7, y) == pytest.approx(auc(s, y), abs=1e-12)
        assert auc(-s, y) == pytest.approx(1 - auc(s, y), abs=1e-12)

    def test_scored_set_validation(self):
        with pytest.raises(ValueError):
            ScoredSet([1, 2], [0])
        with pytest.raises(ValueError):
            ScoredSet([1, 2], [0, 2])


class TestPauc:
    def test_perfect_and_reversed(self):
        s, y = [1, 2, 3, 4], [0, 0, 1, 1]
        for p in (0.05, 0.1, 0.5, 1.0):
            assert pauc(s, y, p) == 1.0
            assert pauc([-v for v in s], y, p) == 0.0

    def test_p_one_is_auc(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            s, y = _random_set(rng)
            assert abs(pauc(s, y, 1.0) - auc(s, y)) <= 1e-12

    def test_interpolated_corner(self):
        # ROC: (0,0) -> (0,0.5) -> (0.5,0.5) -> (0.5,1) -> (1,1)
        s, y = [4, 3, 2, 1], [1, 0, 1, 0]
        assert pauc(s, y, 0.1) == pytest.approx(0.5)
        assert pauc(s, y, 0.75) == pytest.approx((0.5 * 0.5 + 0.25 * 1.0) / 0.75)

    def test_invalid_p(self):
        for p in (0.0, -0.1, 1.5):
            with pytest.raises(InvalidP):
                pauc([1, 2], [0, 1], p)

    def test_improves_with_separation(self):
        rng = np.random.default_rng(2)
        s, y = _random_set(rng, 150)
        prev = -1.0
        for shift in (0.0, 0.5, 1.0, 2.0, 4.0, 8.0):
            v = pauc(s + shift * y, y)
            assert v >= prev - 1e-12
            prev = v
        assert 0 <= prev <= 1


class TestDecisionMetrics:
    def test_counts(self):
        m = decision_metrics([0.1, 0.6, 0.7, 0.2], [0, 0, 1, 1], 0.5)
        assert m["precision"] == 0.5 and m["recall"] == 0.5 and m["fpr"] == 0.5
        assert m["f1"] == pytest.approx(0.5)

    def test_undefined_is_nan(self):
        m = decision_metrics([0.1, 0.2], [0, 1], 10.0)
        assert math.isnan(m["precision"]) and m["recall"] == 0.0
        assert math.isnan(decision_metrics([1.0], [1], 0.0)["fpr"])


def _strata_set(seed=0, n=40):
    rng = np.random.default_rng(seed)
    labels = np.tile([0, 1], n // 2)
    scores = rng.standard_normal(n) + 1.5 * labels
    strata = [("Slider", i % 3, "source" if i % 4 < 2 else "target") for i in range(n)]
    return ScoredSet(scores, labels, strata)


class TestEvaluate:
    def test_rows_per_stratum(self):
        r = evaluate_scores(_strata_set(), BAND)
        keys = {(row["section"], row["domain"]) for row in r.rows}
        assert keys == {(s, d) for s in (0, 1, 2, "all") for d in ("source", "target", "all")}
        for row in r.rows:
            assert 0 <= row["value"] <= 1
            assert row["band_lo_hz"] == 2000.0 and row["q"] == ""
        pooled = r.value("auc", section="all", domain="all")
        s = _strata_set()
        assert pooled == auc(s.scores, s.labels)

    def test_one_class_stratum_noted(self):
        s = _strata_set()
        labels = s.labels.copy()
        labels[[i for i, st_ in enumerate(s.strata) if st_[1] == 2]] = 0
        r = evaluate_scores(ScoredSet(s.scores, labels, s.strata), BAND)
        assert any("OneClassOnly" in n and "section 2" in n for n in r.notes)
        assert not any(row["section"] == 2 for row in r.rows)

    def test_all_normal_raises(self):
        s = _strata_set()
        with pytest.raises(OneClassOnly):
            evaluate_scores(ScoredSet(s.scores, np.zeros(len(s)), s.strata), BAND)


class TestThresholdSweep:
    def _setup(self):
        rng = np.random.default_rng(4)
        train = rng.standard_normal((1000, 4))
        ref = fit_reference(train, "mahalanobis")
        test = np.r_[rng.standard_normal((100, 4)), rng.standard_normal((100, 4)) + 1.5]
        labels = np.r_[np.zeros(100), np.ones(100)]
        strata = [("Slider", 0, "source")] * 200
        return ref, train, ScoredSet(ref.distances(test), labels, strata)

    def test_three_rows_per_stratum(self):
        ref, _, s = self._setup()
        r = run_threshold_sweep(ref, s, [0.85, 0.9, 0.95], BAND)
        recall = [row for row in r.rows if row["metric"] == "recall"
                  and row["section"] == 0 and row["domain"] == "source"]
        assert len(recall) == 3
        assert THRESHOLD_NOTE in r.notes

    def test_recall_non_increasing(self):
        ref, _, s = self._setup()
        grid = [0.85 + 0.01 * i for i in range(11)]
        r = run_threshold_sweep({0: ref}, s, grid, BAND)
        rec = [r.value("recall", section="all", domain="all", q=q) for q in grid]
        assert all(b <= a for a, b in zip(rec, rec[1:]))

    def test_train_fpr(self):
        ref, train, _ = self._setup()
        s = ScoredSet(ref.distances(train), np.zeros(1000), [("Slider", 0, "source")] * 1000)
        r = run_threshold_sweep(ref, s, [0.9], BAND)
        assert abs(r.value("fpr", section="all", domain="all") - 0.1) <= 0.03

    @pytest.mark.parametrize("grid", [[], [0.0, 0.5], [0.9, 1.0], [0.9, 0.9]])
    def test_invalid_grid(self, grid):
        ref, _, s = self._setup()
        with pytest.raises(InvalidGrid):
            run_threshold_sweep(ref, s, grid)


def _report():
    r = evaluate_scores(_strata_set(), BAND)
    r.extend(evaluate_scores(_strata_set(1), FrequencyBand(0, 8000)))
    r.notes.append("a note, with a comma")
    return r


class TestEmission:
    def test_csv_round_trip(self):
        r = _report()
        text = report_to_csv(r)
        back = report_from_csv(text)
        assert back.rows == r.rows and back.notes == r.notes
        assert report_to_csv(back) == text
        header = [ln for ln in text.splitlines() if not ln.startswith("# ")][0]
        assert header == ",".join(COLUMNS)

    def test_markdown_layout(self):
        md = report_to_markdown(_report())
        lines = [ln for ln in md.splitlines() if ln.startswith("|")]
        assert lines[0] == "| Machine | 2-5 kHz | 0-8 kHz |"
        assert lines[2].startswith("| Slider | ")
        cells = lines[2].strip("|").split("|")[1:]
        for c in cells:
            a, p = c.strip().split("/")
            assert 0 <= float(a) <= 100 and 0 <= float(p) <= 100

    def test_plotdata_unique_keys(self):
        text = report_to_plotdata(_report())
        rows = [ln.split(",") for ln in text.splitlines()]
        assert tuple(rows[0]) == PLOT_COLUMNS
        keys = [tuple(r[:6]) for r in rows[1:]]
        assert len(keys) == len(set(keys)) == 2 * 3 * 2  # bands x domains x metrics

    def test_emit_atomic_and_failure(self, tmp_path):
        p = emit_report(_report(), "csv", tmp_path / "sub" / "r.csv")
        assert p.read_text() == report_to_csv(_report())
        assert not list(tmp_path.glob("sub/*.tmp"))
        (tmp_path / "blocker").write_text("")
        with pytest.raises(IoFailure):
            emit_report(_report(), "csv", tmp_path / "blocker" / "r.csv")


class TestBandSweep:
    def test_merge_order_and_best(self):
        bands = [FrequencyBand(0, 3000), BAND, FrequencyBand(0, 8000)]

        def one(band):
            s = _strata_set()
            boost = 3.0 if band == BAND else 0.0
            return evaluate_scores(ScoredSet(s.scores + boost * s.labels, s.labels, s.strata), band)

        r = run_band_sweep(bands, one)
        assert r.bands() == bands
        assert best_band(r, "Slider") == BAND

    def test_partial_flush(self, tmp_path):
        def one(band):
            if band.f_lo > 0:
                raise RuntimeError("boom")
            return evaluate_scores(_strata_set(), band)

        with pytest.raises(RuntimeError):
            run_band_sweep([FrequencyBand(0, 3000), BAND], one, tmp_path / "sweep.csv")
        back = report_from_csv((tmp_path / "sweep.csv").read_text())
        assert back.bands() == [FrequencyBand(0, 3000)]

    def test_report_value_lookup(self):
        r = EvalReport()
        with pytest.raises(KeyError):
            r.value("auc")

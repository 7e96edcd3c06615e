import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from postrain.verification import (ContingencyTable, MetricsReport, acc, bias, contingency, csi,
                                   evaluate_split, far, format_report, hss, pod, scores)


def naive_counts(pred, truth, k):
    tp = fp = tn = fn = 0
    for i in range(len(pred)):
        for j in range(len(pred[0])):
            p, t = pred[i][j] == k, truth[i][j] == k
            if p and t:
                tp += 1
            elif p:
                fp += 1
            elif t:
                fn += 1
            else:
                tn += 1
    return tp, fp, tn, fn


def scalar_scores(tp, fp, tn, fn):
    def r(a, b):
        return a / b if b else math.nan
    return {
        "csi": r(tp, tp + fn + fp),
        "pod": r(tp, tp + fn),
        "far": r(fp, tp + fp),
        "bias": r(tp + fp, tp + fn),
        "acc": r(tp + tn, tp + fp + tn + fn),
        "hss": r(2 * (tp * tn - fn * fp), (tp + fn) * (fn + tn) + (tp + fp) * (fp + tn)),
    }


def same(a, b, tol=1e-12):
    if math.isnan(a) or math.isnan(b):
        return math.isnan(a) and math.isnan(b)
    return abs(a - b) <= tol


grids = arrays(np.uint8, st.tuples(st.integers(1, 8), st.integers(1, 8)), elements=st.integers(0, 2))


class TestContingency:
    def test_hand_example(self):
        pred = np.array([[1, 1], [0, 2]])
        truth = np.array([[1, 0], [1, 2]])
        assert contingency(pred, truth, 1) == ContingencyTable(1, 1, 1, 1, 1)
        assert contingency(pred, truth, 2) == ContingencyTable(2, 1, 0, 3, 0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            contingency(np.zeros((2, 2)), np.zeros((2, 3)), 1)

    def test_mask(self):
        pred = np.array([[1, 1], [0, 0]])
        truth = np.array([[1, 0], [1, 0]])
        m = np.array([[True, False], [True, True]])
        assert contingency(pred, truth, 1, m) == ContingencyTable(1, 1, 0, 1, 1)

    @settings(max_examples=60)
    @given(grids, st.data())
    def test_matches_naive(self, pred, data):
        truth = data.draw(arrays(np.uint8, pred.shape, elements=st.integers(0, 2)))
        for k in range(3):
            t = contingency(pred, truth, k)
            assert (t.tp, t.fp, t.tn, t.fn) == naive_counts(pred.tolist(), truth.tolist(), k)
            assert t.total == pred.size

    @settings(max_examples=60)
    @given(grids, st.data())
    def test_swap_symmetry(self, pred, data):
        truth = data.draw(arrays(np.uint8, pred.shape, elements=st.integers(0, 2)))
        for k in range(3):
            a = contingency(pred, truth, k)
            b = contingency(truth, pred, k)
            assert b == a.swapped()
            assert same(csi(a), csi(b))
            assert same(hss(a), hss(b))


class TestScores:
    def test_csi_half(self):
        assert csi(ContingencyTable(1, tp=3, fp=2, tn=0, fn=1)) == 0.5

    def test_perfect(self):
        t = ContingencyTable(1, tp=5, fp=0, tn=7, fn=0)
        assert (csi(t), hss(t), pod(t), far(t), bias(t), acc(t)) == (1, 1, 1, 0, 1, 1)

    def test_alt_denominator_perfect(self):
        # 2 tp tn / (tn^2 + tn tp) = 2 tp / (tp + tn); equals 1 only when tp == tn
        assert hss(ContingencyTable(1, 1, 0, 1, 0), "alt_denominator") == 1.0
        assert hss(ContingencyTable(1, 1, 0, 2, 0), "alt_denominator") == pytest.approx(2 / 3, abs=1e-15)
        assert hss(ContingencyTable(1, 3, 0, 5, 0), "alt_denominator") == pytest.approx(6 / 8, abs=1e-15)

    def test_no_positive_is_undefined(self):
        t = ContingencyTable(2, 0, 0, 10, 0)
        assert math.isnan(csi(t)) and math.isnan(pod(t)) and math.isnan(far(t)) and math.isnan(bias(t))
        assert acc(t) == 1.0

    def test_all_wrong(self):
        t = ContingencyTable(1, tp=0, fp=3, tn=0, fn=4)
        assert csi(t) == 0.0 and pod(t) == 0.0 and far(t) == 1.0

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            hss(ContingencyTable(1, 1, 1, 1, 1), "other")

    def test_large_counts_exact(self):
        n = 3 * 10 ** 9
        t = ContingencyTable(1, n, n, n, n)
        assert hss(t) == 0.0

    @given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
    def test_ranges(self, tp, fp, tn, fn):
        t = ContingencyTable(1, tp, fp, tn, fn)
        s = scores(t)
        for name in ("csi", "pod", "far", "acc"):
            assert math.isnan(s[name]) or 0.0 <= s[name] <= 1.0
        assert math.isnan(s["hss"]) or -1.0 <= s["hss"] <= 1.0
        assert math.isnan(s["bias"]) or s["bias"] >= 0
        ref = scalar_scores(tp, fp, tn, fn)
        for name, v in ref.items():
            assert same(s[name], v)


class TestEvaluateSplit:
    def test_empty(self):
        with pytest.raises(ValueError):
            evaluate_split([], [])

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            evaluate_split([np.zeros((2, 2))], [])

    def test_micro_pools_counts(self):
        rng = np.random.default_rng(0)
        preds = [rng.integers(0, 3, (6, 6)) for _ in range(4)]
        truths = [rng.integers(0, 3, (6, 6)) for _ in range(4)]
        rep = evaluate_split(preds, truths)
        pooled = contingency(np.stack(preds), np.stack(truths), 1)
        assert rep.tables["rain"] == pooled
        assert rep.get("rain", "csi") == csi(pooled)

    def test_macro_averages_defined(self):
        p1, t1 = np.array([[2, 0]]), np.array([[2, 0]])
        p2, t2 = np.array([[0, 0]]), np.array([[0, 0]])
        rep = evaluate_split([p1, p2], [t1, t2], aggregation="macro")
        assert rep.get("heavy_rain", "csi") == 1.0  # sample 2 undefined, ignored

    def test_json_null_and_roundtrip(self):
        rep = evaluate_split([np.zeros((3, 3), np.uint8)], [np.zeros((3, 3), np.uint8)])
        d = json.loads(rep.to_json())
        assert d["classes"]["heavy_rain"]["csi"] is None
        back = MetricsReport.from_dict(d)
        assert back.tables == rep.tables
        assert back.to_json() == rep.to_json()
        assert list(d) == ["aggregation", "n_samples", "n_pixels", "classes"]

    def test_format_has_both_hss(self):
        rep = evaluate_split([np.array([[1, 2]])], [np.array([[1, 2]])])
        txt = format_report(rep, "test")
        for col in ("Acc", "POD", "CSI", "FAR", "Bias", "HSS", "HSS*", "Rain", "Heavy Rain"):
            assert col in txt

import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tempered_nilm.errors import DegenerateError, ShapeError
from tempered_nilm.metrics import (REPORT_FIELDS, Counts, accuracy, confusion, f1, mae, mre,
                                   report)


def loop_counts(pred, true):
    tp = tn = fp = fn = 0
    for p, t in zip(pred, true):
        if p and t:
            tp += 1
        elif not p and not t:
            tn += 1
        elif p:
            fp += 1
        else:
            fn += 1
    return tp, tn, fp, fn


def loop_mae(p, t):
    total = 0.0
    for a, b in zip(p, t):
        total += abs(a - b)
    return total / len(p)


def loop_mre(p, t):
    top = max(t)
    total = 0.0
    for a, b in zip(p, t):
        total += abs(a - b) / top
    return total / len(p)


class TestCounts:
    def test_accuracy_examples(self):
        assert accuracy(Counts(5, 5, 0, 0)) == 1.0
        assert accuracy(Counts(3, 5, 1, 1)) == 0.8

    def test_f1_examples(self):
        assert f1(Counts(10, 0, 0, 0)) == (1.0, False)
        assert f1(Counts(0, 4, 2, 1)) == (0.0, False)
        assert f1(Counts(6, 0, 2, 2)) == (0.75, False)

    def test_degenerate(self):
        assert f1(Counts(0, 9, 0, 0)) == (0.0, True)
        with pytest.raises(DegenerateError):
            accuracy(Counts(0, 0, 0, 0))

    def test_add(self):
        assert Counts(1, 2, 3, 4) + Counts(1, 1, 1, 1) == Counts(2, 3, 4, 5)

    @given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=200))
    def test_confusion_oracle(self, pairs):
        pred, true = zip(*pairs)
        c = confusion(pred, true)
        assert (c.tp, c.tn, c.fp, c.fn) == loop_counts(pred, true)
        assert c.n == len(pairs)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            confusion([True], [True, False])


class TestRegression:
    def test_examples(self):
        assert mre([3.0, 4.0], [3.0, 4.0]) == 0.0
        assert mre([0, 0], [0, 10]) == 0.5
        assert mae([1, 3], [2, 2]) == 1.0
        assert mae([5, 6], [5, 6]) == 0.0

    def test_literal_reading_sums(self):
        assert mre([0, 0], [0, 10], literal=True) == 1.0

    def test_all_zero_truth(self):
        with pytest.raises(DegenerateError):
            mre([1.0], [0.0])
        assert mre([1.0, 0.0], [0.0, 0.0], scale=4.0) == 0.125

    @given(st.lists(st.tuples(st.floats(0, 5e3), st.floats(0.1, 5e3)), min_size=1, max_size=100))
    def test_loop_oracles(self, pairs):
        p, t = map(list, zip(*pairs))
        assert abs(mae(p, t) - loop_mae(p, t)) <= 1e-12 * max(1.0, loop_mae(p, t))
        assert abs(mre(p, t) - loop_mre(p, t)) <= 1e-12 * max(1.0, loop_mre(p, t))


class TestReport:
    def test_fields(self):
        r = report([1.0, 0.0], [1.0, 0.0], [True, False], [True, False])
        assert tuple(r.to_dict()) == REPORT_FIELDS
        assert set(json.loads(r.to_json())) == set(REPORT_FIELDS)
        assert (r.acc, r.f1, r.mae, r.mre, r.n_samples) == (1.0, 1.0, 0.0, 0.0, 2)

    def test_all_off(self):
        r = report([0.0] * 4, [0.0] * 4, [False] * 4, [False] * 4, fallback_scale=400)
        assert r.acc == 1.0 and r.f1 == 0.0 and r.degenerate_f1
        assert r.mre == 0.0

    def test_all_off_needs_scale(self):
        with pytest.raises(DegenerateError):
            report([1.0], [0.0], [False], [False])

    def test_random_against_loops(self):
        rs = np.random.default_rng(0)
        p, t = rs.random(300) * 100, rs.random(300) * 100
        pon, ton = p > 50, t > 40
        r = report(p, t, pon, ton)
        tp, tn, fp, fn = loop_counts(pon, ton)
        assert (r.tp, r.tn, r.fp, r.fn) == (tp, tn, fp, fn)
        assert r.acc == pytest.approx((tp + tn) / 300, abs=1e-12)
        assert r.f1 == pytest.approx(2 * tp / (2 * tp + fp + fn), abs=1e-12)

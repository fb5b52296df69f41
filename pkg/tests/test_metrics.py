import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from isgib.metrics import MetricReport, accuracy, format_pm, mean_std, roc_auc, score


def auc_oracle(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y != 1]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def test_accuracy_worked_example():
    assert accuracy([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4]], [0, 1, 1]) == pytest.approx(2 / 3)


def test_accuracy_ties_take_lowest_index():
    assert accuracy([[0.5, 0.5]], [0]) == 1.0


def test_accuracy_errors():
    with pytest.raises(ValueError):
        accuracy([0, 1], [0])
    with pytest.raises(ValueError):
        accuracy(np.zeros((0, 2)), [])


def test_auc_perfect_and_inverted():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert roc_auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0
    assert roc_auc([0.5, 0.5], [0, 1]) == 0.5


def test_auc_single_class():
    with pytest.raises(ValueError):
        roc_auc([0.1, 0.2], [1, 1])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 1)), min_size=2, max_size=5)
       .filter(lambda xs: len({y for _, y in xs}) == 2))
def test_auc_matches_pair_counting(pairs):
    s, y = zip(*pairs)
    assert roc_auc(s, y) == pytest.approx(auc_oracle(s, y), abs=1e-9)


def test_score_roc_uses_class_one_probability():
    logits = np.array([[0.0, 2.0], [1.0, 0.0], [0.0, 0.5]])
    assert score("roc_auc", logits, [1, 0, 0]) == 1.0
    with pytest.raises(ValueError):
        score("f1", logits, [1, 0, 0])


def test_mean_std_and_format():
    assert mean_std([0.8, 0.9, 1.0]) == pytest.approx((0.9, 0.1))
    assert mean_std([0.5]) == (0.5, 0.0)
    assert format_pm([0.8, 0.9, 1.0]) == "90.00 ± 10.00"
    with pytest.raises(ValueError):
        mean_std([])


def test_report():
    r = MetricReport("accuracy", [0.5, 0.7])
    assert r.mean == pytest.approx(0.6)
    assert str(r).startswith("accuracy: 60.00 ± ")
    with pytest.raises(ValueError):
        MetricReport("accuracy", [1.2])


def test_worked_examples():
    assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert accuracy([0, 1, 1, 2], [0, 1, 2, 2]) == 0.75
    assert accuracy([1, 1], [0, 0]) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(-20, 20), min_size=4, max_size=8), st.integers(0, 1000))
def test_auc_monotone_invariance(scores, seed):
    labels = np.random.default_rng(seed).integers(0, 2, len(scores))
    labels[:2] = [0, 1]
    s = np.array(scores) / 4.0
    assert roc_auc(np.exp(s) * 3 + 1, labels) == roc_auc(s, labels)


def test_accuracy_shift_invariance(rng):
    logits, labels = rng.normal(size=(20, 4)), rng.integers(0, 4, 20)
    assert accuracy(logits + 7.5, labels) == accuracy(logits, labels)

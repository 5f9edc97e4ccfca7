import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from couda.data import Dataset
from couda.metrics import MetricsError, MetricsReport, confusion_matrix, evaluate, macro_metrics, report_from_predictions
from couda.model import Architecture, CoudaModel


def test_confusion_diagonal_when_perfect():
    cm = confusion_matrix([0, 1, 2, 2], [0, 1, 2, 2], 3)
    assert cm.tolist() == [[1, 0, 0], [0, 1, 0], [0, 0, 2]]


def test_confusion_empty():
    assert confusion_matrix([], [], 2).tolist() == [[0, 0], [0, 0]]


def test_confusion_counting_example():
    assert confusion_matrix([0, 0, 1, 1], [0, 1, 1, 0], 2).tolist() == [[1, 1], [1, 1]]


def test_confusion_errors():
    with pytest.raises(MetricsError):
        confusion_matrix([0, 1], [0], 2)
    with pytest.raises(MetricsError):
        confusion_matrix([0, 2], [0, 1], 2)


def test_macro_perfect():
    mp, mr, mf, per = macro_metrics(np.diag([3, 4, 5]))
    assert (mp, mr, mf) == (1.0, 1.0, 1.0)
    assert [c.support for c in per] == [3, 4, 5]


def test_macro_hand_example():
    mp, mr, mf, per = macro_metrics([[2, 0], [1, 1]])
    # independent scalar computation
    p = (2 / 3, 1 / 1)
    r = (2 / 2, 1 / 2)
    f = tuple(2 * a * b / (a + b) for a, b in zip(p, r))
    assert [c.precision for c in per] == pytest.approx(p, abs=1e-15)
    assert [c.recall for c in per] == pytest.approx(r, abs=1e-15)
    assert [c.f1 for c in per] == pytest.approx([0.8, 2 / 3], abs=1e-15)
    assert mf == pytest.approx(sum(f) / 2, abs=1e-15)
    assert mf == pytest.approx(11 / 15, abs=1e-15)


def test_zero_support_class_counts_as_zero():
    mp, mr, mf, per = macro_metrics([[3, 0, 0], [0, 2, 0], [0, 0, 0]])
    assert per[2].precision == per[2].recall == per[2].f1 == 0.0
    assert mf == pytest.approx(2 / 3)


cm_strategy = st.lists(st.lists(st.integers(0, 20), min_size=3, max_size=3), min_size=3, max_size=3)


@settings(max_examples=200, deadline=None)
@given(cm_strategy)
def test_macro_f1_between_class_extremes(cm):
    mp, mr, mf, per = macro_metrics(cm)
    f1s = [c.f1 for c in per]
    assert min(f1s) - 1e-12 <= mf <= max(f1s) + 1e-12
    assert all(0 <= v <= 1 for v in (mp, mr, mf))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)), max_size=60), st.permutations([0, 1, 2]))
def test_metrics_invariant_under_class_relabeling(pairs, perm):
    pred = [p for p, _ in pairs]
    truth = [t for _, t in pairs]
    a = report_from_predictions(pred, truth, 3)
    perm = np.array(perm)
    b = report_from_predictions(perm[pred] if pred else [], perm[truth] if truth else [], 3)
    assert a.accuracy == b.accuracy
    assert a.macro_f1 == pytest.approx(b.macro_f1, abs=1e-15)
    assert a.macro_precision == pytest.approx(b.macro_precision, abs=1e-15)
    cm = np.array(a.confusion)
    assert cm.sum() == len(pairs)
    if pairs:
        assert a.accuracy == np.trace(cm) / cm.sum()


def test_evaluate_zero_model_predicts_class_zero():
    m = CoudaModel(Architecture(), seed=0)
    for k, v in m.params.items():
        if k.startswith("C"):
            v.data = np.zeros_like(v.data)
    y = np.array([0, 0, 1, 2, 0, 1, 2, 0])
    ds = Dataset(np.random.default_rng(0).normal(size=(8, 2)), y, None, "target")
    rep = evaluate(m, ds)
    assert rep.accuracy == np.mean(y == 0)
    assert [row[0] for row in rep.confusion] == np.bincount(y).tolist()


def test_evaluate_deterministic_and_json_round_trip():
    m = CoudaModel(Architecture(), seed=1)
    rng = np.random.default_rng(1)
    ds = Dataset(rng.normal(size=(30, 2)), rng.integers(0, 3, size=30), None, "target")
    a, b = evaluate(m, ds), evaluate(m, ds)
    assert a.to_json() == b.to_json()
    d = json.loads(a.to_json())
    assert set(d) == {"accuracy", "macro_precision", "macro_recall", "macro_f1", "per_class", "confusion", "noise_diag"}
    assert set(d["per_class"][0]) == {"precision", "recall", "f1", "support"}
    assert MetricsReport.from_dict(d) == a
    assert 0 < a.noise_diag < 1


def test_evaluate_single_network_uses_first_peer():
    m = CoudaModel(Architecture(single_network=True), seed=2)
    rng = np.random.default_rng(2)
    ds = Dataset(rng.normal(size=(20, 2)), rng.integers(0, 3, size=20), None, "target")
    pred = np.argmax(m.classify(1, m.forward_features(1, ds.x)).data, axis=1)
    assert evaluate(m, ds).confusion == confusion_matrix(pred, ds.y_clean, 3).tolist()


def test_evaluate_requires_clean_labels():
    m = CoudaModel(Architecture(), seed=0)
    with pytest.raises(MetricsError):
        evaluate(m, Dataset(np.zeros((2, 2)), None, None, "target"))


def test_argmax_ties_go_to_lowest_index():
    m = CoudaModel(Architecture(), seed=0)
    for k, v in m.params.items():
        if k.startswith("C"):
            v.data = np.zeros_like(v.data)
    ds = Dataset(np.ones((3, 2)), np.array([1, 1, 1]), None, "target")
    assert evaluate(m, ds).confusion[1] == [3, 0, 0]

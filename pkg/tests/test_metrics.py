import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import average_precision_score, roc_auc_score

from impressood.evalharness import metrics

import oracles

FNS = [
    (metrics.auroc, oracles.auroc),
    (metrics.tnr_at_tpr, oracles.tnr_at_tpr),
    (metrics.detection_accuracy, oracles.detection_accuracy),
    (metrics.aupr_in, oracles.aupr_in),
]


def test_auroc_examples():
    assert metrics.auroc([1, 2], [3, 4]) == 1.0
    assert metrics.auroc([1, 2, 3], [1, 2, 3]) == 0.5
    assert metrics.auroc([1, 3], [2, 4]) == 0.75


def test_tnr_examples():
    id_s = np.arange(1, 101)
    assert metrics.tnr_at_tpr(id_s, [50, 96, 200]) == pytest.approx(2 / 3)
    assert metrics.tnr_at_tpr([1, 2, 3], [10, 11]) == 1.0
    assert metrics.tnr_at_tpr([5, 6, 7], [1, 2]) == 0.0


def test_detection_accuracy_examples():
    assert metrics.detection_accuracy([1, 2], [3, 4]) == 1.0
    assert metrics.detection_accuracy([1, 2], [1, 2]) == 0.5
    assert metrics.detection_accuracy([1, 3], [2, 4]) == 0.75


def test_aupr_examples():
    assert metrics.aupr_in([1, 2], [3, 4]) == 1.0
    assert metrics.aupr_in([1, 2], [1, 2]) == pytest.approx(0.5)
    # thresholds 1..4 give (recall, precision) (.5,1) (.5,.5) (1,2/3) (1,.5)
    assert metrics.aupr_in([1, 3], [2, 4]) == pytest.approx(0.5 + 0.5 * 2 / 3)
    assert metrics.aupr_in([1, 3], [2, 4]) == pytest.approx(oracles.aupr_in([1, 3], [2, 4]))


@pytest.mark.parametrize("fn", [f for f, _ in FNS])
def test_empty_input_rejected(fn):
    with pytest.raises(ValueError):
        fn([], [1.0])
    with pytest.raises(ValueError):
        fn([1.0], [])


def _random_instance(rng):
    n_id, n_ood = rng.integers(1, 13, size=2)
    # few distinct values so ties are common
    levels = rng.integers(2, 8)
    return (rng.integers(0, levels, n_id).astype(float),
            rng.integers(0, levels, n_ood).astype(float))


def test_oracle_equivalence_randomized():
    rng = np.random.default_rng(1234)
    for _ in range(250):
        id_s, ood_s = _random_instance(rng)
        for fn, oracle in FNS:
            assert abs(fn(id_s, ood_s) - oracle(list(id_s), list(ood_s))) < 1e-9


def test_agrees_with_sklearn():
    rng = np.random.default_rng(7)
    for _ in range(50):
        id_s, ood_s = _random_instance(rng)
        if len(id_s) == 0 or len(ood_s) == 0:
            continue
        y = np.r_[np.zeros(len(id_s)), np.ones(len(ood_s))]
        s = np.r_[id_s, ood_s]
        assert metrics.auroc(id_s, ood_s) == pytest.approx(roc_auc_score(y, s), abs=1e-12)
        assert metrics.aupr_in(id_s, ood_s) == pytest.approx(
            average_precision_score(1 - y, -s), abs=1e-12)


scores = st.lists(st.integers(-5, 5).map(float), min_size=1, max_size=12)


@settings(max_examples=100, deadline=None)
@given(scores, scores)
def test_metrics_in_unit_interval(id_s, ood_s):
    for fn, _ in FNS:
        assert 0.0 <= fn(id_s, ood_s) <= 1.0


@settings(max_examples=100, deadline=None)
@given(scores, scores)
def test_rank_invariance(id_s, ood_s):
    f = lambda v: np.exp(np.asarray(v) / 3.0) * 7 - 2
    for fn in (metrics.auroc, metrics.tnr_at_tpr, metrics.detection_accuracy):
        assert fn(f(id_s), f(ood_s)) == pytest.approx(fn(id_s, ood_s), abs=1e-12)

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.metrics import adjusted_rand_score, silhouette_score

from more_kit.metrics import (ari, batch_entropy, label_transfer_accuracy, per_class_recall,
                              silhouette, summarize, transfer_split)


def test_ari_examples():
    assert ari([0, 0, 1, 1], [1, 1, 0, 0]) == 1.0
    assert ari([0, 0, 1, 1], [0, 1, 0, 1]) == pytest.approx(-0.5)
    with pytest.raises(ValueError):
        ari([0], [0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 4)), min_size=2, max_size=40))
def test_ari_matches_reference(pairs):
    a, b = map(np.array, zip(*pairs))
    assert ari(a, b) == pytest.approx(adjusted_rand_score(a, b), abs=1e-10)
    assert ari(a, b) == pytest.approx(ari(b, a), abs=1e-12)


def test_silhouette_matches_reference(rng):
    X = rng.standard_normal((60, 3))
    y = np.arange(60) % 3
    assert silhouette(X, y, block=7) == pytest.approx(silhouette_score(X, y), abs=1e-10)
    with pytest.raises(ValueError):
        silhouette(X, np.zeros(60))


def test_batch_entropy_bounds(rng):
    X = rng.standard_normal((40, 2))
    b = np.arange(40) % 2
    assert 0.0 <= batch_entropy(X, b) <= 1.0
    split = np.r_[np.zeros(20), 100 + np.zeros(20)][:, None] + rng.standard_normal((40, 1)) * 0.01
    assert batch_entropy(split, np.r_[np.zeros(20, int), np.ones(20, int)], k=5) == 0.0
    assert batch_entropy(X, np.zeros(40, int)) == 1.0


def test_label_transfer_and_recall():
    ref = np.array([[0.0], [0.1], [10.0], [10.1]])
    assert label_transfer_accuracy(ref, [0, 0, 1, 1], np.array([[0.05], [9.9]]), [0, 1], k=1) == 1.0
    assert per_class_recall([0, 0, 1, 2], [0, 1, 1, 0]) == {0: 0.5, 1: 1.0, 2: 0.0}
    with pytest.raises(ValueError):
        label_transfer_accuracy(ref, [0, 0, 1, 1], ref, [0, 0, 1, 1], k=5)


def test_transfer_split():
    ref, query = transfer_split([0, 1, 0, 2])
    assert ref.tolist() == [0, 2] and query.tolist() == [1, 3]
    ref, query = transfer_split(np.zeros(9, int), seed=3)
    assert sorted(np.r_[ref, query].tolist()) == list(range(9))


def test_summarize_keys(rng):
    X = rng.standard_normal((30, 4))
    out = summarize(X, np.arange(30) % 2)
    assert out["ari"] is None and out["n_cells"] == 30
    y = np.arange(30) % 3
    y[0] = -1
    out = summarize(X + 5 * y[:, None], np.arange(30) % 2, y, label_names=["a", "b", "c"])
    assert out["ari"] == pytest.approx(1.0)
    assert set(out["per_class_recall"]) <= {"a", "b", "c"}

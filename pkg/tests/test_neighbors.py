import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from more_kit.neighbors import knn


def brute(query, ref, k, exclude_self=False):
    out = []
    for i, q in enumerate(query):
        d = ((ref - q) ** 2).sum(axis=1)
        cand = [(d[j], j) for j in range(len(ref)) if not (exclude_self and j == i)]
        out.append([j for _, j in sorted(cand)[:k]])
    return np.array(out)


@settings(max_examples=50, deadline=None)
@given(arrays(np.int64, st.tuples(st.integers(2, 25), st.integers(1, 3)),
              elements=st.integers(-2, 2)), st.integers(1, 5), st.booleans())
def test_matches_brute_force_with_ties(points, k, exclude_self):
    # small integer grids create many exact distance ties
    X = points.astype(np.float64)
    k = min(k, len(X) - 1)
    idx, dist = knn(X, X, k, exclude_self=exclude_self, block=7)
    assert np.array_equal(idx, brute(X, X, k, exclude_self))
    assert np.all(np.diff(dist, axis=1) >= 0)


def test_tie_goes_to_lower_index():
    ref = np.array([[1.0], [-1.0], [1.0], [-1.0]])
    idx, _ = knn(np.zeros((1, 1)), ref, 2)
    assert idx.tolist() == [[0, 1]]


def test_exclude_self():
    X = np.arange(5.0)[:, None]
    idx, _ = knn(X, X, 1, exclude_self=True)
    assert idx.ravel().tolist() == [1, 0, 1, 2, 3]


@pytest.mark.parametrize("k", [0, 6])
def test_bad_k(k):
    with pytest.raises(ValueError):
        knn(np.zeros((2, 1)), np.zeros((5, 1)), k)

import numpy as np
import pytest
from sklearn.base import clone

from more_kit.harmony import HarmonyLite, init_state, objective, run_harmony, soft_assign
from more_kit.metrics import batch_entropy
from more_kit.synthetic import gaussian_batches


def test_single_batch_is_noop(rng):
    Z = rng.standard_normal((50, 5))
    out = run_harmony(Z, np.zeros(50, int), K=5)
    assert np.allclose(out, Z, atol=1e-10)
    assert batch_entropy(out, np.zeros(50, int)) == 1.0


def test_assignments_are_distributions(rng):
    Z = rng.standard_normal((40, 4))
    state = init_state(Z, np.arange(40) % 2, K=6)
    R = soft_assign(state)
    assert np.all(R >= 0) and np.allclose(R.sum(axis=1), 1.0)
    assert np.isfinite(objective(state)).all()


def test_deterministic_for_seed():
    X, _, b = gaussian_batches(3)
    assert np.array_equal(run_harmony(X, b, seed=1), run_harmony(X, b, seed=1))


def test_raises_entropy_on_offset_batches():
    X, _, b = gaussian_batches(0)
    out = HarmonyLite().fit_transform(X, batches=b)
    assert batch_entropy(out, b) > batch_entropy(X, b)


def test_estimator_api():
    est = HarmonyLite(n_clusters=5)
    assert clone(est).get_params()["n_clusters"] == 5
    with pytest.raises(ValueError):
        est.fit(np.zeros((4, 2)))
    with pytest.raises(ValueError):
        run_harmony(np.zeros((4, 2)), [0, 1, 0, 1], rounds=0)

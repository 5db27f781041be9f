import numpy as np
import pytest

from more_kit.backbone import BackboneSpec, BackboneWeights, encode, init_frozen_backbone

SMALL = dict(n_tokens=12, d_model=16, n_layers=2, n_heads=4, ffn_dim=32)


@pytest.fixture(scope="module")
def weights():
    return init_frozen_backbone(BackboneSpec(**SMALL))


def test_hash_determinism():
    a = init_frozen_backbone(BackboneSpec(**SMALL, seed=1))
    b = init_frozen_backbone(BackboneSpec(**SMALL, seed=1))
    c = init_frozen_backbone(BackboneSpec(**SMALL, seed=2))
    assert a.hash == b.hash != c.hash
    assert a.hash == a.content_hash()


def test_modalities_differ():
    a = init_frozen_backbone(BackboneSpec(modality=0, **SMALL))
    b = init_frozen_backbone(BackboneSpec(modality=1, **SMALL))
    assert a.hash != b.hash


def test_heads_must_divide():
    with pytest.raises(ValueError):
        BackboneSpec(d_model=64, n_heads=5)


def test_weights_are_read_only(weights):
    with pytest.raises(ValueError):
        weights["gene_emb"][0, 0] = 1.0


def test_default_parameter_count():
    w = init_frozen_backbone(BackboneSpec())
    assert w.n_params == 165_760


def test_encode_deterministic(weights, rng):
    x = rng.random(12)
    a, b = encode(weights, x), encode(weights, x)
    assert a.shape == (16,) and np.array_equal(a, b)


def test_batch_equals_rows(weights, rng):
    X = rng.random((9, 12))
    full = encode(weights, X, chunk=4)
    for i in (0, 4, 8):
        assert np.array_equal(encode(weights, X[i:i + 1])[0], full[i])
    assert np.allclose(encode(weights, X[3]), full[3], rtol=0, atol=1e-12)


def test_permutation_symmetry(weights, rng):
    x = rng.random(12)
    perm = rng.permutation(12)
    tensors = {k: np.array(weights[k]) for k in weights.names()}
    tensors["gene_emb"] = tensors["gene_emb"][perm]
    permuted = BackboneWeights(weights.spec, tensors)
    assert np.allclose(encode(permuted, x[perm]), encode(weights, x), atol=1e-12)


def test_zero_input_is_identity_tokens(weights):
    z = encode(weights, np.zeros(12))
    tensors = {k: np.array(weights[k]) for k in weights.names()}
    tensors["value_proj"] = np.full_like(tensors["value_proj"], 123.0)
    assert np.all(np.isfinite(z))
    assert np.array_equal(encode(BackboneWeights(weights.spec, tensors), np.zeros(12)), z)


def test_lipschitz_sanity(weights, rng):
    x = rng.random(12)
    delta = rng.standard_normal(12)
    delta *= 1e-6 / np.linalg.norm(delta)
    assert np.linalg.norm(encode(weights, x + delta) - encode(weights, x)) <= 1e-3


def test_encode_errors(weights):
    with pytest.raises(ValueError):
        encode(weights, np.zeros(11))
    with pytest.raises(ValueError):
        encode(weights, np.full(12, np.nan))


def test_sections_round_trip(weights):
    back = BackboneWeights.from_sections(weights.to_sections(), 0)
    assert back.hash == weights.hash and back.spec == weights.spec

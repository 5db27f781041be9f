import numpy as np
import pytest

from more_kit.backbone import BackboneSpec, encode, init_frozen_backbone
from more_kit.gradcheck import check_gradients, random_instance
from more_kit.losses import LossWeights
from more_kit.model import HeadDims, MoreParams, forward
from more_kit.synthetic import gaussian_batches
from more_kit.train import (TrainConfig, TrainData, TrainingError, loss_and_grads, sample_mask,
                            train)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradients_match_finite_differences(seed):
    errs = check_gradients(seed)
    assert max(errs.values()) < 1e-4, errs


def test_gradients_full_decoder_and_single_modality():
    assert max(check_gradients(7, decoder_rank=0, n_modalities=1, depth=1).values()) < 1e-4


def test_gradients_with_missing_labels():
    params, z_raw, batch, labels, targets, mask = random_instance(3)
    labels = labels.copy()
    labels[:3] = -1
    tr = forward(params, z_raw, batch, mask)
    _, _, g = loss_and_grads(params, tr, labels, targets, LossWeights())
    assert all(np.all(np.isfinite(v)) for v in g.values())


def test_zero_weights_zero_gradients():
    params, z_raw, batch, labels, targets, mask = random_instance(0)
    tr = forward(params, z_raw, batch, mask)
    terms, total, g = loss_and_grads(params, tr, labels, targets, LossWeights(0, 0, 0, 0, 0))
    assert total == 0.0
    assert all(np.all(v == 0) for v in g.values())


def test_omega_gradient_is_product():
    # with only the alignment term off and a linear readout, d/d omega = z_m * upstream
    params, z_raw, batch, labels, targets, mask = random_instance(4, n_modalities=1, depth=0)
    w = LossWeights(1.0, 0.0, 0.0, 0.0, 0.0)
    tr = forward(params, z_raw, batch, mask)
    _, _, g = loss_and_grads(params, tr, labels, targets, w)
    from more_kit.losses import ce_grad
    _, dlogits = ce_grad(tr.logits, labels)
    upstream = dlogits @ params["classifier.w"]
    assert np.allclose(g["fusion.omega.m0"], (tr.z[0] * upstream).sum(axis=0))


def _data(seed=0, n=120):
    X, c, b = gaussian_batches(seed, n_cells=n)
    bb = init_frozen_backbone(BackboneSpec(n_tokens=20, d_model=16, n_layers=1, n_heads=2,
                                           ffn_dim=32))
    z = encode(bb, X)
    z = (z - z.mean(0)) / z.std(0)
    dims = HeadDims(d=16, n_batches=2, n_classes=3, n_genes=20, adapter_dim=8, decoder_rank=4)
    return MoreParams.init(dims, 0), TrainData([z], b, c, X), bb


def test_zero_learning_rate_keeps_params():
    params, data, _ = _data()
    out, hist = train(params, data, TrainConfig(epochs=2, lr=0.0))
    assert all(np.array_equal(out[k], params[k]) for k in params.tensors)
    assert len(hist) == 2


def test_deterministic_history():
    params, data, _ = _data()
    cfg = TrainConfig(epochs=3, batch_size=32, seed=5)
    a, ha = train(params, data, cfg)
    b, hb = train(params, data, cfg)
    assert ha == hb
    assert all(np.array_equal(a[k], b[k]) for k in a.tensors)


def test_loss_decreases_and_backbone_frozen():
    params, data, bb = _data(n=300)
    h0 = bb.hash
    _, hist = train(params, data, TrainConfig(epochs=10, batch_size=64), backbones=[bb])
    assert hist[9]["total"] < hist[0]["total"]
    assert bb.content_hash() == h0
    assert all(np.isfinite(v) for h in hist for v in h.values())


def test_nan_aborts_with_location():
    params, data, _ = _data()
    data.z_raw[0][5, 0] = np.nan
    with pytest.raises(TrainingError, match="epoch 0, minibatch"):
        train(params, data, TrainConfig(epochs=1, batch_size=32))


def test_labels_required_for_supervised_terms():
    params, data, _ = _data()
    data.labels[:] = -1
    with pytest.raises(ValueError):
        train(params, data, TrainConfig(epochs=1))
    train(params, data, TrainConfig(epochs=1), LossWeights(0, 0, 0.5, 0, 0.5))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)


def test_sample_mask(rng):
    m = sample_mask(rng, 20, 0.15)
    assert m.size == 3 and np.all(np.diff(m) > 0)
    assert sample_mask(rng, 20, 0.0).size == 0

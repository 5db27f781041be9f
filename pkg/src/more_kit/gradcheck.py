"""Finite-difference oracle for the head's analytic gradients."""
from __future__ import annotations

from typing import Dict

import numpy as np

from .losses import LossWeights
from .model import HeadDims, MoreParams, forward
from .train import loss_and_grads


def random_instance(seed: int, n_cells: int = 8, d: int = 16, n_classes: int = 3,
                    n_batches: int = 2, n_modalities: int = 2, n_genes: int = 12,
                    adapter_dim: int = 16, decoder_rank: int = 4, depth: int = 2):
    """Random head, inputs and labels where every parameter gets a gradient."""
    rng = np.random.default_rng(seed)
    dims = HeadDims(d=d, n_modalities=n_modalities, n_batches=n_batches, n_classes=n_classes,
                    n_genes=n_genes, adapter_dim=adapter_dim, decoder_rank=decoder_rank,
                    depth=depth)
    params = MoreParams.init(dims, seed)
    for name, v in params.tensors.items():
        params[name] = v + 0.3 * rng.standard_normal(v.shape)
    z_raw = [rng.standard_normal((n_cells, d)) for _ in range(n_modalities)]
    batch = np.arange(n_cells) % n_batches
    labels = np.arange(n_cells) % n_classes
    rng.shuffle(labels)
    targets = rng.standard_normal((n_cells, n_genes))
    mask = np.sort(rng.choice(n_genes, size=max(1, n_genes // 3), replace=False))
    return params, z_raw, batch, labels, targets, mask


def numerical_gradients(params: MoreParams, z_raw, batch, labels, targets, mask,
                        weights: LossWeights, h: float = 1e-5) -> Dict[str, np.ndarray]:
    def f(p):
        return loss_and_grads(p, forward(p, z_raw, batch, mask), labels, targets, weights,
                              need_grads=False)[1]

    out = {}
    for name, tensor in params.tensors.items():
        g = np.zeros_like(tensor)
        flat = tensor.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(params)
            flat[i] = orig - h
            fm = f(params)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        out[name] = g
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Max-norm error relative to the larger of the two gradients' max norms."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    err = np.abs(analytic - numeric).max(initial=0.0)
    if scale < floor:
        return err
    return err / scale


def check_gradients(seed: int, weights: LossWeights = LossWeights(), h: float = 1e-5,
                    **instance) -> Dict[str, float]:
    params, z_raw, batch, labels, targets, mask = random_instance(seed, **instance)
    _, _, analytic = loss_and_grads(params, forward(params, z_raw, batch, mask), labels,
                                    targets, weights)
    numeric = numerical_gradients(params, z_raw, batch, labels, targets, mask, weights, h)
    return {name: relative_error(analytic[name], numeric[name]) for name in analytic}

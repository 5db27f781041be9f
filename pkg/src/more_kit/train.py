"""Composite objective, analytic backward pass, Adam and the training loop."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .losses import (LossWeights, align_grad, ce_grad, intra_grad, mse_grad,
                     supcon_grad, total_loss)
from .model import ForwardTrace, MoreParams, forward

logger = logging.getLogger(__name__)

TERMS = ("ce", "supcon", "align", "intra", "mse")


class TrainingError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("minibatch size must be >= 2")
        if self.lr < 0:
            raise ValueError("learning rate must be nonnegative")


@dataclass
class TrainData:
    """Frozen-encoder outputs plus what the objective needs.

    ``targets`` is the decoder target (cells x G), ``labels`` uses -1 for
    unlabeled cells.
    """

    z_raw: List[Optional[np.ndarray]]
    batch: np.ndarray
    labels: np.ndarray
    targets: np.ndarray
    present: Optional[np.ndarray] = None

    @property
    def n_cells(self) -> int:
        return len(self.batch)

    def take(self, idx: np.ndarray) -> "TrainData":
        return TrainData([None if z is None else z[idx] for z in self.z_raw], self.batch[idx],
                         self.labels[idx], self.targets[idx],
                         None if self.present is None else self.present[idx])


def loss_and_grads(params: MoreParams, trace: ForwardTrace, labels: np.ndarray,
                   targets: np.ndarray, weights: LossWeights, need_grads: bool = True):
    """Loss terms, weighted total and exact gradients for every trainable tensor.

    With ``need_grads=False`` the gradient slot is ``None``.
    """
    dims = params.dims
    y = trace.refined
    labels = np.asarray(labels, dtype=np.int64)
    terms: Dict[str, float] = {}

    ce, g_logits = ce_grad(trace.logits, labels)
    terms["ce"] = ce
    sc, g_sc = supcon_grad(y, labels, weights.tau)
    terms["supcon"] = 0.0 if sc is None else sc
    al, g_zs, g_zf_align = align_grad(trace.z, trace.z_f, trace.present)
    terms["align"] = al
    intra, g_intra = intra_grad(y, labels)
    terms["intra"] = intra
    if trace.mask is not None and trace.mask.size:
        mse, g_pred = mse_grad(trace.predictions, targets[:, trace.mask])
    else:
        mse, g_pred = 0.0, None
    terms["mse"] = mse
    total = total_loss(terms, weights)
    if not need_grads:
        return terms, total, None

    grads = params.zeros_like()
    g_logits = weights.ce * g_logits
    grads["classifier.w"] = g_logits.T @ y
    grads["classifier.b"] = g_logits.sum(axis=0)
    dy = g_logits @ params["classifier.w"] + weights.supcon * g_sc + weights.var * g_intra

    if g_pred is not None:
        g_pred = weights.mse * g_pred
        mask = trace.mask
        np.add.at(grads["decoder.b"], mask, g_pred.sum(axis=0))
        if dims.decoder_rank:
            u = params["decoder.u"][mask]
            np.add.at(grads["decoder.u"], mask, g_pred.T @ trace.decoder_latent)
            g_latent = g_pred @ u
            grads["decoder.v"] = g_latent.T @ y
            dy = dy + g_latent @ params["decoder.v"]
        else:
            np.add.at(grads["decoder.w"], mask, g_pred.T @ y)
            dy = dy + g_pred @ params["decoder.w"][mask]

    w1, w2 = params["refiner.w1"], params["refiner.w2"]
    for t in reversed(range(dims.depth)):
        g, u = trace.refine_hidden[t], trace.refine_inputs[t]
        grads["refiner.w2"] += dy.T @ g
        grads["refiner.b2"] += dy.sum(axis=0)
        da = (dy @ w2) * (1.0 - g ** 2)
        grads["refiner.w1"] += da.T @ u
        grads["refiner.b1"] += da.sum(axis=0)
        du = da @ w1
        np.add.at(grads["batch_emb"], trace.batch, -du)
        dy = dy + du

    dz_f = dy + weights.align * g_zf_align
    for m, z in enumerate(trace.z):
        if z is None:
            continue
        p = trace.present[:, m, None]
        grads[f"fusion.omega.m{m}"] = (dz_f * z * p).sum(axis=0)
        dz = dz_f * params[f"fusion.omega.m{m}"] * p + weights.align * g_zs[m]
        h = trace.adapter_hidden[m]
        grads[f"adapter.m{m}.w2"] = dz.T @ h
        grads[f"adapter.m{m}.b2"] = dz.sum(axis=0)
        da = (dz @ params[f"adapter.m{m}.w2"]) * (1.0 - h ** 2)
        grads[f"adapter.m{m}.w1"] = da.T @ trace.z_raw[m]
        grads[f"adapter.m{m}.b1"] = da.sum(axis=0)

    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for tensor {name!r}")
    return terms, total, grads


def backward(params: MoreParams, trace: ForwardTrace, labels, targets,
             weights: LossWeights) -> Dict[str, np.ndarray]:
    return loss_and_grads(params, trace, labels, targets, weights)[2]


class Adam:
    def __init__(self, params: MoreParams, cfg: TrainConfig):
        self.cfg = cfg
        self.m = params.zeros_like()
        self.v = params.zeros_like()
        self.t = 0

    def step(self, params: MoreParams, grads: Dict[str, np.ndarray]) -> None:
        cfg = self.cfg
        self.t += 1
        c1 = 1.0 - cfg.beta1 ** self.t
        c2 = 1.0 - cfg.beta2 ** self.t
        for name, g in grads.items():
            m, v = self.m[name], self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            params[name] = params[name] - cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


def sample_mask(rng: np.random.Generator, n_genes: int, rate: float) -> np.ndarray:
    if rate <= 0:
        return np.zeros(0, dtype=np.int64)
    size = max(1, int(round(rate * n_genes)))
    return np.sort(rng.choice(n_genes, size=size, replace=False))


def _minibatches(order: np.ndarray, size: int) -> List[np.ndarray]:
    chunks = [order[i:i + size] for i in range(0, len(order), size)]
    # a trailing singleton cannot host a contrastive positive
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks.pop()])
    return chunks


def train(params: MoreParams, data: TrainData, cfg: TrainConfig = TrainConfig(),
          weights: LossWeights = LossWeights(), backbones: Sequence = ()):
    """Minibatch Adam over the composite objective.

    Returns ``(trained_params, history)``; ``history`` has one dict per epoch
    with the mean of each term and of the weighted total. ``params`` is not
    modified. Backbone hashes, if given, are re-checked at the end.
    """
    needs_labels = weights.ce > 0 or weights.supcon > 0 or weights.var > 0
    if needs_labels and not np.any(data.labels >= 0):
        raise ValueError("label-dependent loss terms have positive weight but no cell is labeled")
    hashes = [b.hash for b in backbones]
    params = params.copy()
    opt = Adam(params, cfg)
    rng = np.random.default_rng(cfg.seed)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(data.n_cells)
        sums = dict.fromkeys(TERMS + ("total",), 0.0)
        batches = _minibatches(order, cfg.batch_size)
        for step, idx in enumerate(batches):
            part = data.take(idx)
            mask = sample_mask(rng, params.dims.n_genes, weights.mask_rate)
            trace = forward(params, part.z_raw, part.batch, mask, part.present)
            try:
                terms, total, grads = loss_and_grads(params, trace, part.labels,
                                                     part.targets, weights)
            except (TrainingError, FloatingPointError) as exc:
                raise TrainingError(f"epoch {epoch}, minibatch {step}: {exc}") from exc
            if not np.isfinite(total):
                raise TrainingError(f"NaN loss at epoch {epoch}, minibatch {step}")
            opt.step(params, grads)
            for k, v in terms.items():
                sums[k] += v
            sums["total"] += total
        history.append({k: v / len(batches) for k, v in sums.items()})
        logger.debug("epoch %d total %.5f", epoch, history[-1]["total"])
    for b, h in zip(backbones, hashes):
        if b.content_hash() != h:
            raise TrainingError("frozen backbone weights changed during training")
    return params, history

"""Training objectives.

Every ``*_grad`` helper returns ``(value, gradient wrt its main input)``;
the plain functions are the scalar losses.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

NORM_EPS = 1e-12


class DegenerateBatchError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    ce: float = 1.0
    supcon: float = 0.5
    align: float = 0.5
    var: float = 0.1
    mse: float = 0.5
    tau: float = 0.1
    mask_rate: float = 0.15

    def __post_init__(self):
        if min(self.ce, self.supcon, self.align, self.var, self.mse) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.tau <= 0:
            raise ValueError("temperature must be positive")
        if not 0.0 <= self.mask_rate < 1.0:
            raise ValueError("mask rate must lie in [0, 1)")

    def as_dict(self):
        return {"ce": self.ce, "supcon": self.supcon, "align": self.align,
                "intra": self.var, "mse": self.mse}


def _log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def ce_grad(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over rows with ``label >= 0``."""
    logits = np.atleast_2d(logits)
    labels = np.atleast_1d(labels)
    grad = np.zeros_like(logits)
    rows = np.flatnonzero(labels >= 0)
    if rows.size == 0:
        return 0.0, grad
    if labels.max() >= logits.shape[1]:
        raise ValueError(f"label out of range [0, {logits.shape[1]})")
    logp = _log_softmax(logits[rows])
    value = -logp[np.arange(rows.size), labels[rows]].mean()
    p = np.exp(logp)
    p[np.arange(rows.size), labels[rows]] -= 1.0
    grad[rows] = p / rows.size
    return float(value), grad


def loss_ce(logits, label) -> float:
    label_arr = np.atleast_1d(np.asarray(label))
    if np.any(label_arr < 0):
        raise ValueError("label out of range")
    return ce_grad(np.asarray(logits, dtype=np.float64), label_arr)[0]


def supcon_grad(emb: np.ndarray, labels: np.ndarray, tau: float):
    """Supervised contrastive loss on L2-normalized rows.

    Anchors without a same-label partner are skipped; rows with label < 0
    take no part. Returns ``(None, zeros)`` when no anchor has a positive.
    """
    n, d = emb.shape
    grad = np.zeros_like(emb)
    rows = np.flatnonzero(labels >= 0)
    y, lab = emb[rows], labels[rows]
    pos = (lab[:, None] == lab[None, :])
    np.fill_diagonal(pos, False)
    n_pos = pos.sum(axis=1)
    anchors = n_pos > 0
    if not anchors.any():
        return None, grad
    norms = np.maximum(np.linalg.norm(y, axis=1, keepdims=True), NORM_EPS)
    zh = y / norms
    S = zh @ zh.T / tau
    np.fill_diagonal(S, -np.inf)
    logp = S - S.max(axis=1, keepdims=True)
    logp = logp - np.log(np.exp(logp).sum(axis=1, keepdims=True))
    np.fill_diagonal(logp, 0.0)
    per_anchor = -(np.where(pos, logp, 0.0).sum(axis=1)[anchors] / n_pos[anchors])
    value = per_anchor.mean()

    prob = np.exp(logp)
    np.fill_diagonal(prob, 0.0)
    dS = prob - pos / np.maximum(n_pos, 1)[:, None]
    dS[~anchors] = 0.0
    dS /= anchors.sum()
    dzh = (dS + dS.T) @ zh / tau
    dy = (dzh - zh * np.einsum("ij,ij->i", zh, dzh)[:, None]) / norms
    grad[rows] = dy
    return float(value), grad


def loss_supcon(embeddings, labels, tau: float = 0.1) -> float:
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if emb.shape[0] < 2:
        raise DegenerateBatchError("supervised contrastive loss needs at least two samples")
    value, _ = supcon_grad(emb, labels, tau)
    if value is None:
        raise DegenerateBatchError("no anchor has a same-label partner in this batch")
    return value


def align_grad(zs: Sequence[Optional[np.ndarray]], z_f: np.ndarray,
               present: Optional[np.ndarray] = None):
    """Mean over present (modality, cell) pairs of ||z_m - z_f||^2 / d."""
    z_f = np.atleast_2d(z_f)
    n, d = z_f.shape
    if present is None:
        present = np.column_stack([np.full(n, z is not None) for z in zs])
    count = present.sum()
    grads = [None if z is None else np.zeros_like(z) for z in zs]
    gf = np.zeros_like(z_f)
    if count == 0:
        return 0.0, grads, gf
    total = 0.0
    for m, z in enumerate(zs):
        if z is None:
            continue
        diff = (np.atleast_2d(z) - z_f) * present[:, m, None]
        total += float((diff ** 2).sum())
        g = 2.0 * diff / (count * d)
        grads[m] = g.reshape(np.shape(z))
        gf -= g
    return total / (count * d), grads, gf


def loss_align(zs, z_f) -> float:
    zs = [None if z is None else np.atleast_2d(np.asarray(z, dtype=np.float64)) for z in zs]
    if all(z is None for z in zs):
        raise ValueError("alignment needs at least one modality")
    return align_grad(zs, np.asarray(z_f, dtype=np.float64))[0]


def intra_grad(emb: np.ndarray, labels: np.ndarray):
    """Class-averaged mean squared distance to the class centroid."""
    grad = np.zeros_like(emb)
    classes = np.unique(labels[labels >= 0])
    if classes.size == 0:
        return 0.0, grad
    value = 0.0
    for c in classes:
        idx = np.flatnonzero(labels == c)
        diff = emb[idx] - emb[idx].mean(axis=0)
        value += (diff ** 2).sum() / idx.size
        grad[idx] = 2.0 * diff / (idx.size * classes.size)
    return float(value / classes.size), grad


def loss_intra(embeddings, labels) -> float:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0 or not np.any(labels >= 0):
        raise ValueError("intra-class loss needs labels")
    return intra_grad(np.asarray(embeddings, dtype=np.float64), labels)[0]


def mse_grad(predictions: np.ndarray, targets: np.ndarray):
    """``predictions`` and ``targets`` are both restricted to the masked positions."""
    if predictions.size == 0:
        return 0.0, np.zeros_like(predictions)
    diff = predictions - targets
    return float((diff ** 2).mean()), 2.0 * diff / diff.size


def loss_masked_mse(predictions, targets, mask_set) -> float:
    """Mean squared error over masked positions.

    ``targets`` is the full expression vector (or cells x G matrix);
    ``predictions`` is already aligned to ``mask_set``.
    """
    mask = np.asarray(mask_set, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.float64)
    predictions = np.asarray(predictions, dtype=np.float64)
    if mask.size == 0:
        return 0.0
    return mse_grad(predictions, targets[..., mask])[0]


def total_loss(terms: Mapping[str, float], weights: LossWeights) -> float:
    """Weighted sum over the terms ``ce``, ``supcon``, ``align``, ``intra``, ``mse``."""
    lam = weights.as_dict()
    unknown = set(terms) - set(lam)
    if unknown:
        raise KeyError(f"unknown loss terms {sorted(unknown)}")
    vals = [float(v) for v in terms.values()]
    if not all(np.isfinite(vals)):
        raise FloatingPointError("non-finite loss term")
    return float(sum(lam[k] * float(v) for k, v in terms.items()))

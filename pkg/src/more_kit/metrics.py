"""Clustering and integration metrics over embeddings."""
from __future__ import annotations

from typing import Dict

import numpy as np
from scipy.special import comb
from sklearn.cluster import KMeans

from .neighbors import knn, sq_distances


def _comb2(x):
    return comb(x, 2, exact=False)


def contingency(a, b) -> np.ndarray:
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    return table


def ari(labels_a, labels_b) -> float:
    """Adjusted Rand index from pair counts."""
    a, b = np.asarray(labels_a), np.asarray(labels_b)
    if a.shape != b.shape or a.size < 2:
        raise ValueError("ARI needs two labelings of equal length >= 2")
    table = contingency(a, b)
    index = _comb2(table).sum()
    sum_a = _comb2(table.sum(axis=1)).sum()
    sum_b = _comb2(table.sum(axis=0)).sum()
    total = _comb2(a.size)
    expected = sum_a * sum_b / total
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        # both partitions trivial in the same way
        return 1.0
    return float((index - expected) / (max_index - expected))


def silhouette(embeddings, labels, block: int = 1024) -> float:
    """Mean silhouette width; singleton clusters score 0, as do 0/0 cases."""
    X = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    classes, inv = np.unique(labels, return_inverse=True)
    if classes.size < 2:
        raise ValueError("silhouette needs at least two clusters")
    counts = np.bincount(inv)
    onehot = np.eye(classes.size)[inv]
    scores = np.empty(X.shape[0])
    for start in range(0, X.shape[0], block):
        stop = min(start + block, X.shape[0])
        D = np.sqrt(sq_distances(X[start:stop], X))
        sums = D @ onehot
        own = inv[start:stop]
        rows = np.arange(stop - start)
        own_n = counts[own]
        a = np.where(own_n > 1, sums[rows, own] / np.maximum(own_n - 1, 1), 0.0)
        means = sums / counts
        means[rows, own] = np.inf
        b = means.min(axis=1)
        denom = np.maximum(a, b)
        s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
        scores[start:stop] = np.where(own_n > 1, s, 0.0)
    return float(scores.mean())


def batch_entropy(embeddings, batches, k: int = 15, n_batches=None) -> float:
    """Mean normalized entropy of batch labels among each cell's k neighbors."""
    if k < 1:
        raise ValueError("k must be >= 1")
    batches = np.asarray(batches, dtype=np.int64)
    B = int(batches.max()) + 1 if n_batches is None else n_batches
    if B <= 1:
        return 1.0
    idx, _ = knn(embeddings, embeddings, min(k, len(batches) - 1), exclude_self=True)
    nb = batches[idx]
    props = np.stack([(nb == b).mean(axis=1) for b in range(B)], axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.where(props > 0, props * np.log(props), 0.0).sum(axis=1)
    return float(ent.mean() / np.log(B))


def _vote(neigh_labels: np.ndarray, n_classes: int) -> np.ndarray:
    counts = np.stack([(neigh_labels == c).sum(axis=1) for c in range(n_classes)], axis=1)
    return counts.argmax(axis=1)


def knn_predict(train_emb, train_labels, test_emb, k: int) -> np.ndarray:
    train_labels = np.asarray(train_labels, dtype=np.int64)
    if k > len(train_labels):
        raise ValueError(f"k={k} exceeds the {len(train_labels)} reference cells")
    idx, _ = knn(test_emb, train_emb, k)
    return _vote(train_labels[idx], int(train_labels.max()) + 1)


def label_transfer_accuracy(train_emb, train_labels, test_emb, test_labels, k: int = 15) -> float:
    """kNN label transfer accuracy; vote ties go to the lowest label."""
    if k < 1:
        raise ValueError("k must be >= 1")
    pred = knn_predict(train_emb, train_labels, test_emb, k)
    return float(np.mean(pred == np.asarray(test_labels)))


def per_class_recall(true, pred, n_classes=None) -> Dict[int, float]:
    true, pred = np.asarray(true), np.asarray(pred)
    n_classes = int(true.max()) + 1 if n_classes is None else n_classes
    out = {}
    for c in range(n_classes):
        sel = true == c
        if sel.any():
            out[c] = float(np.mean(pred[sel] == c))
    return out


def transfer_split(batches, seed: int = 0):
    """Reference/query split for label transfer: batch 0 vs the rest, or a
    seeded half split when there is a single batch."""
    batches = np.asarray(batches)
    if np.unique(batches).size > 1:
        return np.flatnonzero(batches == 0), np.flatnonzero(batches != 0)
    order = np.random.default_rng(seed).permutation(len(batches))
    half = len(order) // 2
    return np.sort(order[:half]), np.sort(order[half:])


def summarize(embeddings, batches, labels=None, k: int = 15, seed: int = 0,
              label_names=None) -> Dict[str, object]:
    """Metric dictionary shared by the CLI commands.

    Keys: ``n_cells``, ``batch_entropy`` and, when labels are given,
    ``ari`` (k-means with one cluster per class), ``silhouette``,
    ``label_transfer_accuracy`` and ``per_class_recall`` (of the transfer
    predictions, keyed by label name). Label-based keys are ``None`` when
    no cell is labeled. Cells with label -1 are ignored by label metrics.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    batches = np.asarray(batches, dtype=np.int64)
    out: Dict[str, object] = {"n_cells": int(len(emb)),
                              "batch_entropy": batch_entropy(emb, batches, k)}
    out.update(ari=None, silhouette=None, label_transfer_accuracy=None, per_class_recall=None)
    if labels is None:
        return out
    labels = np.asarray(labels, dtype=np.int64)
    keep = labels >= 0
    classes = np.unique(labels[keep])
    if classes.size < 2:
        return out
    e, y, b = emb[keep], labels[keep], batches[keep]
    km = KMeans(classes.size, n_init=10, random_state=seed).fit_predict(e)
    out["ari"] = ari(km, y)
    out["silhouette"] = silhouette(e, y)
    ref, query = transfer_split(b, seed)
    kk = min(k, ref.size)
    if ref.size and query.size:
        pred = knn_predict(e[ref], y[ref], e[query], kk)
        out["label_transfer_accuracy"] = float(np.mean(pred == y[query]))
        recall = per_class_recall(y[query], pred, int(y.max()) + 1)
        out["per_class_recall"] = {(label_names[c] if label_names else str(c)): v
                                   for c, v in recall.items()}
    return out

"""Cell-type annotation: classifier labels, cluster majority vote and
propagation of confident labels to uncertain neighbors."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
from sklearn.cluster import KMeans

from .embedder import predict_labels
from .io import ExpressionMatrix, write_table
from .model import MoreParams
from .neighbors import knn


@dataclass
class AnnotationResult:
    predicted: np.ndarray
    confidence: np.ndarray
    clusters: np.ndarray
    voted: np.ndarray
    final: np.ndarray
    # round in which each cell last changed; 0 for cells never relabeled
    stabilized_round: np.ndarray

    def to_columns(self, barcodes: Sequence[str], names: Optional[Sequence[str]] = None) -> Dict:
        def named(labels):
            return [names[v] for v in labels] if names else list(labels)

        return {"barcode": list(barcodes), "predicted": named(self.predicted),
                "confidence": list(self.confidence), "voted": named(self.voted),
                "final": named(self.final), "stabilized_round": list(self.stabilized_round)}


def predict(params: MoreParams, embeddings):
    """``(labels, confidences)`` from the classifier head."""
    return predict_labels(params, embeddings)


def majority_vote(labels, clusters) -> np.ndarray:
    """Give every cell its cluster's most frequent label (ties to the lowest)."""
    labels = np.asarray(labels, dtype=np.int64)
    _, inv = np.unique(np.asarray(clusters), return_inverse=True)
    counts = np.zeros((inv.max() + 1, labels.max() + 1), dtype=np.int64)
    np.add.at(counts, (inv, labels), 1)
    return counts.argmax(axis=1)[inv]


def cluster(embeddings, n_clusters: int, seed: int = 0) -> np.ndarray:
    n_clusters = min(n_clusters, len(embeddings))
    return KMeans(n_clusters, n_init=10, random_state=seed).fit_predict(embeddings)


def propagate_refine(labels, confidences, embeddings, k: int = 15, conf_threshold: float = 0.7,
                     max_rounds: int = 5):
    """Relabel uncertain cells from their ``k`` nearest confident neighbors.

    Updates are synchronous: each round votes against the previous round's
    labels. Confident cells never change. Returns ``(final, stabilized_round)``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    labels = np.asarray(labels, dtype=np.int64).copy()
    conf = np.asarray(confidences, dtype=np.float64)
    emb = np.asarray(embeddings, dtype=np.float64)
    rounds = np.zeros(len(labels), dtype=np.int64)
    confident = np.flatnonzero(conf >= conf_threshold)
    uncertain = np.flatnonzero(conf < conf_threshold)
    if confident.size == 0 or uncertain.size == 0:
        return labels, rounds
    idx, _ = knn(emb[uncertain], emb[confident], min(k, confident.size))
    n_classes = int(labels.max()) + 1
    for r in range(1, max_rounds + 1):
        # neighbors are confident, so their labels are fixed; one round
        # reaches the fixed point, later rounds only confirm it
        neigh = labels[confident][idx]
        counts = np.stack([(neigh == c).sum(axis=1) for c in range(n_classes)], axis=1)
        new = counts.argmax(axis=1)
        changed = new != labels[uncertain]
        if not changed.any():
            break
        labels[uncertain] = new
        rounds[uncertain[changed]] = r
    return labels, rounds


def annotate(params: MoreParams, embeddings, n_clusters: Optional[int] = None, k: int = 15,
             conf_threshold: float = 0.7, max_rounds: int = 5, seed: int = 0) -> AnnotationResult:
    """Predict, vote within k-means clusters, then propagate to uncertain cells."""
    emb = np.asarray(embeddings, dtype=np.float64)
    labels, conf = predict(params, emb)
    K = 2 * params.dims.n_classes if n_clusters is None else n_clusters
    clusters = cluster(emb, K, seed)
    voted = majority_vote(labels, clusters)
    final, rounds = propagate_refine(voted, conf, emb, k, conf_threshold, max_rounds)
    return AnnotationResult(labels, conf, clusters, voted, final, rounds)


def marker_report(em: ExpressionMatrix, labels, markers: Sequence[str],
                  label_names: Optional[Sequence[str]] = None) -> Dict[str, List]:
    """Mean expression of each marker gene per final label."""
    lookup = {g: j for j, g in enumerate(em.gene_names)}
    missing = [g for g in markers if g not in lookup]
    if missing:
        raise KeyError(f"marker genes not in the matrix: {missing}")
    labels = np.asarray(labels)
    classes = np.unique(labels)
    cols = [lookup[g] for g in markers]
    sub = em.X[:, cols].toarray()
    out: Dict[str, List] = {"label": [label_names[c] if label_names else c for c in classes]}
    for j, g in enumerate(markers):
        out[g] = [float(sub[labels == c, j].mean()) for c in classes]
    return out


def write_annotation(path, result: AnnotationResult, barcodes, names=None, header=None) -> None:
    write_table(path, result.to_columns(barcodes, names), header, float_fmt="{:.6f}")

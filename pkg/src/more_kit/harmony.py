"""Simplified Harmony: soft k-means with a batch-diversity penalty and
per-cluster mean-shift correction.

Clustering runs on L2-normalized rows (cosine geometry, as Harmony does),
while corrections are applied to the embeddings as given.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.cluster import kmeans_plusplus
from sklearn.utils.validation import check_array

from .neighbors import sq_distances

TINY = 1e-12


@dataclass
class HarmonyState:
    Z: np.ndarray            # embeddings being corrected, cells x k
    batch: np.ndarray
    n_batches: int
    R: np.ndarray            # soft assignments, cells x K
    centroids: np.ndarray    # K x k, in clustering geometry
    lambda_div: float = 1.0
    sigma: float = 0.1
    normalize: bool = True
    iteration: int = 0

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    def cluster_space(self) -> np.ndarray:
        if not self.normalize:
            return self.Z
        norms = np.linalg.norm(self.Z, axis=1, keepdims=True)
        return self.Z / np.maximum(norms, TINY)

    def batch_onehot(self) -> np.ndarray:
        return np.eye(self.n_batches)[self.batch]

    def observed_expected(self):
        """Soft batch counts per cluster, ``O`` and ``E`` (both K x B)."""
        Phi = self.batch_onehot()
        O = self.R.T @ Phi
        pr_b = Phi.mean(axis=0)
        E = self.R.sum(axis=0)[:, None] * pr_b[None, :]
        return O, E


def init_state(Z, batch, K: int = 20, lambda_div: float = 1.0, sigma: float = 0.1,
               seed: int = 0, normalize: bool = True, n_batches: Optional[int] = None) -> HarmonyState:
    Z = np.asarray(Z, dtype=np.float64)
    batch = np.asarray(batch, dtype=np.int64)
    K = min(K, Z.shape[0])
    n_batches = int(batch.max()) + 1 if n_batches is None else n_batches
    state = HarmonyState(Z.copy(), batch, n_batches, np.full((Z.shape[0], K), 1.0 / K),
                         np.zeros((K, Z.shape[1])), lambda_div, sigma, normalize)
    X = state.cluster_space()
    centers, _ = kmeans_plusplus(X, K, random_state=seed)
    state.centroids = centers
    # plain soft k-means assignment to start from
    state.R = _soft_kmeans(X, centers, sigma)
    return state


def _soft_kmeans(X, centroids, sigma, log_penalty=None):
    logits = -sq_distances(X, centroids) / sigma
    if log_penalty is not None:
        logits = logits + log_penalty
    logits -= logits.max(axis=1, keepdims=True)
    R = np.exp(logits)
    return R / R.sum(axis=1, keepdims=True)


def soft_assign(state: HarmonyState) -> np.ndarray:
    """Update centroids, then R with the ``(E/O)^lambda`` diversity penalty."""
    if state.sigma <= 0:
        raise ValueError("sigma must be positive")
    X = state.cluster_space()
    weight = state.R.sum(axis=0)
    state.centroids = (state.R.T @ X) / np.maximum(weight, TINY)[:, None]
    if state.normalize:
        state.centroids /= np.maximum(np.linalg.norm(state.centroids, axis=1, keepdims=True), TINY)
    log_penalty = None
    if state.lambda_div != 0:
        O, E = state.observed_expected()
        ratio = np.log(np.maximum(E, TINY)) - np.log(np.maximum(O, TINY))
        # cell i pays the penalty of its own batch in each cluster
        log_penalty = state.lambda_div * ratio[:, state.batch].T
    state.R = _soft_kmeans(X, state.centroids, state.sigma, log_penalty)
    return state.R


def objective(state: HarmonyState):
    """Return ``(clustering, diversity, total)``.

    Clustering is the R-weighted squared distance plus ``sigma`` times the
    assignment entropy term; diversity is the KL of observed vs expected
    batch counts per cluster.
    """
    X = state.cluster_space()
    R = state.R
    dist = (R * sq_distances(X, state.centroids)).sum()
    entropy = (R * np.log(np.maximum(R, TINY))).sum()
    clustering = float(dist + state.sigma * entropy)
    O, E = state.observed_expected()
    mask = O > TINY
    diversity = float((O[mask] * np.log(O[mask] / np.maximum(E[mask], TINY))).sum())
    return clustering, diversity, clustering + state.lambda_div * diversity


def correct(state: HarmonyState) -> np.ndarray:
    """Shift each cell by its soft share of (batch mean - cluster mean)."""
    Z, R = state.Z, state.R
    weight = R.sum(axis=0)
    mu = (R.T @ Z) / np.maximum(weight, TINY)[:, None]
    shift = np.zeros_like(Z)
    for b in range(state.n_batches):
        rows = np.flatnonzero(state.batch == b)
        if rows.size == 0:
            continue
        Rb = R[rows]
        wb = Rb.sum(axis=0)
        mu_b = (Rb.T @ Z[rows]) / np.maximum(wb, TINY)[:, None]
        delta = np.where(wb[:, None] > TINY, mu_b - mu, 0.0)
        shift[rows] = Rb @ delta
    state.Z = Z - shift
    return state.Z


def run_harmony(embeddings, batches, K: int = 20, lambda_div: float = 1.0, sigma: float = 0.1,
                rounds: int = 10, seed: int = 0, normalize: bool = True) -> np.ndarray:
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    state = init_state(embeddings, batches, K, lambda_div, sigma, seed, normalize)
    for _ in range(rounds):
        soft_assign(state)
        correct(state)
        state.iteration += 1
    return state.Z


class HarmonyLite(BaseEstimator):
    """Batch correction of an embedding; ``batches`` goes to ``fit``/``fit_transform``."""

    def __init__(self, n_clusters=20, lambda_div=1.0, sigma=0.1, rounds=10, seed=0,
                 normalize=True):
        self.n_clusters = n_clusters
        self.lambda_div = lambda_div
        self.sigma = sigma
        self.rounds = rounds
        self.seed = seed
        self.normalize = normalize

    def fit(self, X, y=None, batches=None):
        self.fit_transform(X, y, batches=batches)
        return self

    def fit_transform(self, X, y=None, batches=None):
        X = check_array(X, dtype=np.float64)
        if batches is None:
            raise ValueError("HarmonyLite needs per-cell batch labels")
        self.embedding_ = run_harmony(X, batches, self.n_clusters, self.lambda_div, self.sigma,
                                      self.rounds, self.seed, self.normalize)
        return self.embedding_

"""Scrublet-style doublet simulation, scoring and calling."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.signal import find_peaks
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .neighbors import knn
from .prep import normalize_log1p, pca, select_hvg

logger = logging.getLogger(__name__)

UNIMODAL_FALLBACK = 0.25


@dataclass(frozen=True)
class DoubletConfig:
    rho: float = 0.06
    r: float = 2.0
    k: int = 20
    pca_dims: int = 30
    n_hvg: int = 2000
    target_sum: float = 1e4
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise ValueError("expected doublet rate rho must lie in (0, 1)")
        if self.r <= 0:
            raise ValueError("simulated-to-observed ratio r must be positive")
        if self.k < 1 or self.k_adj < 1:
            raise ValueError("neighbor count must be >= 1")

    @property
    def k_adj(self) -> int:
        return int(round(self.k * (1.0 + self.r)))


@dataclass
class DoubletScores:
    q: np.ndarray
    ld: np.ndarray
    n_sim_neighbors: np.ndarray
    k_adj: int
    rho: float
    r: float
    z: Optional[np.ndarray] = None
    is_doublet: Optional[np.ndarray] = None
    threshold: Optional[float] = None
    sim_ld: Optional[np.ndarray] = None


def doublet_likelihood(q, rho: float, r: float):
    """Posterior doublet probability from the simulated-neighbor fraction ``q``."""
    q = np.asarray(q, dtype=np.float64)
    a = rho / r
    # same as (1 - rho) - q (1 - rho - a), arranged so q = 0 and q = 1 are exact
    denom = (1.0 - rho) * (1.0 - q) + q * a
    if np.any(denom <= 0):
        raise FloatingPointError("doublet likelihood denominator is not positive")
    return q * a / denom


def doublet_likelihood_dq(q, rho: float, r: float):
    q = np.asarray(q, dtype=np.float64)
    a = rho / r
    c = 1.0 - rho
    denom = c * (1.0 - q) + q * a
    return a * c / denom ** 2


def simulate_doublets(counts, cfg: DoubletConfig, rng: Optional[np.random.Generator] = None):
    """Sum random pairs of distinct observed cells, then normalize and log1p.

    Returns ``(simulated, parents)`` where ``parents`` is ``(n_sim, 2)``.
    """
    counts = sp.csr_matrix(counts, dtype=np.float64)
    n = counts.shape[0]
    if n < 2:
        raise ValueError("need at least two observed cells to simulate doublets")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    n_sim = int(round(cfg.r * n))
    first = rng.integers(0, n, size=n_sim)
    # second parent drawn uniformly from the other n - 1 cells
    second = rng.integers(0, n - 1, size=n_sim)
    second = second + (second >= first)
    sim = counts[first] + counts[second]
    return normalize_log1p(sim, cfg.target_sum), np.column_stack([first, second])


def doublet_scores(observed_emb: np.ndarray, simulated_emb: np.ndarray,
                   cfg: DoubletConfig) -> DoubletScores:
    """Score cells from the share of simulated doublets among their neighbors.

    The kNN runs over observed and simulated cells together, excluding the
    query itself. Simulated cells are scored too (``sim_ld``) so a threshold
    can be learned from them.
    """
    observed_emb = np.asarray(observed_emb, dtype=np.float64)
    simulated_emb = np.asarray(simulated_emb, dtype=np.float64)
    if observed_emb.shape[1] != simulated_emb.shape[1]:
        raise ValueError("observed and simulated embeddings differ in dimension")
    n_obs = observed_emb.shape[0]
    joint = np.vstack([observed_emb, simulated_emb])
    k_adj = min(cfg.k_adj, joint.shape[0] - 1)
    idx, _ = knn(joint, joint, k_adj, exclude_self=True)
    n_sim = (idx >= n_obs).sum(axis=1)
    q = (n_sim + 1.0) / (k_adj + 2.0)
    ld = doublet_likelihood(q, cfg.rho, cfg.r)
    return DoubletScores(q=q[:n_obs], ld=ld[:n_obs], n_sim_neighbors=n_sim[:n_obs],
                         k_adj=k_adj, rho=cfg.rho, r=cfg.r, sim_ld=ld[n_obs:])


def call_doublets(scores: DoubletScores, threshold: float) -> DoubletScores:
    """Attach z-scores and calls; SE comes from the delta method on ``q``.

    Where the standard error vanishes the z-score is +/-inf (0 if the score
    sits exactly on the threshold).
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    q = scores.q
    se_q = np.sqrt(q * (1.0 - q) / (scores.k_adj + 2.0))
    se = np.abs(doublet_likelihood_dq(q, scores.rho, scores.r)) * se_q
    diff = scores.ld - threshold
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, diff / np.where(se > 0, se, 1.0), np.sign(diff) * np.inf)
    z = np.where(diff == 0, 0.0, z)
    scores.z = z
    scores.is_doublet = scores.ld > threshold
    scores.threshold = float(threshold)
    return scores


def auto_threshold(sim_ld, n_bins: int = 50, min_prominence: float = 0.1) -> float:
    """Valley between the two dominant modes of the simulated-score histogram.

    Falls back to 0.25 when fewer than two modes stand out by at least
    ``min_prominence`` of the tallest bin (after light [1, 2, 1] smoothing).
    """
    sim_ld = np.asarray(sim_ld, dtype=np.float64)
    if sim_ld.size < 20:
        raise ValueError(f"need >= 20 simulated scores for a threshold, got {sim_ld.size}")
    hist, edges = np.histogram(np.clip(sim_ld, 0.0, 1.0), bins=n_bins, range=(0.0, 1.0))
    padded = np.concatenate([[0.0], hist.astype(np.float64), [0.0]])
    smooth = (padded[:-2] + 2.0 * padded[1:-1] + padded[2:]) / 4.0
    peaks, props = find_peaks(np.concatenate([[0.0], smooth, [0.0]]),
                              prominence=min_prominence * smooth.max())
    peaks = peaks - 1
    if peaks.size < 2:
        return UNIMODAL_FALLBACK
    top = np.sort(peaks[np.lexsort((peaks, -smooth[peaks]))[:2]])
    between = np.arange(top[0], top[1] + 1)
    valley = between[np.argmin(smooth[between])]
    return float(0.5 * (edges[valley] + edges[valley + 1]))


class ScrubletDetector(BaseEstimator):
    """Doublet detector over a raw cells x genes count matrix.

    ``threshold=None`` learns the cut from the simulated-score histogram.
    """

    def __init__(self, rho=0.06, r=2.0, k=20, pca_dims=30, n_hvg=2000,
                 target_sum=1e4, threshold=None, seed=0):
        self.rho = rho
        self.r = r
        self.k = k
        self.pca_dims = pca_dims
        self.n_hvg = n_hvg
        self.target_sum = target_sum
        self.threshold = threshold
        self.seed = seed

    def _config(self) -> DoubletConfig:
        return DoubletConfig(self.rho, self.r, self.k, self.pca_dims, self.n_hvg,
                             self.target_sum, self.seed)

    def fit(self, X, y=None):
        cfg = self._config()
        counts = sp.csr_matrix(X, dtype=np.float64)
        obs = normalize_log1p(counts, cfg.target_sum)
        sim, self.parents_ = simulate_doublets(counts, cfg)
        genes = select_hvg(obs, min(cfg.n_hvg, obs.shape[1])).selected_indices
        joint = sp.vstack([obs[:, genes], sim[:, genes]]).tocsr()
        dims = min(cfg.pca_dims, joint.shape[0], len(genes))
        _, emb = pca(joint, dims)
        n = counts.shape[0]
        scores = doublet_scores(emb.values[:n], emb.values[n:], cfg)
        thr = self.threshold if self.threshold is not None else auto_threshold(scores.sim_ld)
        logger.info("doublet threshold %.4f", thr)
        self.scores_ = call_doublets(scores, thr)
        self.threshold_ = thr
        return self

    def predict(self, X=None):
        check_is_fitted(self, "scores_")
        return self.scores_.is_doublet.copy()

    def score_samples(self, X=None):
        check_is_fitted(self, "scores_")
        return self.scores_.ld.copy()

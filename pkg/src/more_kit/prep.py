"""QC metrics, cell filtering, normalization, HVG selection, PCA and top genes."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import List, Optional, Tuple

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .io import CellTable, Embeddings, ExpressionMatrix

MT_PREFIXES = ("MT-",)
RIBO_PREFIXES = ("RPS", "RPL")


class EmptyResultError(ValueError):
    pass


def _as_matrix(X):
    return X.X if isinstance(X, ExpressionMatrix) else X


def compute_qc(em: ExpressionMatrix, cells: Optional[CellTable] = None) -> CellTable:
    """Fill the per-cell QC fields; returns a new table.

    Mito and ribosomal genes are found by case-sensitive name prefix.
    """
    X = em.X
    total = np.asarray(X.sum(axis=1)).ravel()
    n_genes = np.asarray((X > 0).sum(axis=1)).ravel()
    names = np.asarray(em.gene_names)
    mt = np.char.startswith(names.astype(str), MT_PREFIXES[0]) if len(names) else np.zeros(0, bool)
    ribo = np.zeros(len(names), dtype=bool)
    for p in RIBO_PREFIXES:
        ribo |= np.char.startswith(names.astype(str), p)
    mt_counts = np.asarray(X[:, np.flatnonzero(mt)].sum(axis=1)).ravel()
    ribo_counts = np.asarray(X[:, np.flatnonzero(ribo)].sum(axis=1)).ravel()
    safe = np.where(total > 0, total, 1.0)
    pct_mt = np.where(total > 0, 100.0 * mt_counts / safe, 0.0)
    pct_ribo = np.where(total > 0, 100.0 * ribo_counts / safe, 0.0)

    if cells is None:
        cells = CellTable.single_batch(em.barcodes)
    return replace(cells, n_genes_by_counts=n_genes.astype(np.int64), total_counts=total,
                   pct_counts_mt=pct_mt, pct_counts_ribo=pct_ribo)


def filter_cells(em: ExpressionMatrix, cells: CellTable, min_genes: float = 200,
                 max_pct_mt: float = 20.0) -> Tuple[ExpressionMatrix, CellTable]:
    if min_genes < 0 or max_pct_mt < 0:
        raise ValueError("QC thresholds must be nonnegative")
    if cells.n_genes_by_counts is None:
        cells = compute_qc(em, cells)
    keep = (cells.n_genes_by_counts >= min_genes) & (cells.pct_counts_mt <= max_pct_mt)
    if not keep.any():
        raise EmptyResultError(
            f"no cell passes min_genes={min_genes}, max_pct_mt={max_pct_mt}")
    return em.subset_cells(keep), cells.subset(keep)


def normalize_log1p(X, target_sum: float = 1e4):
    """Scale each cell to ``target_sum`` total counts, then ``log1p``.

    Sparse input gives CSR output, dense gives dense. All-zero cells stay zero.
    """
    if target_sum <= 0:
        raise ValueError("target_sum must be positive")
    X = _as_matrix(X)
    if sp.issparse(X):
        X = sp.csr_matrix(X, dtype=np.float64, copy=True)
        totals = np.asarray(X.sum(axis=1)).ravel()
        scale = np.divide(target_sum, totals, out=np.zeros_like(totals), where=totals > 0)
        X.data *= np.repeat(scale, np.diff(X.indptr))
        np.log1p(X.data, out=X.data)
        return X
    X = np.asarray(X, dtype=np.float64)
    totals = X.sum(axis=1)
    scale = np.divide(target_sum, totals, out=np.zeros_like(totals), where=totals > 0)
    return np.log1p(X * scale[:, None])


def _mean_var(X) -> Tuple[np.ndarray, np.ndarray]:
    n = X.shape[0]
    if sp.issparse(X):
        mean = np.asarray(X.mean(axis=0)).ravel()
        sq = np.asarray(X.multiply(X).mean(axis=0)).ravel()
        var = (sq - mean ** 2) * (n / max(n - 1, 1))
        return mean, np.maximum(var, 0.0)
    X = np.asarray(X, dtype=np.float64)
    return X.mean(axis=0), X.var(axis=0, ddof=1) if n > 1 else np.zeros(X.shape[1])


@dataclass
class HvgReport:
    means: np.ndarray
    dispersions: np.ndarray
    bins: np.ndarray
    z_dispersions: np.ndarray
    selected: np.ndarray
    # gene indices of the selection, best first
    ranking: np.ndarray

    @property
    def selected_indices(self) -> np.ndarray:
        return np.sort(self.ranking)


def select_hvg(Xnorm, n_top: int = 2000, n_bins: int = 20) -> HvgReport:
    """Mean-binned normalized dispersion, Seurat style.

    Genes are split into ``n_bins`` equal-occupancy bins by mean expression;
    within each bin the dispersion (variance / mean) is z-scored and the
    ``n_top`` highest z-scores win, lower gene index first on ties.
    """
    if n_top < 1 or n_bins < 1:
        raise ValueError("n_top and n_bins must be >= 1")
    Xnorm = _as_matrix(Xnorm)
    mean, var = _mean_var(Xnorm)
    n_genes = mean.size
    disp = np.divide(var, mean, out=np.zeros_like(mean), where=mean > 0)

    by_mean = np.lexsort((np.arange(n_genes), mean))
    bins = np.empty(n_genes, dtype=np.int64)
    bins[by_mean] = (np.arange(n_genes) * n_bins) // max(n_genes, 1)

    z = np.zeros(n_genes)
    for b in np.unique(bins):
        members = np.flatnonzero(bins == b)
        if members.size < 2:
            continue
        d = disp[members]
        sd = d.std(ddof=1)
        if sd > 0:
            z[members] = (d - d.mean()) / sd

    order = np.lexsort((np.arange(n_genes), -z))
    ranking = order[:min(n_top, n_genes)]
    selected = np.zeros(n_genes, dtype=bool)
    selected[ranking] = True
    return HvgReport(mean, disp, bins, z, selected, ranking)


@dataclass
class PcaModel:
    components: np.ndarray  # genes_used x k
    explained_variance: np.ndarray
    explained_variance_ratio: np.ndarray
    mean: np.ndarray

    def transform(self, X) -> np.ndarray:
        X = X.toarray() if sp.issparse(X) else np.asarray(X, dtype=np.float64)
        return (X - self.mean) @ self.components


def _fix_signs(components: np.ndarray) -> np.ndarray:
    pick = np.argmax(np.abs(components), axis=0)
    signs = np.sign(components[pick, np.arange(components.shape[1])])
    signs[signs == 0] = 1.0
    return components * signs


def pca(X, k: int, seed: int = 0) -> Tuple[PcaModel, Embeddings]:
    """Exact PCA by symmetric eigendecomposition.

    Uses the feature covariance or the cell Gram matrix, whichever is
    smaller. ``seed`` is accepted for interface symmetry; the method has no
    randomness. Each component's largest-magnitude loading is made positive.
    """
    X = X.toarray() if sp.issparse(X) else np.asarray(X, dtype=np.float64)
    n, p = X.shape
    if k < 1 or k > min(n, p):
        raise ValueError(f"k={k} must lie in [1, min(n_cells, n_genes)={min(n, p)}]")
    mean = X.mean(axis=0)
    Xc = X - mean
    denom = max(n - 1, 1)
    if p <= n:
        cov = (Xc.T @ Xc) / denom
        total = np.trace(cov)
        w, V = scipy.linalg.eigh(cov, subset_by_index=[p - k, p - 1])
        w, V = w[::-1], V[:, ::-1]
    else:
        gram = (Xc @ Xc.T) / denom
        total = np.trace(gram)
        w, U = scipy.linalg.eigh(gram, subset_by_index=[n - k, n - 1])
        w, U = w[::-1], U[:, ::-1]
        w = np.maximum(w, 0.0)
        scale = np.sqrt(np.where(w > 0, w * denom, 1.0))
        V = (Xc.T @ U) / scale
    w = np.maximum(w, 0.0)
    V = _fix_signs(V)
    ratio = w / total if total > 0 else np.zeros_like(w)
    model = PcaModel(V, w, ratio, mean)
    return model, Embeddings(Xc @ V, "pca")


def top_expressed(em: ExpressionMatrix, n: int = 20) -> List[Tuple[str, float]]:
    """Genes ranked by their share of all counts, as percents."""
    if n < 1:
        raise ValueError("n must be >= 1")
    per_gene = np.asarray(em.X.sum(axis=0)).ravel()
    grand = per_gene.sum()
    pct = 100.0 * per_gene / grand if grand > 0 else np.zeros_like(per_gene)
    order = np.lexsort((np.arange(per_gene.size), -pct))[:n]
    return [(em.gene_names[j], float(pct[j])) for j in order]


class HighlyVariableGenes(TransformerMixin, BaseEstimator):
    """Select highly variable genes from log-normalized expression."""

    def __init__(self, n_top: int = 2000, n_bins: int = 20):
        self.n_top = n_top
        self.n_bins = n_bins

    def fit(self, X, y=None):
        X = check_array(X, accept_sparse="csr", dtype=np.float64)
        self.report_ = select_hvg(X, self.n_top, self.n_bins)
        self.support_ = self.report_.selected_indices
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "support_")
        X = check_array(X, accept_sparse="csr", dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} genes, got {X.shape[1]}")
        return X[:, self.support_]


class ExactPCA(TransformerMixin, BaseEstimator):
    def __init__(self, n_components: int = 30):
        self.n_components = n_components

    def fit(self, X, y=None):
        X = check_array(X, accept_sparse="csr", dtype=np.float64)
        self.model_, _ = pca(X, self.n_components)
        self.components_ = self.model_.components.T
        self.explained_variance_ratio_ = self.model_.explained_variance_ratio
        self.mean_ = self.model_.mean
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, accept_sparse="csr", dtype=np.float64)
        return self.model_.transform(X)

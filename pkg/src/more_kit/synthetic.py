"""Seeded synthetic data with known ground truth."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np
import scipy.sparse as sp

from .io import CellTable, ExpressionMatrix


def gaussian_batches(seed: int, n_cells: int = 600, n_classes: int = 3, dim: int = 20,
                     separation: float = 6.0, sigma: float = 1.0, n_batches: int = 2,
                     offset_norm: float = 4.0):
    """Gaussian class blobs with an additive per-batch offset.

    Class means form a regular simplex with pairwise distance
    ``separation``; batch ``b`` is shifted by ``b`` times a random
    direction of length ``offset_norm`` (batch 0 is unshifted). Classes and
    batches are balanced. Returns ``(X, classes, batches)``.
    """
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    means = (separation / np.sqrt(2.0)) * Q[:, :n_classes].T
    direction = rng.standard_normal(dim)
    offset = offset_norm * direction / np.linalg.norm(direction)
    classes = np.arange(n_cells) % n_classes
    batches = (np.arange(n_cells) // n_classes) % n_batches
    X = means[classes] + sigma * rng.standard_normal((n_cells, dim)) + batches[:, None] * offset
    return X, classes, batches


def nb_draw(rng, mean, dispersion):
    """Negative binomial with the given mean and inverse-shape ``dispersion``."""
    mean = np.asarray(mean, dtype=np.float64)
    shape = 1.0 / dispersion
    lam = rng.gamma(shape, mean / shape)
    return rng.poisson(lam)


def planted_hvg_counts(seed: int, n_cells: int = 1000, n_genes: int = 2000, n_planted: int = 50,
                       dispersion: float = 0.1, planted_dispersion: float = 4.0):
    """Counts where ``n_planted`` genes are over-dispersed; returns ``(counts, planted_idx)``."""
    rng = np.random.default_rng(seed)
    gene_means = np.exp(rng.uniform(np.log(0.2), np.log(20.0), n_genes))
    planted = np.sort(rng.choice(n_genes, n_planted, replace=False))
    disp = np.full(n_genes, dispersion)
    disp[planted] = planted_dispersion
    lib = np.exp(rng.normal(0.0, 0.2, n_cells))[:, None]
    counts = nb_draw(rng, lib * gene_means[None, :], disp[None, :])
    return counts, planted


@dataclass
class CountDataset:
    matrix: ExpressionMatrix
    cells: CellTable
    cell_type: np.ndarray
    is_doublet: np.ndarray


def _gene_names(n_genes: int, n_mt: int = 13, n_ribo: int = 20) -> List[str]:
    names = ["ACTB", "GAPDH"]
    names += [f"MT-G{i}" for i in range(n_mt)]
    names += [f"RPL{i}" if i % 2 else f"RPS{i}" for i in range(n_ribo)]
    names += [f"GENE{i:05d}" for i in range(n_genes - len(names))]
    return names[:n_genes]


def count_dataset(seed: int, n_cells: int = 500, n_genes: int = 1000, n_types: int = 3,
                  n_batches: int = 1, n_doublets: int = 0, n_markers: int = 40,
                  marker_fold: float = 6.0, batch_scale: float = 0.3, dispersion: float = 0.2,
                  mean_library: float = 2000.0) -> CountDataset:
    """Cell-type count matrix with NB noise, optional batch and doublets.

    Each type up-regulates its own ``n_markers`` genes ``marker_fold``-fold.
    Batches multiply gene means by log-normal factors. Doublets are sums of
    two distinct random singlets' counts; they take the first parent's type
    and batch and are appended after the singlets.
    """
    rng = np.random.default_rng(seed)
    names = _gene_names(n_genes)
    base = np.exp(rng.normal(np.log(0.5), 1.2, n_genes))
    base[0], base[1] = base.max() * 4, base.max() * 2
    profiles = np.tile(base, (n_types, 1))
    pool = np.arange(35, n_genes)
    markers = rng.choice(pool, size=(n_types, n_markers), replace=False)
    for t in range(n_types):
        profiles[t, markers[t]] *= marker_fold
    profiles /= profiles.sum(axis=1, keepdims=True)
    batch_factor = np.exp(rng.normal(0.0, batch_scale, (n_batches, n_genes)))
    batch_factor[0] = 1.0

    n_single = n_cells
    cell_type = np.arange(n_single) % n_types
    batch = rng.integers(0, n_batches, n_single)
    lib = mean_library * np.exp(rng.normal(0.0, 0.3, n_single))
    mu = profiles[cell_type] * batch_factor[batch] * lib[:, None]
    counts = nb_draw(rng, mu, dispersion).astype(np.float64)

    if n_doublets:
        first = rng.integers(0, n_single, n_doublets)
        second = rng.integers(0, n_single - 1, n_doublets)
        second = second + (second >= first)
        dbl = counts[first] + counts[second]
        counts = np.vstack([counts, dbl])
        cell_type = np.concatenate([cell_type, cell_type[first]])
        batch = np.concatenate([batch, batch[first]])
    is_doublet = np.r_[np.zeros(n_single, bool), np.ones(n_doublets, bool)]

    barcodes = [f"CELL{i:06d}" for i in range(counts.shape[0])]
    em = ExpressionMatrix(sp.csr_matrix(counts), names, barcodes)
    cells = CellTable(barcodes, batch, [f"batch{b}" for b in range(n_batches)],
                      cell_type.copy(), [f"type{t}" for t in range(n_types)])
    return CountDataset(em, cells, cell_type, is_doublet)

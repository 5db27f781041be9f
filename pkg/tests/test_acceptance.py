"""Acceptance suite: each test checks one criterion at its stated tolerance
and records a single pass/fail line (shown in the terminal summary)."""
import math
import resource
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import scipy.sparse as sp
from sklearn.cluster import KMeans
from sklearn.metrics import roc_auc_score

from more_kit import data_path
from more_kit.backbone import BackboneSpec, init_frozen_backbone
from more_kit.cli import main
from more_kit.doublet import ScrubletDetector, doublet_likelihood
from more_kit.embedder import MoreEmbedder, predict_labels
from more_kit.gradcheck import check_gradients
from more_kit.harmony import HarmonyLite
from more_kit.io import ExpressionMatrix, read_mtx, write_mtx
from more_kit.losses import (LossWeights, loss_ce, loss_intra, loss_masked_mse, loss_supcon,
                             total_loss)
from more_kit.metrics import ari, batch_entropy
from more_kit.model import HeadDims, MoreParams, fuse, refine
from more_kit.prep import normalize_log1p, pca, select_hvg
from more_kit.synthetic import count_dataset, gaussian_batches, planted_hvg_counts

SEEDS = range(5)


def _kmeans_ari(Z, classes, seed=0):
    return ari(KMeans(3, n_init=10, random_state=seed).fit_predict(Z), classes)


def test_criterion_01_gradients(acceptance):
    start = time.perf_counter()
    worst = max(max(check_gradients(seed, h=1e-5).values()) for seed in range(20))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and elapsed < 60
    acceptance(1, ok, f"max rel err {worst:.2e} over 20 seeds in {elapsed:.1f}s")
    assert ok


def test_criterion_02_frozen_backbone(acceptance):
    rng = np.random.default_rng(0)
    X = np.log1p(rng.poisson(1.0, (300, 256)).astype(float))
    y = np.arange(300) % 3
    b = (np.arange(300) // 3) % 2
    before = init_frozen_backbone(BackboneSpec(0, 256)).hash
    est = MoreEmbedder(epochs=30).fit(X, y, b)
    after = est.backbones_[0].content_hash()
    ok = before == after and est.trainable_fraction_ < 0.05
    acceptance(2, ok, f"hash unchanged={before == after}, trainable fraction "
                      f"{est.trainable_fraction_:.4f}")
    assert ok


def test_criterion_03_batch_robustness(acceptance):
    start = time.perf_counter()
    passes, rows = 0, []
    for seed in SEEDS:
        X, c, b = gaussian_batches(seed)
        Z = MoreEmbedder(seed=seed).fit_transform(X, c, b)
        e_in, e_out = batch_entropy(X, b), batch_entropy(Z, b)
        score = _kmeans_ari(Z, c, seed)
        good = e_out >= e_in + 0.15 and score >= 0.8
        passes += good
        rows.append(f"s{seed}:H {e_in:.2f}->{e_out:.2f} ARI {score:.2f}")
    elapsed = time.perf_counter() - start
    ok = passes >= 4 and elapsed < 300
    acceptance(3, ok, f"{passes}/5 seeds in {elapsed:.0f}s ({'; '.join(rows)})")
    assert ok


def test_criterion_04_harmony(acceptance):
    passes, rows = 0, []
    for seed in SEEDS:
        X, c, b = gaussian_batches(seed)
        Z = HarmonyLite(seed=seed).fit_transform(X, batches=b)
        gain = batch_entropy(Z, b) - batch_entropy(X, b)
        drift = abs(_kmeans_ari(Z, c, seed) - _kmeans_ari(X, c, seed))
        good = gain >= 0.10 and drift <= 0.05
        passes += good
        rows.append(f"s{seed}:dH {gain:+.2f} dARI {drift:.2f}")
    ok = passes >= 4
    acceptance(4, ok, f"{passes}/5 seeds ({'; '.join(rows)})")
    assert ok


def test_criterion_05_doublets(acceptance):
    ds = count_dataset(0, n_cells=500, n_genes=1000, n_doublets=50)
    det = ScrubletDetector(n_hvg=1000, seed=0).fit(ds.matrix.X)
    auroc = roc_auc_score(ds.is_doublet, det.score_samples())
    exact = doublet_likelihood(0.0, 0.06, 2.0) == 0.0 and doublet_likelihood(1.0, 0.06, 2.0) == 1.0
    ok = auroc >= 0.9 and exact
    acceptance(5, ok, f"AUROC {auroc:.3f}, L_d(0)=0 and L_d(1)=1 exact: {exact}")
    assert ok


def test_criterion_06_loss_identities(acceptance):
    rng = np.random.default_rng(0)
    checks = {
        "ce": abs(loss_ce(np.zeros(4), 0) - math.log(4)) <= 1e-9,
        "supcon": all(abs(loss_supcon(np.tile(rng.standard_normal(6), (4, 1)), [0, 0, 1, 1], tau)
                          - math.log(3)) <= 1e-6 for tau in (0.01, 0.1, 0.5, 1.0, 10.0)),
        "intra": loss_intra(rng.standard_normal((5, 3)), np.arange(5)) == 0.0,
        "mse": loss_masked_mse(np.array([1.5, -2.0]), np.array([1.5, 7.0, -2.0]), [0, 2]) == 0.0,
    }
    terms = {"ce": 0.9, "supcon": 1.7, "align": 0.3, "intra": 2.2, "mse": 0.6}
    w = np.array([1.0, 0.5, 0.5, 0.1, 0.5])
    linear = True
    for alpha in (0.0, 0.3, 2.0, 7.5):
        for beta in (0.0, 1.0, -0.5):
            u = rng.uniform(0, 1, 5)
            lhs = total_loss(terms, LossWeights(*(alpha * w + abs(beta) * u)))
            rhs = alpha * total_loss(terms, LossWeights(*w)) + abs(beta) * total_loss(terms, LossWeights(*u))
            linear &= abs(lhs - rhs) <= 1e-12 * max(1.0, abs(rhs))
    checks["linearity"] = linear
    ok = all(checks.values())
    acceptance(6, ok, ", ".join(f"{k}={v}" for k, v in checks.items()))
    assert ok


def test_criterion_07_mechanism_identities(acceptance):
    rng = np.random.default_rng(0)
    p = MoreParams.init(HeadDims(d=8, n_modalities=1, n_batches=3, n_classes=4, n_genes=5), 0)
    z = rng.standard_normal((10, 8))
    fuse_ok = np.array_equal(fuse(p, [z]), z)
    for k in p.tensors:
        if k.startswith("refiner"):
            p[k] = np.zeros_like(p[k])
    p["batch_emb"] = rng.standard_normal((3, 8))
    refine_ok = all(np.array_equal(refine(p, z, np.arange(10) % 3, T)[0], z) for T in (0, 1, 2, 5))
    p["classifier.w"] = rng.standard_normal((4, 8))
    labels, conf = predict_labels(p, z)
    p["classifier.b"] = p["classifier.b"] + 123.0
    shifted, conf2 = predict_labels(p, z)
    shift_ok = np.array_equal(labels, shifted) and np.allclose(conf, conf2, rtol=0, atol=1e-12)
    ok = fuse_ok and refine_ok and shift_ok
    acceptance(7, ok, f"fuse identity={fuse_ok}, zero refiner identity={refine_ok}, "
                      f"softmax shift invariance={shift_ok}")
    assert ok


def test_criterion_08_hvg_and_pca(acceptance):
    counts, planted = planted_hvg_counts(0)
    rep = select_hvg(normalize_log1p(sp.csr_matrix(counts.astype(float))), n_top=len(planted))
    recall = float(np.isin(planted, rep.selected_indices).mean())
    rng = np.random.default_rng(0)
    X = np.outer(rng.standard_normal(200), rng.standard_normal(30))
    model, _ = pca(X, 5)
    ratio = float(model.explained_variance_ratio[0])
    ok = recall >= 0.95 and ratio >= 0.999
    acceptance(8, ok, f"HVG planted recall {recall:.3f}, PCA rank-1 first ratio {ratio:.6f}")
    assert ok


def test_criterion_09_determinism(acceptance, tmp_path):
    cfg = str(data_path("synthetic.toml"))
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir(), b.mkdir()
    assert main(["embed", "--config", cfg, "--out-dir", str(a)]) == 0
    assert main(["embed", "--config", cfg, "--out-dir", str(b)]) == 0
    same = (a / "embeddings.tsv").read_bytes() == (b / "embeddings.tsv").read_bytes()

    ds = count_dataset(1, n_cells=120, n_genes=300)
    X = ds.matrix.X.copy()
    X.data = X.data * 0.37 + 1e-3
    em = ExpressionMatrix(X, ds.matrix.gene_names, ds.matrix.barcodes)
    paths = [tmp_path / n for n in ("m.mtx", "g.tsv", "c.tsv")]
    write_mtx(em, *paths)
    back = read_mtx(*paths)
    round_trip = (back.gene_names == em.gene_names and back.barcodes == em.barcodes
                  and (back.X != em.X).nnz == 0)
    ok = same and round_trip
    acceptance(9, ok, f"embeddings TSV byte-identical={same}, MTX round trip exact={round_trip}")
    assert ok


@pytest.mark.slow
def test_criterion_10_end_to_end(acceptance, tmp_path):
    cli = [sys.executable, "-m", "more_kit.cli"]
    subprocess.run(cli + ["simulate", "--n-cells", "5000", "--n-genes", "2000", "--seed", "0",
                          "--out-dir", str(tmp_path)], check=True, capture_output=True)
    (tmp_path / "cfg.toml").write_text('[data]\nmatrix = "matrix.mtx"\ngenes = "genes.tsv"\n'
                                       'barcodes = "barcodes.tsv"\nmetadata = "metadata.tsv"\n')
    mat = ["--matrix", "matrix.mtx", "--genes", "genes.tsv", "--barcodes", "barcodes.tsv"]
    steps = [
        ["qc", *mat, "--metadata", "metadata.tsv", "--out-dir", "qc"],
        ["doublets", *mat, "--out-dir", "doublets"],
        ["embed", "--config", "cfg.toml", "--doublets", "--out-dir", "embed"],
        ["annotate", "--params", "embed/params.bin", "--embeddings", "embed/embeddings.tsv",
         "--out-dir", "annotate"],
        ["metrics", "--embeddings", "embed/embeddings.tsv", "--annotation",
         "annotate/annotation.tsv", "--out-dir", "metrics"],
    ]
    for s in steps:
        (tmp_path / s[-1]).mkdir()
    start = time.perf_counter()
    codes = [subprocess.run(cli + s, cwd=tmp_path, capture_output=True).returncode for s in steps]
    elapsed = time.perf_counter() - start
    # ru_maxrss is in KiB on Linux; the maximum over all finished children
    peak_gb = resource.getrusage(resource.RUSAGE_CHILDREN).ru_maxrss / 2 ** 20
    ok = all(c == 0 for c in codes) and elapsed < 600 and peak_gb < 4
    acceptance(10, ok, f"exit codes {codes}, {elapsed:.0f}s, peak RSS {peak_gb:.2f} GB")
    assert ok

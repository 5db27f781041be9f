"""Command-line driver: ``more-kit <command> [options]``.

Commands
--------
qc         per-cell QC table, box-summary SVG, top-expressed genes
doublets   simulated-doublet scores and calls
embed      full pipeline from a TOML config to refined embeddings
baseline   soft k-means batch correction of an embeddings TSV
annotate   classifier labels, cluster vote and neighbor propagation
metrics    metrics JSON for an embeddings TSV
simulate   write a synthetic count dataset

Every table starts with ``# config_hash=...`` and ``# seed=...`` lines.
Exit codes: 0 success, 1 usage or I/O error, 2 numerical failure.

Metrics JSON keys: n_cells, batch_entropy, ari, silhouette,
label_transfer_accuracy, per_class_recall, config_hash, seed (plus
annotation_accuracy from ``metrics --annotation``).
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import scipy.sparse as sp
from threadpoolctl import threadpool_limits

from .annotate import annotate, marker_report, write_annotation
from .doublet import ScrubletDetector
from .embedder import MoreEmbedder
from .harmony import run_harmony
from .io import (CellTable, Embeddings, ExpressionMatrix, read_cell_metadata, read_embeddings,
                 read_mtx, read_params, read_table, write_embeddings, write_mtx, write_table)
from .metrics import summarize
from .model import MoreParams
from .prep import compute_qc, filter_cells, normalize_log1p, pca, select_hvg, top_expressed
from .svg import box_summary, scatter
from .synthetic import count_dataset
from .train import TrainingError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger("more_kit")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2
LOCK_NAME = ".more-kit.lock"

CONFIG_DEFAULTS: Dict[str, Dict[str, object]] = {
    "data": {"matrix": None, "genes": None, "barcodes": None, "metadata": None,
             "transpose": True, "n_hvg": 256, "target_sum": 1e4},
    "qc": {"enabled": True, "min_genes": 200, "max_pct_mt": 20.0},
    "doublet": {"enabled": False, "rho": 0.06, "r": 2.0, "k": 20, "pca_dims": 30,
                "n_hvg": 2000, "threshold": None},
    "model": {"d_model": 64, "n_layers": 3, "n_heads": 4, "ffn_dim": 256, "adapter_dim": 16,
              "decoder_rank": 8, "depth": 2, "backbone_seed": 0,
              "max_trainable_fraction": 0.05},
    "train": {"epochs": 30, "batch_size": 128, "lr": 1e-3, "beta1": 0.9, "beta2": 0.999,
              "eps": 1e-8, "seed": 0},
    "losses": {"ce": 1.0, "supcon": 0.5, "align": 0.5, "var": 0.1, "mse": 0.5, "tau": 0.1,
               "mask_rate": 0.15},
    "metrics": {"k": 15},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------- config

def _check_type(section, key, value, default):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise UsageError(f"config [{section}] {key}: expected {type(default).__name__}, "
                         f"got {value!r}")
    return value


def load_config(path) -> Dict[str, Dict[str, object]]:
    """Parse a TOML config over the defaults; unknown sections or keys fail."""
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"no such config file: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"{path}: invalid TOML: {exc}") from None
    cfg = copy.deepcopy(CONFIG_DEFAULTS)
    for section, values in raw.items():
        if section not in cfg:
            raise UsageError(f"{path}: unknown config section [{section}]")
        if not isinstance(values, dict):
            raise UsageError(f"{path}: [{section}] must be a table")
        for key, value in values.items():
            if key not in cfg[section]:
                raise UsageError(f"{path}: unknown key {key!r} in [{section}]")
            cfg[section][key] = _check_type(section, key, value, cfg[section][key])
    for key in ("matrix", "genes", "barcodes"):
        if not cfg["data"][key]:
            raise UsageError(f"{path}: [data] {key} is required")
    return cfg


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _resolve(base: Path, value):
    if value is None:
        return None
    p = Path(value)
    return p if p.is_absolute() else base / p


# ------------------------------------------------------------------- helpers

@contextmanager
def output_lock(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise UsageError(f"output directory {out_dir} is locked by another run "
                         f"(remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out_dir
    finally:
        lock.unlink(missing_ok=True)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_matrix(args, transpose: bool):
    return read_mtx(args.matrix, args.genes, args.barcodes, transpose=transpose)


def _load_cells(args, em) -> CellTable:
    if getattr(args, "metadata", None):
        return read_cell_metadata(args.metadata, em)
    return CellTable.single_batch(em.barcodes)


def _stamp(args, settings: Dict) -> Dict[str, object]:
    return {"config_hash": config_hash(settings), "seed": args.seed}


def _arg_settings(args, *names) -> Dict[str, object]:
    out = {n: getattr(args, n) for n in names}
    out["command"] = args.command
    return {k: str(v) if isinstance(v, Path) else v for k, v in out.items()}


# ------------------------------------------------------------------ commands

def cmd_qc(args) -> int:
    em = _load_matrix(args, args.transpose)
    cells = compute_qc(em, _load_cells(args, em))
    stamp = _stamp(args, _arg_settings(args, "matrix", "genes", "barcodes", "metadata",
                                       "transpose", "min_genes", "max_pct_mt"))
    passed = (cells.n_genes_by_counts >= args.min_genes) & (cells.pct_counts_mt <= args.max_pct_mt)
    out = Path(args.out_dir)
    with output_lock(out):
        write_table(out / "qc.tsv", {
            "barcode": cells.barcode,
            "n_genes_by_counts": cells.n_genes_by_counts.astype(np.int64),
            "total_counts": cells.total_counts,
            "pct_counts_mt": cells.pct_counts_mt,
            "pct_counts_ribo": cells.pct_counts_ribo,
            "pass_qc": passed}, stamp)
        (out / "qc_summary.svg").write_text(box_summary({
            "n_genes_by_counts": cells.n_genes_by_counts,
            "total_counts": cells.total_counts,
            "pct_counts_mt": cells.pct_counts_mt,
            "pct_counts_ribo": cells.pct_counts_ribo}))
        top = top_expressed(em, args.top)
        write_table(out / "top_genes.tsv", {"gene": [g for g, _ in top],
                                            "pct_of_counts": [p for _, p in top]}, stamp)
        if args.pca:
            Xn = normalize_log1p(em.X)
            genes = select_hvg(Xn, min(args.n_hvg, em.n_genes)).selected_indices
            _, emb = pca(Xn[:, genes], min(args.pca, len(genes), em.n_cells), seed=args.seed)
            write_embeddings(emb, cells, out / "pca_embeddings.tsv", stamp)
    print(f"qc: {em.n_cells} cells, {int(passed.sum())} pass")
    return EXIT_OK


def cmd_doublets(args) -> int:
    em = _load_matrix(args, args.transpose)
    det = ScrubletDetector(rho=args.rho, r=args.r, k=args.k, pca_dims=args.pca_dims,
                           n_hvg=args.n_hvg, threshold=args.threshold, seed=args.seed).fit(em.X)
    s = det.scores_
    stamp = _stamp(args, _arg_settings(args, "matrix", "genes", "barcodes", "transpose", "rho",
                                       "r", "k", "pca_dims", "n_hvg", "threshold"))
    stamp["threshold"] = f"{det.threshold_:.6g}"
    out = Path(args.out_dir)
    with output_lock(out):
        write_table(out / "doublets.tsv", {"barcode": em.barcodes, "q": s.q, "L_d": s.ld,
                                           "Z": s.z, "is_doublet": s.is_doublet}, stamp)
    print(f"doublets: {int(s.is_doublet.sum())} of {em.n_cells} called at L_d > {det.threshold_:.4g}")
    return EXIT_OK


def _embedder_from_config(cfg, seed) -> MoreEmbedder:
    m, t, lw = cfg["model"], cfg["train"], cfg["losses"]
    return MoreEmbedder(d_model=m["d_model"], n_layers=m["n_layers"], n_heads=m["n_heads"],
                        ffn_dim=m["ffn_dim"], adapter_dim=m["adapter_dim"],
                        decoder_rank=m["decoder_rank"], depth=m["depth"],
                        backbone_seed=m["backbone_seed"],
                        max_trainable_fraction=m["max_trainable_fraction"], epochs=t["epochs"],
                        batch_size=t["batch_size"], lr=t["lr"], beta1=t["beta1"],
                        beta2=t["beta2"], eps=t["eps"], lambda_ce=lw["ce"],
                        lambda_supcon=lw["supcon"], lambda_align=lw["align"],
                        lambda_var=lw["var"], lambda_mse=lw["mse"], tau=lw["tau"],
                        mask_rate=lw["mask_rate"], seed=seed)


def cmd_embed(args) -> int:
    cfg = load_config(args.config)
    if args.doublets is not None:
        cfg["doublet"]["enabled"] = args.doublets
    if args.transpose is not None:
        cfg["data"]["transpose"] = args.transpose
    seed = args.seed if args.seed is not None else cfg["train"]["seed"]
    cfg["train"]["seed"] = seed
    args.seed = seed
    stamp = _stamp(args, cfg)
    base = Path(args.config).resolve().parent
    d = cfg["data"]

    em = read_mtx(_resolve(base, d["matrix"]), _resolve(base, d["genes"]),
                  _resolve(base, d["barcodes"]), transpose=d["transpose"])
    meta = _resolve(base, d["metadata"])
    cells = read_cell_metadata(meta, em) if meta else CellTable.single_batch(em.barcodes)
    cells = compute_qc(em, cells)
    if cfg["qc"]["enabled"]:
        em, cells = filter_cells(em, cells, cfg["qc"]["min_genes"], cfg["qc"]["max_pct_mt"])
    if cfg["doublet"]["enabled"]:
        dc = cfg["doublet"]
        det = ScrubletDetector(rho=dc["rho"], r=dc["r"], k=dc["k"], pca_dims=dc["pca_dims"],
                               n_hvg=dc["n_hvg"], threshold=dc["threshold"], seed=seed).fit(em.X)
        cells.doublet_score = det.scores_.ld
        cells.is_doublet = det.scores_.is_doublet
        keep = ~det.scores_.is_doublet
        logger.info("removing %d called doublets", int((~keep).sum()))
        em, cells = em.subset_cells(keep), cells.subset(keep)

    Xn = normalize_log1p(em.X, d["target_sum"])
    genes = select_hvg(Xn, min(d["n_hvg"], em.n_genes)).selected_indices
    X = np.asarray(Xn[:, genes].toarray())
    labels = cells.label if cells.has_labels else None
    est = _embedder_from_config(cfg, seed)
    Z = est.fit_transform(X, labels, batches=cells.batch)

    out = Path(args.out_dir)
    with output_lock(out):
        write_embeddings(Embeddings(Z, "refined"), cells, out / "embeddings.tsv", stamp)
        est.save(out / "params.bin")
        (out / "classes.txt").write_text("".join(f"{n}\n" for n in cells.label_names))
        (out / "genes.txt").write_text("".join(f"{em.gene_names[g]}\n" for g in genes))
        terms = list(est.history_[0])
        cols = {"epoch": list(range(1, len(est.history_) + 1))}
        cols.update({t: [h[t] for h in est.history_] for t in terms})
        write_table(out / "loss.csv", cols, stamp)
        metrics = summarize(Z, cells.batch, labels, cfg["metrics"]["k"], seed, cells.label_names)
        metrics.update(stamp, trainable_fraction=est.trainable_fraction_,
                       backbone_hashes=est.backbone_hashes_)
        _write_json(out / "metrics.json", metrics)
        _, xy = pca(Z, min(2, Z.shape[1]), seed=seed)
        (out / "scatter_batch.svg").write_text(scatter(xy.values, cells.batch, cells.batch_names,
                                                       "refined embeddings by batch"))
        groups = labels if labels is not None else np.full(len(Z), -1)
        (out / "scatter_label.svg").write_text(scatter(xy.values, groups, cells.label_names,
                                                       "refined embeddings by label"))
    print(f"embed: {len(Z)} cells x {Z.shape[1]} dims, final loss "
          f"{est.history_[-1]['total']:.4f}")
    return EXIT_OK


def _load_embeddings(args):
    emb, cells = read_embeddings(args.embeddings)
    if getattr(args, "metadata", None):
        # metadata overrides batch and label columns of the embeddings file
        stub = ExpressionMatrix(sp.csr_matrix((cells.n_cells, 1)), ["_"], cells.barcode)
        cells = read_cell_metadata(args.metadata, stub)
    return emb, cells


def cmd_baseline(args) -> int:
    emb, cells = _load_embeddings(args)
    Z = run_harmony(emb.values, cells.batch, args.n_clusters, args.lambda_div, args.sigma,
                    args.rounds, args.seed)
    stamp = _stamp(args, _arg_settings(args, "embeddings", "metadata", "n_clusters",
                                       "lambda_div", "sigma", "rounds", "k"))
    out = Path(args.out_dir)
    with output_lock(out):
        write_embeddings(Embeddings(Z, "harmony"), cells, out / "harmony_embeddings.tsv", stamp)
        metrics = summarize(Z, cells.batch, cells.label, args.k, args.seed, cells.label_names)
        metrics.update(stamp)
        _write_json(out / "baseline_metrics.json", metrics)
    print(f"baseline: batch entropy {metrics['batch_entropy']:.4f}")
    return EXIT_OK


def _read_classes(args) -> list:
    path = Path(args.classes) if args.classes else Path(args.params).with_name("classes.txt")
    if path.exists():
        return [ln for ln in path.read_text().splitlines() if ln]
    return []


def cmd_annotate(args) -> int:
    if not Path(args.params).exists():
        raise FileNotFoundError(f"no such params file: {args.params}")
    params = MoreParams.from_sections(read_params(args.params))
    emb, cells = _load_embeddings(args)
    if emb.values.shape[1] != params.dims.d:
        raise UsageError(f"embeddings have {emb.values.shape[1]} dims, params expect {params.dims.d}")
    names = _read_classes(args) or [str(c) for c in range(params.dims.n_classes)]
    res = annotate(params, emb.values, args.n_clusters, args.k, args.conf_threshold,
                       args.max_rounds, args.seed)
    stamp = _stamp(args, _arg_settings(args, "params", "embeddings", "n_clusters", "k",
                                       "conf_threshold", "max_rounds"))
    out = Path(args.out_dir)
    with output_lock(out):
        write_annotation(out / "annotation.tsv", res, cells.barcode, names, stamp)
        if args.markers:
            em = read_mtx(args.matrix, args.genes, args.barcodes, transpose=args.transpose)
            rows = {b: i for i, b in enumerate(em.barcodes)}
            em = em.subset_cells(np.asarray([rows[b] for b in cells.barcode]))
            report = marker_report(em, res.final, args.markers.split(","), names)
            write_table(out / "markers.tsv", report, stamp)
    changed = int((res.final != res.predicted).sum())
    print(f"annotate: {len(res.final)} cells, {changed} relabeled by vote or propagation")
    return EXIT_OK


def cmd_metrics(args) -> int:
    emb, cells = _load_embeddings(args)
    stamp = _stamp(args, _arg_settings(args, "embeddings", "metadata", "annotation", "k"))
    metrics = summarize(emb.values, cells.batch, cells.label, args.k, args.seed,
                        cells.label_names)
    if args.annotation:
        table = read_table(args.annotation)
        final = dict(zip(table["barcode"], table["final"]))
        if cells.has_labels:
            truth = [cells.label_names[v] if v >= 0 else None for v in cells.label]
            pairs = [(t, final.get(b)) for b, t in zip(cells.barcode, truth) if t is not None]
            metrics["annotation_accuracy"] = float(np.mean([t == p for t, p in pairs]))
            metrics["per_class_recall"] = {
                name: float(np.mean([p == name for t, p in pairs if t == name]))
                for name in cells.label_names if any(t == name for t, _ in pairs)}
    metrics.update(stamp)
    out = Path(args.out_dir)
    with output_lock(out):
        _write_json(out / "metrics.json", metrics)
    print(json.dumps({k: metrics[k] for k in ("ari", "silhouette", "batch_entropy")}))
    return EXIT_OK


def cmd_simulate(args) -> int:
    ds = count_dataset(args.seed, n_cells=args.n_cells, n_genes=args.n_genes,
                       n_types=args.n_types, n_batches=args.n_batches, n_doublets=args.n_doublets,
                       mean_library=args.library)
    out = Path(args.out_dir)
    with output_lock(out):
        write_mtx(ds.matrix, out / "matrix.mtx", out / "genes.tsv", out / "barcodes.tsv",
                  transpose=args.transpose)
        c = ds.cells
        write_table(out / "metadata.tsv", {
            "barcode": c.barcode, "batch": [c.batch_names[b] for b in c.batch],
            "label": [c.label_names[v] for v in c.label], "is_doublet": ds.is_doublet})
    print(f"simulate: wrote {ds.matrix.n_cells} cells x {ds.matrix.n_genes} genes to {out}")
    return EXIT_OK


# -------------------------------------------------------------------- parser

def _add_matrix_args(p, required=True):
    p.add_argument("--matrix", required=required, help="MatrixMarket file")
    p.add_argument("--genes", required=required, help="gene names, one per line")
    p.add_argument("--barcodes", required=required, help="cell barcodes, one per line")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="more-kit", description=__doc__.split("\n")[0],
                     epilog="Metrics JSON keys: n_cells, batch_entropy, ari, silhouette, "
                            "label_transfer_accuracy, per_class_recall, config_hash, seed.")
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="random seed (default 0, or [train] seed for embed)")
    common.add_argument("--threads", type=int, default=None,
                        help="BLAS/OpenMP threads (env MORE_KIT_THREADS as fallback)")
    common.add_argument("--transpose", action=argparse.BooleanOptionalAction, default=None,
                        help="matrix file is genes x cells (the default); --no-transpose "
                             "reads it as cells x genes")
    common.add_argument("--out-dir", default=".", help="output directory (default: .)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("qc", parents=[common], help="per-cell QC metrics")
    _add_matrix_args(p)
    p.add_argument("--metadata")
    p.add_argument("--min-genes", type=float, default=200)
    p.add_argument("--max-pct-mt", type=float, default=20.0)
    p.add_argument("--top", type=int, default=20, help="top-expressed genes to report")
    p.add_argument("--pca", type=int, default=0, help="also write this many PCA components")
    p.add_argument("--n-hvg", type=int, default=2000)
    p.set_defaults(func=cmd_qc)

    p = sub.add_parser("doublets", parents=[common], help="doublet scores")
    _add_matrix_args(p)
    p.add_argument("--rho", type=float, default=0.06, help="expected doublet rate")
    p.add_argument("--r", type=float, default=2.0, help="simulated-to-observed ratio")
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--pca-dims", type=int, default=30)
    p.add_argument("--n-hvg", type=int, default=2000)
    p.add_argument("--threshold", type=float, default=None, help="default: automatic")
    p.set_defaults(func=cmd_doublets)

    p = sub.add_parser("embed", parents=[common], help="train the head and embed cells")
    p.add_argument("--config", required=True, help="TOML config")
    p.add_argument("--doublets", action=argparse.BooleanOptionalAction, default=None,
                   help="remove called doublets before embedding")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("baseline", parents=[common], help="soft k-means batch correction")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--metadata")
    p.add_argument("--n-clusters", type=int, default=20)
    p.add_argument("--lambda-div", type=float, default=1.0)
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--rounds", type=int, default=10)
    p.add_argument("--k", type=int, default=15)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("annotate", parents=[common], help="label cells")
    p.add_argument("--params", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--metadata")
    p.add_argument("--classes", help="class names, one per line (default: classes.txt "
                                     "next to the params file)")
    p.add_argument("--n-clusters", type=int, default=None, help="default: 2 x classes")
    p.add_argument("--k", type=int, default=15)
    p.add_argument("--conf-threshold", type=float, default=0.7)
    p.add_argument("--max-rounds", type=int, default=5)
    p.add_argument("--markers", help="comma-separated marker genes for a report")
    _add_matrix_args(p, required=False)
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("metrics", parents=[common], help="embedding metrics")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--metadata")
    p.add_argument("--annotation", help="annotation TSV to score against labels")
    p.add_argument("--k", type=int, default=15)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("simulate", parents=[common], help="write synthetic counts")
    p.add_argument("--n-cells", type=int, default=1000)
    p.add_argument("--n-genes", type=int, default=2000)
    p.add_argument("--n-types", type=int, default=3)
    p.add_argument("--n-batches", type=int, default=2)
    p.add_argument("--n-doublets", type=int, default=0)
    p.add_argument("--library", type=float, default=2000.0, help="mean counts per cell")
    p.set_defaults(func=cmd_simulate)
    return parser


def _threads(args) -> Optional[int]:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("MORE_KIT_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"MORE_KIT_THREADS must be an integer, got {env!r}") from None
    return None


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command != "embed":
        if args.seed is None:
            args.seed = 0
        if args.transpose is None:
            args.transpose = True
    if args.command == "annotate" and args.markers and not (args.matrix and args.genes
                                                            and args.barcodes):
        parser.error("--markers needs --matrix, --genes and --barcodes")
    try:
        with threadpool_limits(limits=_threads(args)):
            return args.func(args)
    except (TrainingError, FloatingPointError) as exc:
        print(f"more-kit: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, OSError, ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"more-kit: error: {msg}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

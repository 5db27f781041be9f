"""On-disk artifacts: MatrixMarket counts, cell metadata, embeddings, parameter files.

All readers validate eagerly and raise subclasses of :class:`ValueError`
carrying the offending path, so the CLI can turn them into exit code 1.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
import scipy.sparse as sp

PARAM_MAGIC = b"MOREPK1\n"


class MtxFormatError(ValueError):
    pass


class MetadataError(ValueError):
    pass


class ParamFormatError(ValueError):
    pass


@dataclass
class ExpressionMatrix:
    """Sparse cells x genes count matrix with its row and column names."""

    X: sp.csr_matrix
    gene_names: List[str]
    barcodes: List[str]

    def __post_init__(self):
        X = sp.csr_matrix(self.X)
        X.sum_duplicates()
        X.sort_indices()
        self.X = X
        self.gene_names = [str(g) for g in self.gene_names]
        self.barcodes = [str(b) for b in self.barcodes]
        self.validate()

    @property
    def n_cells(self) -> int:
        return self.X.shape[0]

    @property
    def n_genes(self) -> int:
        return self.X.shape[1]

    def validate(self) -> None:
        X = self.X
        indptr, indices = X.indptr, X.indices
        if np.any(np.diff(indptr) < 0) or indptr[-1] != X.nnz:
            raise MtxFormatError("row offsets are not a valid CSR layout")
        if X.nnz:
            if indices.max() >= X.shape[1] or indices.min() < 0:
                raise MtxFormatError("column index out of range")
            row_of = np.repeat(np.arange(X.shape[0]), np.diff(indptr))
            same_row = row_of[1:] == row_of[:-1]
            if np.any(same_row & (np.diff(indices) <= 0)):
                raise MtxFormatError("column indices not strictly increasing within a row")
        if np.any(X.data < 0):
            raise MtxFormatError("negative counts")
        if len(self.gene_names) != X.shape[1]:
            raise MtxFormatError(
                f"{len(self.gene_names)} gene names for {X.shape[1]} genes")
        if len(self.barcodes) != X.shape[0]:
            raise MtxFormatError(
                f"{len(self.barcodes)} barcodes for {X.shape[0]} cells")
        if len(set(self.gene_names)) != len(self.gene_names):
            raise MtxFormatError("gene names are not unique")
        if len(set(self.barcodes)) != len(self.barcodes):
            raise MtxFormatError("barcodes are not unique")

    def subset_cells(self, keep: np.ndarray) -> "ExpressionMatrix":
        keep = np.asarray(keep)
        if keep.dtype == bool:
            keep = np.flatnonzero(keep)
        return ExpressionMatrix(self.X[keep], list(self.gene_names),
                                [self.barcodes[i] for i in keep])

    def subset_genes(self, keep: np.ndarray) -> "ExpressionMatrix":
        keep = np.asarray(keep)
        if keep.dtype == bool:
            keep = np.flatnonzero(keep)
        return ExpressionMatrix(self.X[:, keep], [self.gene_names[j] for j in keep],
                                list(self.barcodes))


@dataclass
class CellTable:
    """Per-cell metadata aligned to the rows of an :class:`ExpressionMatrix`.

    ``label`` holds -1 where a cell has no label; ``label is None`` means the
    metadata carried no label column at all.
    """

    barcode: List[str]
    batch: np.ndarray
    batch_names: List[str]
    label: Optional[np.ndarray] = None
    label_names: List[str] = field(default_factory=list)
    n_genes_by_counts: Optional[np.ndarray] = None
    total_counts: Optional[np.ndarray] = None
    pct_counts_mt: Optional[np.ndarray] = None
    pct_counts_ribo: Optional[np.ndarray] = None
    doublet_score: Optional[np.ndarray] = None
    is_doublet: Optional[np.ndarray] = None

    def __post_init__(self):
        self.batch = np.asarray(self.batch, dtype=np.int64)
        if self.label is not None:
            self.label = np.asarray(self.label, dtype=np.int64)

    @property
    def n_cells(self) -> int:
        return len(self.barcode)

    @property
    def n_batches(self) -> int:
        return len(self.batch_names)

    @property
    def n_labels(self) -> int:
        return len(self.label_names)

    @property
    def has_labels(self) -> bool:
        return self.label is not None and bool(np.any(self.label >= 0))

    def subset(self, keep: np.ndarray) -> "CellTable":
        keep = np.asarray(keep)
        if keep.dtype == bool:
            keep = np.flatnonzero(keep)

        def take(a):
            return None if a is None else np.asarray(a)[keep]

        return CellTable(
            barcode=[self.barcode[i] for i in keep],
            batch=self.batch[keep],
            batch_names=list(self.batch_names),
            label=take(self.label),
            label_names=list(self.label_names),
            n_genes_by_counts=take(self.n_genes_by_counts),
            total_counts=take(self.total_counts),
            pct_counts_mt=take(self.pct_counts_mt),
            pct_counts_ribo=take(self.pct_counts_ribo),
            doublet_score=take(self.doublet_score),
            is_doublet=take(self.is_doublet),
        )

    @classmethod
    def single_batch(cls, barcodes: Sequence[str]) -> "CellTable":
        return cls(list(barcodes), np.zeros(len(barcodes), dtype=np.int64), ["batch0"])


@dataclass
class Embeddings:
    values: np.ndarray
    kind: str = "fused"  # pca | backbone:m | fused | refined


def _read_names(path: Path) -> List[str]:
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with open(path) as fh:
        # 10x features files carry extra tab-separated columns; first is the id
        return [line.rstrip("\n").split("\t")[0] for line in fh if line.strip()]


def read_mtx(matrix_path, genes_path, barcodes_path, transpose: bool = True) -> ExpressionMatrix:
    """Read a MatrixMarket coordinate file plus its gene and barcode lists.

    ``transpose=True`` (the default) means the file is stored genes x cells,
    the usual public-data layout; pass ``False`` for cells x genes files.
    Duplicate coordinates are summed.
    """
    matrix_path, genes_path, barcodes_path = map(Path, (matrix_path, genes_path, barcodes_path))
    for p in (matrix_path, genes_path, barcodes_path):
        if not p.exists():
            raise FileNotFoundError(f"no such file: {p}")
    genes = _read_names(genes_path)
    barcodes = _read_names(barcodes_path)

    with open(matrix_path) as fh:
        header = fh.readline()
        parts = header.strip().lower().split()
        if len(parts) < 5 or parts[0] != "%%matrixmarket" or parts[1] != "matrix" \
                or parts[2] != "coordinate":
            raise MtxFormatError(f"{matrix_path}: not a MatrixMarket coordinate file")
        if parts[3] not in ("integer", "real") or parts[4] != "general":
            raise MtxFormatError(f"{matrix_path}: unsupported field/symmetry {parts[3:5]}")
        line = fh.readline()
        while line.startswith("%"):
            line = fh.readline()
        try:
            n_rows, n_cols, nnz = (int(v) for v in line.split())
        except ValueError:
            raise MtxFormatError(f"{matrix_path}: bad size line {line.strip()!r}") from None
        body = np.zeros((0, 3))
        if nnz > 0:
            try:
                body = np.loadtxt(fh, dtype=np.float64, comments="%", ndmin=2)
            except ValueError as exc:
                raise MtxFormatError(f"{matrix_path}: non-numeric entry ({exc})") from None
    if body.shape != (nnz, 3):
        raise MtxFormatError(
            f"{matrix_path}: expected {nnz} entries with 3 fields, got {body.shape}")
    rows = body[:, 0].astype(np.int64) - 1
    cols = body[:, 1].astype(np.int64) - 1
    if np.any(body[:, :2] != np.round(body[:, :2])):
        raise MtxFormatError(f"{matrix_path}: non-integer coordinate")
    if nnz and (rows.min() < 0 or cols.min() < 0 or rows.max() >= n_rows or cols.max() >= n_cols):
        raise MtxFormatError(f"{matrix_path}: coordinate out of range")
    vals = body[:, 2]
    if not np.all(np.isfinite(vals)):
        raise MtxFormatError(f"{matrix_path}: non-finite entry")

    if transpose:
        rows, cols = cols, rows
        n_rows, n_cols = n_cols, n_rows
    if len(genes) != n_cols:
        raise MtxFormatError(
            f"{genes_path}: {len(genes)} names but matrix header declares {n_cols} genes")
    if len(barcodes) != n_rows:
        raise MtxFormatError(
            f"{barcodes_path}: {len(barcodes)} names but matrix header declares {n_rows} cells")
    X = sp.coo_matrix((vals, (rows, cols)), shape=(n_rows, n_cols)).tocsr()
    return ExpressionMatrix(X, genes, barcodes)


def write_mtx(em: ExpressionMatrix, matrix_path, genes_path, barcodes_path,
              transpose: bool = True) -> None:
    """Inverse of :func:`read_mtx`; integer field when every value is integral."""
    X = em.X.tocoo()
    rows, cols, vals = X.row + 1, X.col + 1, X.data
    n_rows, n_cols = X.shape
    if transpose:
        rows, cols, n_rows, n_cols = cols, rows, n_cols, n_rows
    order = np.lexsort((rows, cols))
    integral = bool(np.all(vals == np.round(vals)) and np.all(np.abs(vals) < 2.0 ** 53))
    with open(matrix_path, "w") as fh:
        fh.write(f"%%MatrixMarket matrix coordinate {'integer' if integral else 'real'} general\n")
        fh.write(f"{n_rows} {n_cols} {len(vals)}\n")
        if integral:
            body = np.column_stack([rows[order], cols[order], vals[order].astype(np.int64)])
            np.savetxt(fh, body, fmt="%d")
        else:
            # repr of a Python float is the shortest string that round-trips
            fh.writelines(f"{r} {c} {v!r}\n" for r, c, v in
                          zip(rows[order].tolist(), cols[order].tolist(), vals[order].tolist()))
    Path(genes_path).write_text("".join(f"{g}\n" for g in em.gene_names))
    Path(barcodes_path).write_text("".join(f"{b}\n" for b in em.barcodes))


def _dense_index(values: Iterable[str]) -> tuple[np.ndarray, List[str]]:
    names: Dict[str, int] = {}
    idx = [names.setdefault(v, len(names)) for v in values]
    return np.asarray(idx, dtype=np.int64), list(names)


def read_cell_metadata(path, matrix: ExpressionMatrix) -> CellTable:
    """Read a TSV with ``barcode``, ``batch`` and optional ``label`` columns.

    Rows are reordered to the matrix row order. Batch and label strings become
    dense indices in order of first appearance (in matrix order).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh, delimiter="\t") if r and not r[0].startswith("#")]
    if not rows:
        raise MetadataError(f"{path}: empty metadata file")
    header = rows[0]
    for col in ("barcode", "batch"):
        if col not in header:
            raise MetadataError(f"{path}: missing required column {col!r}")
    ib, ibatch = header.index("barcode"), header.index("batch")
    ilabel = header.index("label") if "label" in header else None

    by_barcode = {}
    for r in rows[1:]:
        if len(r) < len(header):
            r = r + [""] * (len(header) - len(r))
        if r[ib] in by_barcode:
            raise MetadataError(f"{path}: duplicated barcode {r[ib]!r}")
        by_barcode[r[ib]] = r
    known = set(matrix.barcodes)
    unknown = [b for b in by_barcode if b not in known]
    if unknown:
        raise MetadataError(f"{path}: unknown barcode {unknown[0]!r} not in matrix")
    missing = [b for b in matrix.barcodes if b not in by_barcode]
    if missing:
        raise MetadataError(f"{path}: missing barcode {missing[0]!r} present in matrix")

    ordered = [by_barcode[b] for b in matrix.barcodes]
    batch, batch_names = _dense_index(r[ibatch] for r in ordered)
    label, label_names = None, []
    if ilabel is not None:
        raw = [r[ilabel] for r in ordered]
        present = [v for v in raw if v not in ("", "NA")]
        _, label_names = _dense_index(present)
        lookup = {n: i for i, n in enumerate(label_names)}
        label = np.asarray([lookup.get(v, -1) for v in raw], dtype=np.int64)
    return CellTable(list(matrix.barcodes), batch, batch_names, label, label_names)


def _comment_lines(header: Optional[Mapping[str, object]]) -> str:
    if not header:
        return ""
    return "".join(f"# {k}={v}\n" for k, v in header.items())


def write_embeddings(emb, cells: CellTable, path, header: Optional[Mapping[str, object]] = None) -> None:
    values = np.asarray(emb.values if isinstance(emb, Embeddings) else emb, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] != cells.n_cells:
        raise ValueError(
            f"embedding has {values.shape[0]} rows but cell table has {cells.n_cells} cells")
    with_label = cells.label is not None
    cols = ["barcode", "batch"] + (["label"] if with_label else [])
    cols += [f"e_{j}" for j in range(values.shape[1])]
    lines = [_comment_lines(header), "\t".join(cols), "\n"]
    for i in range(cells.n_cells):
        fields = [cells.barcode[i], cells.batch_names[cells.batch[i]]]
        if with_label:
            fields.append(cells.label_names[cells.label[i]] if cells.label[i] >= 0 else "")
        fields.extend(f"{v:.9g}" for v in values[i])
        lines.append("\t".join(fields))
        lines.append("\n")
    Path(path).write_text("".join(lines))


def read_embeddings(path) -> tuple[Embeddings, CellTable]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh, delimiter="\t") if r and not r[0].startswith("#")]
    if not rows:
        raise MetadataError(f"{path}: empty embeddings file")
    header = rows[0]
    if "barcode" not in header or "batch" not in header:
        raise MetadataError(f"{path}: embeddings need barcode and batch columns")
    ecols = [j for j, c in enumerate(header) if c.startswith("e_")]
    barcodes = [r[header.index("barcode")] for r in rows[1:]]
    batch, batch_names = _dense_index(r[header.index("batch")] for r in rows[1:])
    label, label_names = None, []
    if "label" in header:
        raw = [r[header.index("label")] for r in rows[1:]]
        _, label_names = _dense_index(v for v in raw if v not in ("", "NA"))
        lookup = {n: i for i, n in enumerate(label_names)}
        label = np.asarray([lookup.get(v, -1) for v in raw], dtype=np.int64)
    values = np.asarray([[float(r[j]) for j in ecols] for r in rows[1:]], dtype=np.float64)
    values = values.reshape(len(barcodes), len(ecols))
    return Embeddings(values, "file"), CellTable(barcodes, batch, batch_names, label, label_names)


def write_table(path, columns: Mapping[str, Sequence], header: Optional[Mapping[str, object]] = None,
                float_fmt: str = "{:.9g}") -> None:
    """Write a TSV from equal-length columns, with ``#`` comment header lines."""
    names = list(columns)
    n = len(columns[names[0]]) if names else 0

    def fmt(v):
        if isinstance(v, (float, np.floating)):
            if np.isinf(v):
                return "inf" if v > 0 else "-inf"
            return float_fmt.format(float(v))
        if isinstance(v, (bool, np.bool_)):
            return "1" if v else "0"
        return str(v)

    out = [_comment_lines(header), "\t".join(names), "\n"]
    for i in range(n):
        out.append("\t".join(fmt(columns[c][i]) for c in names))
        out.append("\n")
    Path(path).write_text("".join(out))


def read_table(path) -> Dict[str, List[str]]:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh, delimiter="\t") if r and not r[0].startswith("#")]
    header = rows[0]
    return {c: [r[j] for r in rows[1:]] for j, c in enumerate(header)}


def read_comment_header(path) -> Dict[str, str]:
    meta = {}
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            key, _, value = line[1:].strip().partition("=")
            meta[key.strip()] = value.strip()
    return meta


def write_params(path, sections: Mapping[str, np.ndarray]) -> None:
    """Flat binary parameter file.

    Layout: magic ``MOREPK1\\n``, u64 section count, then per section a u64
    byte length and UTF-8 name, a u64 element count and that many f64
    values, all little-endian. Shapes are not stored; see the ``meta.*``
    sections written by the model and backbone modules.
    """
    with open(path, "wb") as fh:
        fh.write(PARAM_MAGIC)
        fh.write(struct.pack("<Q", len(sections)))
        for name, arr in sections.items():
            raw = name.encode("utf-8")
            flat = np.ascontiguousarray(np.asarray(arr, dtype="<f8").ravel())
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<Q", flat.size))
            fh.write(flat.tobytes())


def read_params(path) -> Dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    data = path.read_bytes()
    if not data.startswith(PARAM_MAGIC):
        raise ParamFormatError(f"{path}: bad magic")
    pos = len(PARAM_MAGIC)

    def u64():
        nonlocal pos
        if pos + 8 > len(data):
            raise ParamFormatError(f"{path}: truncated file")
        (v,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        return v

    out: Dict[str, np.ndarray] = {}
    for _ in range(u64()):
        n = u64()
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        count = u64()
        end = pos + 8 * count
        if end > len(data):
            raise ParamFormatError(f"{path}: truncated section {name!r}")
        out[name] = np.frombuffer(data[pos:end], dtype="<f8").astype(np.float64)
        pos = end
    if pos != len(data):
        raise ParamFormatError(f"{path}: trailing bytes after last section")
    return out

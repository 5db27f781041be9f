import struct

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from more_kit.io import (CellTable, Embeddings, ExpressionMatrix, MetadataError, MtxFormatError,
                         ParamFormatError, read_cell_metadata, read_embeddings, read_mtx,
                         read_params, write_embeddings, write_mtx, write_params)


def _write(tmp_path, body, genes, barcodes):
    m = tmp_path / "m.mtx"
    m.write_text(body)
    g = tmp_path / "g.tsv"
    g.write_text("".join(f"{x}\n" for x in genes))
    b = tmp_path / "b.tsv"
    b.write_text("".join(f"{x}\n" for x in barcodes))
    return m, g, b


HEADER = "%%MatrixMarket matrix coordinate integer general\n"


def test_read_two_by_two(tmp_path):
    paths = _write(tmp_path, HEADER + "2 2 2\n1 1 3\n2 2 5\n", ["g1", "g2"], ["c1", "c2"])
    em = read_mtx(*paths, transpose=False)
    assert em.X.toarray().tolist() == [[3, 0], [0, 5]]
    assert em.X.indptr.tolist() == [0, 1, 2]


def test_duplicates_are_summed(tmp_path):
    paths = _write(tmp_path, HEADER + "1 1 2\n1 1 1\n1 1 2\n", ["g1"], ["c1"])
    em = read_mtx(*paths, transpose=False)
    assert em.X.nnz == 1 and em.X[0, 0] == 3


def test_gene_count_mismatch(tmp_path):
    paths = _write(tmp_path, HEADER + "2 2 1\n1 1 3\n", ["g1", "g2", "g3"], ["c1", "c2"])
    with pytest.raises(MtxFormatError, match="g.tsv"):
        read_mtx(*paths, transpose=False)


def test_transpose_orientation(tmp_path):
    # file is genes x cells: 3 genes, 2 cells
    paths = _write(tmp_path, HEADER + "3 2 2\n3 1 7\n1 2 4\n", ["a", "b", "c"], ["x", "y"])
    em = read_mtx(*paths)
    assert em.X.shape == (2, 3)
    assert em.X.toarray().tolist() == [[0, 0, 7], [4, 0, 0]]


@pytest.mark.parametrize("body", [
    HEADER + "2 2 1\n1 x 3\n",
    HEADER + "2 2 1\n3 1 3\n",
    HEADER + "2 2 1\n0 1 3\n",
    "%%MatrixMarket matrix array real general\n2 2\n1\n2\n3\n4\n",
    HEADER + "2 2 2\n1 1 3\n",
])
def test_malformed_files(tmp_path, body):
    paths = _write(tmp_path, body, ["g1", "g2"], ["c1", "c2"])
    with pytest.raises(MtxFormatError):
        read_mtx(*paths, transpose=False)


def test_real_field_accepted(tmp_path):
    body = "%%MatrixMarket matrix coordinate real general\n% comment\n1 2 1\n1 2 0.5\n"
    em = read_mtx(*_write(tmp_path, body, ["g1", "g2"], ["c1"]), transpose=False)
    assert em.X[0, 1] == 0.5


def test_missing_file_names_path(tmp_path):
    m, g, b = _write(tmp_path, HEADER + "1 1 0\n", ["g"], ["c"])
    with pytest.raises(FileNotFoundError, match="nope.tsv"):
        read_mtx(m, tmp_path / "nope.tsv", b)


def test_invariants_rejected():
    X = sp.csr_matrix(np.array([[1.0, -1.0]]))
    with pytest.raises(ValueError):
        ExpressionMatrix(X, ["a", "b"], ["c"])
    with pytest.raises(ValueError):
        ExpressionMatrix(sp.csr_matrix(np.ones((1, 2))), ["a", "a"], ["c"])


@settings(max_examples=40, deadline=None)
@given(arrays(np.int64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
              elements=st.integers(0, 50)), st.booleans())
def test_mtx_round_trip(tmp_path_factory, counts, transpose):
    tmp = tmp_path_factory.mktemp("rt")
    n, g = counts.shape
    em = ExpressionMatrix(sp.csr_matrix(counts.astype(float)), [f"g{j}" for j in range(g)],
                          [f"c{i}" for i in range(n)])
    paths = (tmp / "m.mtx", tmp / "g.tsv", tmp / "b.tsv")
    write_mtx(em, *paths, transpose=transpose)
    back = read_mtx(*paths, transpose=transpose)
    assert np.array_equal(back.X.toarray(), counts)
    assert back.gene_names == em.gene_names and back.barcodes == em.barcodes


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)),
              elements=st.one_of(st.just(0.0), st.floats(1e-300, 1e300))))
def test_mtx_round_trip_real(tmp_path_factory, values):
    tmp = tmp_path_factory.mktemp("rt")
    n, g = values.shape
    em = ExpressionMatrix(sp.csr_matrix(values), [f"g{j}" for j in range(g)],
                          [f"c{i}" for i in range(n)])
    paths = (tmp / "m.mtx", tmp / "g.tsv", tmp / "b.tsv")
    write_mtx(em, *paths)
    assert np.array_equal(read_mtx(*paths).X.toarray(), values)


def _em(barcodes):
    return ExpressionMatrix(sp.csr_matrix((len(barcodes), 1)), ["g"], barcodes)


def test_metadata_first_appearance(tmp_path):
    p = tmp_path / "meta.tsv"
    p.write_text("barcode\tbatch\nc2\tlab1\nc1\tlab1\nc3\tlab2\n")
    cells = read_cell_metadata(p, _em(["c1", "c2", "c3"]))
    assert cells.batch.tolist() == [0, 0, 1]
    assert cells.batch_names == ["lab1", "lab2"]
    assert cells.label is None and not cells.has_labels


def test_metadata_batches_in_matrix_order(tmp_path):
    p = tmp_path / "meta.tsv"
    p.write_text("barcode\tbatch\tlabel\nc1\tlab1\tT\nc2\tlab2\tNA\nc3\tlab1\tB\n")
    cells = read_cell_metadata(p, _em(["c1", "c2", "c3"]))
    assert cells.batch.tolist() == [0, 1, 0]
    assert cells.label.tolist() == [0, -1, 1]


@pytest.mark.parametrize("text", [
    "barcode\tbatch\nc1\tlab1\n",
    "barcode\tbatch\nc1\tx\nc2\tx\nzz\tx\n",
    "barcode\tlabel\nc1\tA\nc2\tB\n",
    "barcode\tbatch\nc1\tx\nc1\tx\nc2\tx\n",
])
def test_metadata_errors(tmp_path, text):
    p = tmp_path / "meta.tsv"
    p.write_text(text)
    with pytest.raises(MetadataError):
        read_cell_metadata(p, _em(["c1", "c2"]))


def test_embeddings_single_cell(tmp_path):
    cells = CellTable(["c1"], [0], ["b0"])
    write_embeddings(Embeddings(np.array([[0.5, -1.0]])), cells, tmp_path / "e.tsv")
    lines = [ln for ln in (tmp_path / "e.tsv").read_text().splitlines() if not ln.startswith("#")]
    assert lines[1].split("\t") == ["c1", "b0", "0.5", "-1"]


def test_embeddings_round_trip(tmp_path, rng):
    values = rng.standard_normal((30, 5)) * 10 ** rng.uniform(-3, 3, (30, 5))
    cells = CellTable([f"c{i}" for i in range(30)], np.arange(30) % 2, ["a", "b"],
                      np.arange(30) % 3, ["x", "y", "z"])
    write_embeddings(values, cells, tmp_path / "e.tsv", {"seed": 3})
    emb, back = read_embeddings(tmp_path / "e.tsv")
    assert np.max(np.abs(emb.values - values) / np.maximum(np.abs(values), 1)) < 1e-8
    assert back.barcode == cells.barcode and back.batch.tolist() == cells.batch.tolist()


def test_embeddings_row_mismatch(tmp_path):
    with pytest.raises(ValueError):
        write_embeddings(np.zeros((2, 2)), CellTable(["c"], [0], ["b"]), tmp_path / "e.tsv")


def test_params_round_trip(tmp_path, rng):
    sections = {"a.w": rng.standard_normal((3, 4)), "b": np.array([1.5]), "ü.empty": np.zeros(0)}
    write_params(tmp_path / "p.bin", sections)
    raw = (tmp_path / "p.bin").read_bytes()
    assert raw.startswith(b"MOREPK1\n")
    assert struct.unpack("<Q", raw[8:16])[0] == 3
    back = read_params(tmp_path / "p.bin")
    assert list(back) == list(sections)
    assert np.array_equal(back["a.w"], sections["a.w"].ravel())


def test_params_bad_magic(tmp_path):
    (tmp_path / "p.bin").write_bytes(b"NOTMAGIC" + b"\0" * 8)
    with pytest.raises(ParamFormatError):
        read_params(tmp_path / "p.bin")


def test_params_truncated(tmp_path):
    write_params(tmp_path / "p.bin", {"x": np.arange(4.0)})
    raw = (tmp_path / "p.bin").read_bytes()
    (tmp_path / "p.bin").write_bytes(raw[:-3])
    with pytest.raises(ParamFormatError):
        read_params(tmp_path / "p.bin")

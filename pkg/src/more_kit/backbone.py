"""Frozen per-modality transformer encoder.

Each cell is a set of gene tokens: token ``t`` is the gene's identity
embedding plus its expression value times a shared projection vector. The
tokens run through pre-norm transformer blocks and are mean-pooled. There
is no positional signal, so the encoder is symmetric in gene order as long
as identity embeddings move with their values.

Weights come from a seeded generator and are read-only once built.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Dict, Mapping

import numpy as np
from scipy.special import erf

LN_EPS = 1e-5


@dataclass(frozen=True)
class BackboneSpec:
    modality: int = 0
    n_tokens: int = 256
    d_model: int = 64
    n_layers: int = 3
    n_heads: int = 4
    ffn_dim: int = 256
    seed: int = 0

    def __post_init__(self):
        for name in ("n_tokens", "d_model", "n_heads", "ffn_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_layers < 0 or self.modality < 0:
            raise ValueError("n_layers and modality must be nonnegative")
        if self.d_model % self.n_heads:
            raise ValueError(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    @property
    def out_dim(self) -> int:
        return self.d_model


class BackboneWeights:
    """Immutable weight store; every array is flagged read-only."""

    frozen = True

    def __init__(self, spec: BackboneSpec, tensors: Mapping[str, np.ndarray]):
        self.spec = spec
        self._tensors: Dict[str, np.ndarray] = {}
        for name, arr in tensors.items():
            a = np.array(arr, dtype=np.float64, copy=True)
            if not np.all(np.isfinite(a)):
                raise ValueError(f"non-finite backbone weight {name}")
            a.setflags(write=False)
            self._tensors[name] = a
        self.hash = self.content_hash()

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def names(self):
        return list(self._tensors)

    @property
    def n_params(self) -> int:
        return int(sum(a.size for a in self._tensors.values()))

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self._tensors):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self._tensors[name]).tobytes())
        return h.hexdigest()

    def to_sections(self) -> Dict[str, np.ndarray]:
        s = self.spec
        prefix = f"backbone.m{s.modality}"
        out = {f"{prefix}.meta": np.array([s.n_tokens, s.d_model, s.n_layers, s.n_heads,
                                           s.ffn_dim, s.seed], dtype=np.float64)}
        for name, arr in self._tensors.items():
            out[f"{prefix}.{name}"] = arr
        return out

    @classmethod
    def from_sections(cls, sections: Mapping[str, np.ndarray], modality: int) -> "BackboneWeights":
        prefix = f"backbone.m{modality}"
        meta = sections[f"{prefix}.meta"].astype(np.int64)
        spec = BackboneSpec(modality, *(int(v) for v in meta))
        shapes = _shapes(spec)
        tensors = {}
        for name, shape in shapes.items():
            flat = sections[f"{prefix}.{name}"]
            if flat.size != int(np.prod(shape)):
                raise ValueError(f"section {prefix}.{name} has {flat.size} values, want {shape}")
            tensors[name] = flat.reshape(shape)
        return cls(spec, tensors)


def _shapes(spec: BackboneSpec) -> Dict[str, tuple]:
    d, f = spec.d_model, spec.ffn_dim
    shapes = {"gene_emb": (spec.n_tokens, d), "value_proj": (d,)}
    for l in range(spec.n_layers):
        p = f"layer{l}."
        shapes.update({
            p + "ln1.scale": (d,), p + "ln1.offset": (d,),
            p + "attn.wq": (d, d), p + "attn.wk": (d, d),
            p + "attn.wv": (d, d), p + "attn.wo": (d, d),
            p + "ln2.scale": (d,), p + "ln2.offset": (d,),
            p + "ffn.w1": (d, f), p + "ffn.b1": (f,),
            p + "ffn.w2": (f, d), p + "ffn.b2": (d,),
        })
    shapes.update({"final_ln.scale": (d,), "final_ln.offset": (d,)})
    return shapes


def init_frozen_backbone(spec: BackboneSpec) -> BackboneWeights:
    """Draw all weights from ``spec.seed``; matrices scaled by 1/sqrt(fan_in)."""
    rng = np.random.default_rng([spec.seed, spec.modality])
    tensors = {}
    for name, shape in _shapes(spec).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "scale":
            tensors[name] = np.ones(shape)
        elif leaf in ("offset", "b1", "b2"):
            tensors[name] = np.zeros(shape)
        elif name in ("gene_emb", "value_proj"):
            tensors[name] = rng.standard_normal(shape)
        else:
            tensors[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
    return BackboneWeights(spec, tensors)


def _layer_norm(x, scale, offset):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * scale + offset


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def _encode_block(w: BackboneWeights, X: np.ndarray) -> np.ndarray:
    s = w.spec
    n, G = X.shape
    H, dh = s.n_heads, s.d_model // s.n_heads
    x = w["gene_emb"][None, :, :] + X[:, :, None] * w["value_proj"][None, None, :]
    for l in range(s.n_layers):
        p = f"layer{l}."
        h = _layer_norm(x, w[p + "ln1.scale"], w[p + "ln1.offset"])
        q = (h @ w[p + "attn.wq"]).reshape(n, G, H, dh).transpose(0, 2, 1, 3)
        k = (h @ w[p + "attn.wk"]).reshape(n, G, H, dh).transpose(0, 2, 1, 3)
        v = (h @ w[p + "attn.wv"]).reshape(n, G, H, dh).transpose(0, 2, 1, 3)
        att = q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh)
        att -= att.max(axis=-1, keepdims=True)
        np.exp(att, out=att)
        att /= att.sum(axis=-1, keepdims=True)
        ctx = (att @ v).transpose(0, 2, 1, 3).reshape(n, G, s.d_model)
        x = x + ctx @ w[p + "attn.wo"]
        h = _layer_norm(x, w[p + "ln2.scale"], w[p + "ln2.offset"])
        x = x + _gelu(h @ w[p + "ffn.w1"] + w[p + "ffn.b1"]) @ w[p + "ffn.w2"] + w[p + "ffn.b2"]
    x = _layer_norm(x, w["final_ln.scale"], w["final_ln.offset"])
    return x.mean(axis=1)


def encode(weights: BackboneWeights, X, chunk: int = 32) -> np.ndarray:
    """Encode a vector of length G, or a cells x G matrix, row by row.

    Rows never interact; chunking only bounds memory.
    """
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != weights.spec.n_tokens:
        raise ValueError(f"expected {weights.spec.n_tokens} genes per cell, got {X.shape[1]}")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite expression values")
    out = np.empty((X.shape[0], weights.spec.d_model))
    for start in range(0, X.shape[0], chunk):
        out[start:start + chunk] = _encode_block(weights, X[start:start + chunk])
    return out[0] if single else out

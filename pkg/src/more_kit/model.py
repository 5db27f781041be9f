"""Trainable head on top of the frozen encoders.

Forward pass only: per-modality adapters, element-wise fusion, residual
batch refinement, classifier and masked-expression decoder. Gradients are
in :mod:`more_kit.train`.

Shapes use ``n`` cells, ``d`` embedding width, ``r`` adapter bottleneck,
``G`` decoded genes, ``C`` classes, ``B`` batches, ``M`` modalities.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

MAX_TRAINABLE_FRACTION = 0.05


@dataclass(frozen=True)
class HeadDims:
    d: int = 64
    n_modalities: int = 1
    n_batches: int = 1
    n_classes: int = 2
    n_genes: int = 256
    adapter_dim: int = 16
    # 0 keeps a full G x d decoder weight
    decoder_rank: int = 8
    depth: int = 2

    def __post_init__(self):
        if min(self.d, self.n_modalities, self.n_batches, self.n_genes, self.adapter_dim) < 1:
            raise ValueError(f"invalid head dimensions {self}")
        if self.n_classes < 2:
            raise ValueError("classifier needs at least two classes")
        if self.depth < 0 or self.decoder_rank < 0:
            raise ValueError("depth and decoder_rank must be nonnegative")


class MoreParams:
    """Trainable parameter store keyed by section name."""

    def __init__(self, dims: HeadDims, tensors: Mapping[str, np.ndarray]):
        self.dims = dims
        self.tensors: Dict[str, np.ndarray] = {k: np.array(v, dtype=np.float64)
                                               for k, v in tensors.items()}
        missing = set(self.shapes(dims)) - set(self.tensors)
        if missing:
            raise ValueError(f"missing parameter tensors: {sorted(missing)}")

    @staticmethod
    def shapes(dims: HeadDims) -> Dict[str, tuple]:
        d, r = dims.d, dims.adapter_dim
        out = {}
        for m in range(dims.n_modalities):
            out.update({f"adapter.m{m}.w1": (r, d), f"adapter.m{m}.b1": (r,),
                        f"adapter.m{m}.w2": (d, r), f"adapter.m{m}.b2": (d,),
                        f"fusion.omega.m{m}": (d,)})
        out["batch_emb"] = (dims.n_batches, d)
        out.update({"refiner.w1": (r, d), "refiner.b1": (r,),
                    "refiner.w2": (d, r), "refiner.b2": (d,),
                    "classifier.w": (dims.n_classes, d), "classifier.b": (dims.n_classes,),
                    "decoder.b": (dims.n_genes,)})
        if dims.decoder_rank:
            out["decoder.u"] = (dims.n_genes, dims.decoder_rank)
            out["decoder.v"] = (dims.decoder_rank, d)
        else:
            out["decoder.w"] = (dims.n_genes, d)
        return out

    @classmethod
    def init(cls, dims: HeadDims, seed: int = 0) -> "MoreParams":
        rng = np.random.default_rng(seed)
        d, r = dims.d, dims.adapter_dim
        t = {}
        for name, shape in cls.shapes(dims).items():
            if name.startswith("fusion.omega"):
                t[name] = np.ones(shape)
            elif len(shape) == 1 or name == "batch_emb":
                t[name] = np.zeros(shape)
            else:
                t[name] = rng.standard_normal(shape) / np.sqrt(shape[1])
        t["refiner.w2"] *= 0.1
        t["classifier.w"] *= 0.1
        return cls(dims, t)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self.tensors[name] = value

    def copy(self) -> "MoreParams":
        return MoreParams(self.dims, self.tensors)

    def zeros_like(self) -> Dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    @property
    def n_params(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))

    def to_sections(self) -> Dict[str, np.ndarray]:
        d = self.dims
        out = {"meta.head": np.array([d.d, d.n_modalities, d.n_batches, d.n_classes, d.n_genes,
                                      d.adapter_dim, d.decoder_rank, d.depth], dtype=np.float64)}
        out.update(self.tensors)
        return out

    @classmethod
    def from_sections(cls, sections: Mapping[str, np.ndarray]) -> "MoreParams":
        if "meta.head" not in sections:
            raise ValueError("parameter file has no meta.head section")
        dims = HeadDims(*(int(v) for v in sections["meta.head"]))
        tensors = {}
        for name, shape in cls.shapes(dims).items():
            if name not in sections:
                raise ValueError(f"parameter file lacks section {name!r}")
            flat = sections[name]
            if flat.size != int(np.prod(shape)):
                raise ValueError(f"section {name!r} has {flat.size} values, expected {shape}")
            tensors[name] = flat.reshape(shape)
        return cls(dims, tensors)


def trainable_fraction(params: MoreParams, backbone_params: int) -> float:
    return params.n_params / (params.n_params + backbone_params)


def check_param_budget(params: MoreParams, backbone_params: int,
                       limit: float = MAX_TRAINABLE_FRACTION) -> float:
    frac = trainable_fraction(params, backbone_params)
    if frac >= limit:
        raise ValueError(
            f"trainable parameters are {frac:.2%} of the model, limit is {limit:.0%}")
    return frac


@dataclass
class ForwardTrace:
    z_raw: List[Optional[np.ndarray]]
    present: np.ndarray  # n x M bool
    adapter_hidden: List[Optional[np.ndarray]]
    z: List[Optional[np.ndarray]]
    z_f: np.ndarray
    batch: np.ndarray
    iterates: List[np.ndarray] = field(default_factory=list)
    refine_inputs: List[np.ndarray] = field(default_factory=list)
    refine_hidden: List[np.ndarray] = field(default_factory=list)
    logits: Optional[np.ndarray] = None
    mask: Optional[np.ndarray] = None
    decoder_latent: Optional[np.ndarray] = None
    predictions: Optional[np.ndarray] = None

    @property
    def refined(self) -> np.ndarray:
        return self.iterates[-1]


def adapt(params: MoreParams, m: int, z_raw: np.ndarray) -> np.ndarray:
    return _adapt(params, m, z_raw)[1]


def _adapt(params, m, z_raw):
    h = np.tanh(z_raw @ params[f"adapter.m{m}.w1"].T + params[f"adapter.m{m}.b1"])
    return h, h @ params[f"adapter.m{m}.w2"].T + params[f"adapter.m{m}.b2"]


def fuse(params: MoreParams, zs: Sequence[Optional[np.ndarray]],
         present: Optional[np.ndarray] = None) -> np.ndarray:
    """Element-wise weighted sum of the modality embeddings.

    ``None`` entries (or ``present[:, m] == False`` rows) are missing
    modalities and contribute nothing.
    """
    if all(z is None for z in zs):
        raise ValueError("no modality present")
    out = None
    for m, z in enumerate(zs):
        if z is None:
            continue
        term = params[f"fusion.omega.m{m}"] * z
        if present is not None:
            term = term * present[..., m, None]
        out = term if out is None else out + term
    return out


def _refine_step(params, y, b):
    u = y - b
    g = np.tanh(u @ params["refiner.w1"].T + params["refiner.b1"])
    return u, g, y + g @ params["refiner.w2"].T + params["refiner.b2"]


def refine(params: MoreParams, z_f: np.ndarray, batch_index, depth: Optional[int] = None,
           refine_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None):
    """Residual refinement ``y <- y + Refine(y - b_batch)`` repeated ``depth`` times.

    The same batch embedding is subtracted at every step. ``refine_fn``
    replaces the learned refiner (used to probe the iteration itself).
    Returns ``(final, iterates)`` with ``iterates[0] is z_f``.
    """
    depth = params.dims.depth if depth is None else depth
    if depth < 0:
        raise ValueError("depth must be >= 0")
    batch_index = np.asarray(batch_index)
    if np.any(batch_index < 0) or np.any(batch_index >= params.dims.n_batches):
        raise IndexError(f"batch index out of range [0, {params.dims.n_batches})")
    b = params["batch_emb"][batch_index]
    iterates = [z_f]
    y = z_f
    for _ in range(depth):
        if refine_fn is None:
            y = _refine_step(params, y, b)[2]
        else:
            y = y + refine_fn(y - b)
        iterates.append(y)
    return y, iterates


def classify(params: MoreParams, z: np.ndarray) -> np.ndarray:
    return z @ params["classifier.w"].T + params["classifier.b"]


def decode_masked(params: MoreParams, z: np.ndarray, mask) -> np.ndarray:
    """Predicted expression at the gene positions in ``mask`` (may be empty)."""
    mask = np.asarray(mask, dtype=np.int64)
    if mask.size and (mask.min() < 0 or mask.max() >= params.dims.n_genes):
        raise IndexError("mask position outside [0, G)")
    if params.dims.decoder_rank:
        latent = z @ params["decoder.v"].T
        return latent @ params["decoder.u"][mask].T + params["decoder.b"][mask]
    return z @ params["decoder.w"][mask].T + params["decoder.b"][mask]


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def forward(params: MoreParams, z_raw: Sequence[Optional[np.ndarray]], batch,
            mask=None, present: Optional[np.ndarray] = None) -> ForwardTrace:
    """Full head forward over a block of cells, keeping what backward needs."""
    dims = params.dims
    if len(z_raw) != dims.n_modalities:
        raise ValueError(f"expected {dims.n_modalities} modalities, got {len(z_raw)}")
    n = next(z.shape[0] for z in z_raw if z is not None)
    if present is None:
        present = np.column_stack([np.full(n, z is not None) for z in z_raw])
    present = np.asarray(present, dtype=bool)
    hidden, zs = [], []
    for m, zr in enumerate(z_raw):
        if zr is None:
            hidden.append(None)
            zs.append(None)
            continue
        h, z = _adapt(params, m, zr)
        hidden.append(h)
        zs.append(z)
    z_f = fuse(params, zs, present)
    batch = np.asarray(batch, dtype=np.int64)
    if np.any(batch < 0) or np.any(batch >= dims.n_batches):
        raise IndexError(f"batch index out of range [0, {dims.n_batches})")
    trace = ForwardTrace(list(z_raw), present, hidden, zs, z_f, batch)

    b = params["batch_emb"][batch]
    y = z_f
    trace.iterates.append(y)
    for _ in range(dims.depth):
        u, g, y = _refine_step(params, y, b)
        trace.refine_inputs.append(u)
        trace.refine_hidden.append(g)
        trace.iterates.append(y)
    trace.logits = classify(params, y)
    if mask is not None:
        trace.mask = np.asarray(mask, dtype=np.int64)
        if dims.decoder_rank:
            trace.decoder_latent = y @ params["decoder.v"].T
        trace.predictions = decode_masked(params, y, trace.mask)
    return trace

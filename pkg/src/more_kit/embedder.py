"""Estimator wrapper: frozen encoders + trainable head, sklearn style."""
from __future__ import annotations

import logging
from typing import Dict, List, Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .backbone import BackboneSpec, BackboneWeights, encode, init_frozen_backbone
from .io import read_params, write_params
from .losses import LossWeights
from .model import HeadDims, MoreParams, check_param_budget, classify, forward, softmax
from .train import TrainConfig, TrainData, train

logger = logging.getLogger(__name__)


def _as_modalities(X) -> List[Optional[np.ndarray]]:
    if isinstance(X, (list, tuple)):
        return [None if x is None else check_array(x, dtype=np.float64) for x in X]
    return [check_array(X, dtype=np.float64)]


class MoreEmbedder(TransformerMixin, BaseEstimator):
    """Batch-robust cell embeddings from frozen transformer encoders.

    ``X`` is a cells x genes matrix of normalized expression, or a list of
    such matrices, one per modality. Cells lacking a modality keep a
    placeholder row and are flagged ``False`` in the ``present`` mask
    (cells x modalities). ``y`` holds integer class labels with -1 for unlabeled
    cells; ``batches`` holds integer batch indices.

    Only the head (adapters, fusion weights, batch embeddings, refiner,
    classifier, decoder) is trained. Encoder outputs are standardized with
    statistics from the training cells before entering the adapters.
    """

    def __init__(self, d_model=64, n_layers=3, n_heads=4, ffn_dim=256, adapter_dim=16,
                 decoder_rank=8, depth=2, epochs=30, batch_size=128, lr=1e-3, beta1=0.9,
                 beta2=0.999, eps=1e-8,
                 lambda_ce=1.0, lambda_supcon=0.5, lambda_align=0.5, lambda_var=0.1,
                 lambda_mse=0.5, tau=0.1, mask_rate=0.15, seed=0, backbone_seed=0,
                 max_trainable_fraction=0.05):
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.ffn_dim = ffn_dim
        self.adapter_dim = adapter_dim
        self.decoder_rank = decoder_rank
        self.depth = depth
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.lambda_ce = lambda_ce
        self.lambda_supcon = lambda_supcon
        self.lambda_align = lambda_align
        self.lambda_var = lambda_var
        self.lambda_mse = lambda_mse
        self.tau = tau
        self.mask_rate = mask_rate
        self.seed = seed
        self.backbone_seed = backbone_seed
        self.max_trainable_fraction = max_trainable_fraction

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_ce, self.lambda_supcon, self.lambda_align,
                           self.lambda_var, self.lambda_mse, self.tau, self.mask_rate)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.lr, self.beta1, self.beta2, self.eps,
                           self.seed)

    def _encode(self, Xs) -> List[Optional[np.ndarray]]:
        out = []
        for m, x in enumerate(Xs):
            if x is None:
                out.append(None)
                continue
            z = encode(self.backbones_[m], x)
            out.append((z - self.scaler_mean_[m]) / self.scaler_scale_[m])
        return out

    def fit(self, X, y=None, batches=None, present=None):
        self._fit(X, y, batches, present)
        return self

    def fit_transform(self, X, y=None, batches=None, present=None):
        """Fit, then embed the training cells without encoding them twice."""
        z_raw, batches, present = self._fit(X, y, batches, present)
        return forward(self.params_, z_raw, batches, None, present).refined

    def _fit(self, X, y, batches, present):
        Xs = _as_modalities(X)
        if any(x is None for x in Xs):
            raise ValueError("every modality needs a matrix at fit time; mark absent cells "
                             "with the present mask")
        n = Xs[0].shape[0]
        labels = np.full(n, -1, dtype=np.int64) if y is None else np.asarray(y, dtype=np.int64)
        batches = np.zeros(n, dtype=np.int64) if batches is None else np.asarray(batches, dtype=np.int64)
        if labels.shape != (n,) or batches.shape != (n,):
            raise ValueError("y and batches must have one entry per cell")

        self.backbones_: List[Optional[BackboneWeights]] = []
        for m, x in enumerate(Xs):
            spec = BackboneSpec(m, x.shape[1], self.d_model, self.n_layers, self.n_heads,
                                self.ffn_dim, self.backbone_seed)
            self.backbones_.append(init_frozen_backbone(spec))
        self.backbone_hashes_ = [b.hash for b in self.backbones_]

        raw = [encode(b, x) for b, x in zip(self.backbones_, Xs)]
        self.scaler_mean_ = [z.mean(axis=0) for z in raw]
        self.scaler_scale_ = [np.where(z.std(axis=0) > 0, z.std(axis=0), 1.0) for z in raw]
        z_raw = [(z - mu) / sd for z, mu, sd in zip(raw, self.scaler_mean_, self.scaler_scale_)]

        dims = HeadDims(d=self.d_model, n_modalities=len(Xs), n_batches=int(batches.max()) + 1,
                        n_classes=max(2, int(labels.max()) + 1), n_genes=Xs[0].shape[1],
                        adapter_dim=self.adapter_dim, decoder_rank=self.decoder_rank,
                        depth=self.depth)
        params = MoreParams.init(dims, self.seed)
        self.trainable_fraction_ = params.n_params / (params.n_params + self.n_backbone_params_)
        if self.max_trainable_fraction is not None:
            check_param_budget(params, self.n_backbone_params_, self.max_trainable_fraction)
        data = TrainData(z_raw, batches, labels, Xs[0], present)
        self.params_, self.history_ = train(params, data, self.train_config(),
                                            self.loss_weights(), self.backbones_)
        self.n_features_in_ = Xs[0].shape[1]
        return z_raw, batches, present

    @property
    def n_backbone_params_(self) -> int:
        return sum(b.n_params for b in self.backbones_ if b is not None)

    def trace(self, X, batches=None, present=None):
        check_is_fitted(self, "params_")
        Xs = _as_modalities(X)
        n = next(x.shape[0] for x in Xs if x is not None)
        batches = np.zeros(n, dtype=np.int64) if batches is None else np.asarray(batches)
        return forward(self.params_, self._encode(Xs), batches, None, present)

    def transform(self, X, batches=None, present=None):
        """Refined embeddings after the last refinement step."""
        return self.trace(X, batches, present).refined

    def predict_proba(self, X, batches=None, present=None):
        return softmax(self.trace(X, batches, present).logits)

    def predict(self, X, batches=None, present=None):
        return self.predict_proba(X, batches, present).argmax(axis=1)

    def to_sections(self) -> Dict[str, np.ndarray]:
        check_is_fitted(self, "params_")
        out = {}
        for m, b in enumerate(self.backbones_):
            out.update(b.to_sections())
            out[f"scaler.m{m}.mean"] = self.scaler_mean_[m]
            out[f"scaler.m{m}.scale"] = self.scaler_scale_[m]
        out.update(self.params_.to_sections())
        return out

    def save(self, path) -> None:
        write_params(path, self.to_sections())

    @classmethod
    def load(cls, path) -> "MoreEmbedder":
        sections = read_params(path)
        params = MoreParams.from_sections(sections)
        d = params.dims
        backbones = [BackboneWeights.from_sections(sections, m) for m in range(d.n_modalities)]
        spec = backbones[0].spec
        est = cls(d_model=spec.d_model, n_layers=spec.n_layers, n_heads=spec.n_heads,
                  ffn_dim=spec.ffn_dim, adapter_dim=d.adapter_dim, decoder_rank=d.decoder_rank,
                  depth=d.depth, backbone_seed=spec.seed)
        est.backbones_ = backbones
        est.backbone_hashes_ = [b.hash for b in backbones]
        est.scaler_mean_ = [sections[f"scaler.m{m}.mean"] for m in range(d.n_modalities)]
        est.scaler_scale_ = [sections[f"scaler.m{m}.scale"] for m in range(d.n_modalities)]
        est.params_ = params
        est.n_features_in_ = spec.n_tokens
        return est


def predict_labels(params: MoreParams, embeddings: np.ndarray):
    """Class and softmax confidence per row; ties go to the lowest class."""
    proba = softmax(classify(params, np.asarray(embeddings, dtype=np.float64)))
    labels = proba.argmax(axis=1)
    return labels, proba[np.arange(len(labels)), labels]

"""Frozen-encoder single-cell embeddings with trainable adapters, fusion and
batch refinement, plus QC, doublet scoring, a soft k-means baseline,
annotation and integration metrics."""
from importlib.resources import files

from .annotate import AnnotationResult, majority_vote, propagate_refine
from .backbone import BackboneSpec, BackboneWeights, encode, init_frozen_backbone
from .doublet import ScrubletDetector
from .embedder import MoreEmbedder
from .harmony import HarmonyLite, run_harmony
from .io import CellTable, Embeddings, ExpressionMatrix, read_mtx, write_mtx
from .metrics import ari, batch_entropy, label_transfer_accuracy, silhouette
from .model import HeadDims, MoreParams
from .prep import ExactPCA, HighlyVariableGenes

__version__ = "0.1.0"


def data_path(name: str):
    """Path to a file shipped in the package ``data`` directory."""
    return files(__name__).joinpath("data", name)


__all__ = [
    "AnnotationResult", "BackboneSpec", "BackboneWeights", "CellTable", "Embeddings",
    "ExactPCA", "ExpressionMatrix", "HarmonyLite", "HeadDims", "HighlyVariableGenes",
    "MoreEmbedder", "MoreParams", "ScrubletDetector", "ari", "batch_entropy",
    "data_path", "encode", "init_frozen_backbone", "label_transfer_accuracy",
    "majority_vote", "propagate_refine", "read_mtx", "run_harmony", "silhouette", "write_mtx",
]

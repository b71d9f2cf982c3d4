"""Concept bottleneck models trained from grounded detections, with sparse
final layers, NEC control, explanations and a random-CBL leakage check."""

__version__ = "0.1.0"

from .cbl import CblTrainConfig, ConceptBottleneck, fit_normalization, predict_concepts, train_cbl
from .dataset import AuxiliaryDataset, assemble
from .formats import ConceptVocabulary, DetectionRecord, EmbeddingMatrix, ModelBundle
from .sparse_final import RegularizationPath, SparseFinalLayer, select_for_nec, solve_path

__all__ = [
    "AuxiliaryDataset", "CblTrainConfig", "ConceptBottleneck", "ConceptVocabulary",
    "DetectionRecord", "EmbeddingMatrix", "ModelBundle", "RegularizationPath",
    "SparseFinalLayer", "assemble", "fit_normalization", "predict_concepts",
    "select_for_nec", "solve_path", "train_cbl",
]

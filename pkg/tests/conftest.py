"""Shared fixtures: an in-process planted pipeline run, cached per session."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pytest

from groundcbm.cbl import (CblTrainConfig, ConceptBottleneck, fit_normalization,
                           predict_concepts, train_cbl, train_val_split)
from groundcbm.dataset import AuxiliaryDataset, assemble
from groundcbm.sparse_final import RegularizationPath, SparseFinalLayer, solve_elastic_net, solve_path
from groundcbm.synth import GeneratedData, PlantedModel, generate, make_planted


@dataclass
class PlantedRun:
    planted: PlantedModel
    train: GeneratedData
    test: GeneratedData
    dataset: AuxiliaryDataset
    cb: ConceptBottleneck
    path: RegularizationPath
    dense: SparseFinalLayer
    X_train: np.ndarray  # normalised concept logits, CBL training split
    y_train: np.ndarray
    X_test: np.ndarray
    Z_test: np.ndarray

    @property
    def test_concepts(self) -> np.ndarray:
        """Clean test concept bits in the dataset's column order."""
        names = self.planted.concept_names
        return self.test.clean_concepts[:, [names.index(c) for c in self.dataset.concept_set]]


def run_planted_pipeline(seed: int = 0, n: int = 2000, n_test: int = 4000,
                         noise_rate: float = 0.05, augmentation_prob: float = 0.2,
                         **planted_kwargs) -> PlantedRun:
    """synth -> dataset -> CBL -> path on the CBL training split, plus a
    lambda = 0 dense layer on the same split."""
    P = make_planted(noise_rate=noise_rate, seed=seed, **planted_kwargs)
    train = generate(P, n, seed=seed * 2 + 1, id_prefix="train")
    test = generate(P, n_test, seed=seed * 2 + 2, id_prefix="test")
    ds = assemble(train.embeddings, train.detections, P.vocabulary(), 0.15, seed)
    cfg = CblTrainConfig(seed=seed, augmentation_prob=augmentation_prob)
    cb = fit_normalization(train_cbl(ds, train.crop_embeddings, cfg), ds)
    tr, va = train_val_split(ds.n, cfg)
    X = predict_concepts(cb, ds.features(), normalized=True)
    y = ds.class_labels
    path = solve_path(X[tr], y[tr], X[va], y[va], n_classes=P.C)
    dense = solve_elastic_net(X[tr], y[tr], 0.0, warm_start=path.entries[-1].layer,
                              n_classes=P.C)
    Z_test = test.embeddings.values.astype(np.float64)
    return PlantedRun(P, train, test, ds, cb, path, dense, X[tr], y[tr],
                      predict_concepts(cb, Z_test, normalized=True), Z_test)


@pytest.fixture(scope="session")
def planted_run() -> PlantedRun:
    return run_planted_pipeline()


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def small_layer(rng, C=3, k=8, density=0.5) -> SparseFinalLayer:
    W = rng.standard_normal((C, k)) * (rng.random((C, k)) < density)
    return SparseFinalLayer(W, rng.standard_normal(C))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[key])


__all__ = ["PlantedRun", "run_planted_pipeline", "small_layer"]

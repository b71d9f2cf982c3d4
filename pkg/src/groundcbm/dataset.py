"""Concept-labelled auxiliary dataset built from grounded detections."""
from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .formats import (
    ConceptVocabulary,
    DetectionRecord,
    EmbeddingMatrix,
    FormatError,
    detection_from_json,
    detection_to_json,
    file_sha256,
    read_json,
    write_json,
)

DEFAULT_THRESHOLD = 0.15


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentationRecord:
    image_id: str
    box_index: int
    concept_index: int
    crop_embedding_id: str


def crop_id(image_id: str, box_index: int) -> str:
    """Key of a crop embedding in the companion crop-embedding file."""
    return f"{image_id}#{box_index}"


@dataclass(eq=False)
class AuxiliaryDataset:
    """Aligned (embedding, concept label, class label) triples.

    ``concept_labels`` is an ``(n, k)`` uint8 array; row ``i`` is the concept
    label of ``ids[i]``.  ``records`` keeps the confidence-filtered detections
    so that crop targets can be redrawn every training epoch.
    """

    embeddings: EmbeddingMatrix
    ids: list[str]
    concept_labels: np.ndarray
    class_labels: np.ndarray
    concept_set: list[str]
    threshold: float
    records: list[DetectionRecord] = field(default_factory=list)
    augmentations: list[AugmentationRecord] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def k(self) -> int:
        return len(self.concept_set)

    def features(self) -> np.ndarray:
        """float64 embedding rows in dataset order."""
        return self.embeddings.rows(self.ids)

    def __eq__(self, other):
        if not isinstance(other, AuxiliaryDataset):
            return NotImplemented
        return (self.ids == other.ids
                and self.concept_set == other.concept_set
                and self.threshold == other.threshold
                and np.array_equal(self.concept_labels, other.concept_labels)
                and np.array_equal(self.class_labels, other.class_labels)
                and self.records == other.records
                and self.augmentations == other.augmentations)


def filter_detections(records: Sequence[DetectionRecord], T: float) -> list[DetectionRecord]:
    """Keep boxes whose confidence is strictly greater than ``T``."""
    if not 0.0 <= T <= 1.0:
        raise ValueError(f"threshold T={T} outside [0, 1]")
    return [replace(r, boxes=tuple(b for b in r.boxes if b.confidence > T))
            for r in records]


def build_concept_set(filtered: Sequence[DetectionRecord],
                      vocab: ConceptVocabulary) -> list[str]:
    """Vocabulary concepts that occur in at least one surviving box, in
    vocabulary order."""
    known = vocab.index()
    seen = set()
    for r in filtered:
        for b in r.boxes:
            if b.concept not in known:
                raise DatasetError(
                    f"concept {b.concept!r} (image {r.image_id}) not in vocabulary")
            seen.add(b.concept)
    return [s for s in vocab.concepts if s in seen]


def encode_labels(record: DetectionRecord, concept_set: Sequence[str]) -> np.ndarray:
    col = {s: j for j, s in enumerate(concept_set)}
    o = np.zeros(len(concept_set), dtype=np.uint8)
    for b in record.boxes:
        j = col.get(b.concept)
        if j is not None:
            o[j] = 1
    return o


def emit_augmentations(records: Sequence[DetectionRecord], concept_set: Sequence[str],
                       seed) -> list[AugmentationRecord]:
    """One crop-to-concept record per image with at least one box.

    The box is drawn uniformly from the image's (filtered) boxes; images
    without boxes emit nothing.  ``seed`` is anything accepted by
    :func:`numpy.random.default_rng`.
    """
    col = {s: j for j, s in enumerate(concept_set)}
    rng = np.random.default_rng(seed)
    out = []
    for r in records:
        if not r.boxes:
            continue
        j = int(rng.integers(len(r.boxes)))
        box = r.boxes[j]
        if box.concept not in col:
            raise DatasetError(f"box concept {box.concept!r} not in concept set")
        out.append(AugmentationRecord(r.image_id, j, col[box.concept],
                                      crop_id(r.image_id, j)))
    return out


def assemble(embeddings: EmbeddingMatrix, records: Sequence[DetectionRecord],
             vocab: ConceptVocabulary, T: float = DEFAULT_THRESHOLD,
             seed: int = 0) -> AuxiliaryDataset:
    """Filter, prune the concept set and label every image.

    Images left without boxes are kept with an all-zero concept label.
    """
    known = set(embeddings.ids)
    missing = [r.image_id for r in records if r.image_id not in known]
    if missing:
        raise DatasetError(
            f"{len(missing)} image ids have no embedding row, e.g. {missing[0]!r}")
    filtered = filter_detections(records, T)
    concept_set = build_concept_set(filtered, vocab)
    k = len(concept_set)
    labels = np.zeros((len(filtered), k), dtype=np.uint8)
    for i, r in enumerate(filtered):
        labels[i] = encode_labels(r, concept_set)
    return AuxiliaryDataset(
        embeddings=embeddings,
        ids=[r.image_id for r in filtered],
        concept_labels=labels,
        class_labels=np.array([r.class_label for r in filtered], dtype=np.int64),
        concept_set=concept_set,
        threshold=float(T),
        records=filtered,
        augmentations=emit_augmentations(filtered, concept_set, seed),
    )


def annotation_precision_recall(predicted, truth):
    """Per-concept precision and recall of ``predicted`` against ``truth``.

    Both are ``(n, k)`` binary arrays.  Concepts never predicted have
    undefined precision and concepts never present have undefined recall;
    those entries are NaN and excluded from the macro means.

    Returns
    -------
    dict with ``precision``, ``recall`` (length-k arrays) and
    ``mean_precision``, ``mean_recall`` (floats, NaN if nothing defined).
    """
    p = np.asarray(predicted, dtype=bool)
    t = np.asarray(truth, dtype=bool)
    if p.shape != t.shape or p.ndim != 2:
        raise DatasetError(f"shape mismatch: {p.shape} vs {t.shape}")
    tp = (p & t).sum(axis=0).astype(np.float64)
    n_pred = p.sum(axis=0)
    n_true = t.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(n_pred > 0, tp / n_pred, np.nan)
        recall = np.where(n_true > 0, tp / n_true, np.nan)

    def _mean(a):
        a = a[~np.isnan(a)]
        return float(a.mean()) if a.size else float("nan")

    return {"precision": precision, "recall": recall,
            "mean_precision": _mean(precision), "mean_recall": _mean(recall)}


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


def to_manifest(ds: AuxiliaryDataset, embeddings_path, crop_embeddings_path=None,
                relative_to=None) -> dict:
    """JSON-able description of ``ds`` referencing embedding files by hash.

    Paths are stored relative to ``relative_to`` when given, so manifests do
    not depend on where a run directory lives.
    """
    def _ref(p):
        if p is None:
            return None
        shown = os.path.relpath(p, relative_to) if relative_to is not None else str(p)
        return {"path": Path(shown).as_posix(), "sha256": file_sha256(p)}

    return {
        "kind": "auxiliary-dataset",
        "version": 1,
        "embeddings": _ref(embeddings_path),
        "crop_embeddings": _ref(crop_embeddings_path),
        "threshold": ds.threshold,
        "concept_set": list(ds.concept_set),
        "ids": list(ds.ids),
        "class_labels": [int(c) for c in ds.class_labels],
        "concept_labels": [np.flatnonzero(row).tolist() for row in ds.concept_labels],
        "records": [detection_to_json(r) for r in ds.records],
        "augmentations": [
            [a.image_id, a.box_index, a.concept_index, a.crop_embedding_id]
            for a in ds.augmentations],
    }


def write_manifest(ds: AuxiliaryDataset, path, embeddings_path,
                   crop_embeddings_path=None) -> dict:
    manifest = to_manifest(ds, embeddings_path, crop_embeddings_path,
                           relative_to=Path(path).resolve().parent)
    write_json(manifest, path)
    return manifest


def from_manifest(manifest: dict, embeddings: EmbeddingMatrix,
                  verify_hash_of=None) -> AuxiliaryDataset:
    """Rebuild a dataset from a manifest and its (already loaded) embeddings.

    If ``verify_hash_of`` is a path, its sha256 must match the manifest entry.
    """
    if manifest.get("kind") != "auxiliary-dataset":
        raise FormatError("not an auxiliary-dataset manifest")
    if verify_hash_of is not None:
        want = manifest["embeddings"]["sha256"]
        got = file_sha256(verify_hash_of)
        if want != got:
            raise DatasetError(
                f"embedding file {verify_hash_of} hash {got[:12]} != manifest {want[:12]}")
    k = len(manifest["concept_set"])
    ids = list(manifest["ids"])
    labels = np.zeros((len(ids), k), dtype=np.uint8)
    for i, on in enumerate(manifest["concept_labels"]):
        labels[i, on] = 1
    return AuxiliaryDataset(
        embeddings=embeddings,
        ids=ids,
        concept_labels=labels,
        class_labels=np.array(manifest["class_labels"], dtype=np.int64),
        concept_set=list(manifest["concept_set"]),
        threshold=float(manifest["threshold"]),
        records=[detection_from_json(r) for r in manifest["records"]],
        augmentations=[AugmentationRecord(a, int(b), int(c), d)
                       for a, b, c, d in manifest["augmentations"]],
    )


def read_manifest(path, embeddings: EmbeddingMatrix, verify_hash_of=None) -> AuxiliaryDataset:
    return from_manifest(read_json(path), embeddings, verify_hash_of)


__all__ = [
    "AugmentationRecord", "AuxiliaryDataset", "DatasetError",
    "annotation_precision_recall", "assemble", "build_concept_set", "crop_id",
    "emit_augmentations", "encode_labels", "filter_detections",
    "from_manifest", "read_manifest", "to_manifest", "write_manifest",
]

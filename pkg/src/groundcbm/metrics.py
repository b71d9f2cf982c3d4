"""Accuracy, ANEC, the top-5 pruning audit and nonzero-count histograms."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .cbl import ConceptBottleneck, predict_concepts
from .formats import write_json, write_table
from .sparse_final import RegularizationPath, SparseFinalLayer, prune_to_nec, select_for_nec

DEFAULT_LEVELS = (5, 10, 15, 20, 25, 30)


@dataclass
class AnecReport:
    per_nec: dict[int, float]
    anec5: float
    anec_avg: float
    levels: list[int]

    def __post_init__(self):
        if list(self.per_nec) != list(self.levels):
            raise ValueError("per_nec keys must follow levels")

    def to_dict(self) -> dict:
        return {"levels": list(self.levels),
                "per_nec": {str(k): v for k, v in self.per_nec.items()},
                "anec5": self.anec5, "anec_avg": self.anec_avg}


def _concepts(cb: ConceptBottleneck | None, embeddings) -> np.ndarray:
    """Normalised concept logits; ``cb=None`` means the inputs already are."""
    if cb is None:
        return np.asarray(embeddings, dtype=np.float64)
    return predict_concepts(cb, embeddings, normalized=True)


def accuracy(layer: SparseFinalLayer, cb: ConceptBottleneck | None, embeddings,
             labels) -> float:
    """Fraction of argmax-correct predictions (ties go to the lowest class)."""
    X = _concepts(cb, embeddings)
    y = np.asarray(labels)
    if X.ndim != 2 or X.shape[1] != layer.k:
        raise ValueError(f"concept dim {X.shape[-1]} != final layer input {layer.k}")
    if X.shape[0] != y.shape[0]:
        raise ValueError("embeddings and labels differ in length")
    if y.size == 0:
        return float("nan")
    return float(np.mean(layer.predict(X) == y))


def anec(path: RegularizationPath, cb: ConceptBottleneck | None, test_embeddings,
         test_labels, levels: Sequence[int] = DEFAULT_LEVELS) -> AnecReport:
    """Test accuracy of the path entry selected for each NEC level.

    ``path`` must have been solved without the test split; only the final
    accuracy evaluation here touches test labels.
    """
    levels = [int(v) for v in levels]
    if not levels:
        raise ValueError("need at least one NEC level")
    X = _concepts(cb, test_embeddings)
    per = {lv: accuracy(select_for_nec(path, lv), None, X, test_labels) for lv in levels}
    anec5 = per[5] if 5 in per else float("nan")
    return AnecReport(per, anec5, float(np.mean(list(per.values()))), levels)


def prediction_change_after_top5(layer: SparseFinalLayer, cb: ConceptBottleneck | None,
                                 embeddings, top_n: int = 5) -> float:
    """Fraction of samples whose predicted class changes once every row of
    ``layer`` keeps only its ``top_n`` largest-magnitude weights."""
    X = _concepts(cb, embeddings)
    if X.shape[0] == 0:
        return float("nan")
    pruned = prune_to_nec(layer, top_n, per_row=True)
    return float(np.mean(layer.predict(X) != pruned.predict(X)))


def nonzero_distribution(layer_or_weights) -> dict:
    """Per-class nonzero counts and their histogram.

    Returns ``{"counts": [...], "histogram": {count: n_classes}, "mean": ...}``
    with histogram bins at every integer from the minimum to the maximum count.
    """
    W = getattr(layer_or_weights, "weights", layer_or_weights)
    counts = np.count_nonzero(np.asarray(W), axis=1)
    if counts.size == 0:
        return {"counts": [], "histogram": {}, "mean": float("nan")}
    lo, hi = int(counts.min()), int(counts.max())
    tally = np.bincount(counts - lo, minlength=hi - lo + 1)
    return {"counts": counts.tolist(),
            "histogram": {lo + i: int(c) for i, c in enumerate(tally)},
            "mean": float(counts.mean())}


def write_anec_report(report: AnecReport, csv_path, json_path=None) -> None:
    rows = [(lv, report.per_nec[lv]) for lv in report.levels]
    rows += [("anec5", report.anec5), ("anec_avg", report.anec_avg)]
    write_table(csv_path, ["nec", "accuracy"], rows)
    if json_path is not None:
        write_json(report.to_dict(), json_path)


def write_nonzero_histogram(dist: dict, csv_path) -> None:
    write_table(csv_path, ["nonzeros", "classes"], sorted(dist["histogram"].items()))


__all__ = [
    "AnecReport", "DEFAULT_LEVELS", "accuracy", "anec", "nonzero_distribution",
    "prediction_change_after_top5", "write_anec_report", "write_nonzero_histogram",
]

"""Per-sample decision explanations from concept contributions."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .cbl import ConceptBottleneck, predict_concepts
from .formats import ensure_dir, write_json, write_table
from .sparse_final import SparseFinalLayer


@dataclass(frozen=True)
class ExplanationEntry:
    concept_index: int
    label: str  # concept name, or "NOT name" for a negative concept logit
    contribution: float
    concept_value: float

    @property
    def negative(self) -> bool:
        return self.concept_value < 0


@dataclass
class Explanation:
    sample_id: str
    predicted_class: int
    entries: list[ExplanationEntry]
    remainder: float
    bias: float
    class_logit: float = field(default=float("nan"))

    def reconstruct(self) -> float:
        """Entries plus remainder plus bias; equals the class logit."""
        return float(sum(e.contribution for e in self.entries) + self.remainder + self.bias)

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "predicted_class": self.predicted_class,
            "class_logit": self.class_logit,
            "entries": [{"concept_index": e.concept_index, "label": e.label,
                         "contribution": e.contribution, "concept_value": e.concept_value}
                        for e in self.entries],
            "remainder": self.remainder,
            "bias": self.bias,
        }


def _concept_values(cb: ConceptBottleneck, z, normalized: bool) -> np.ndarray:
    g = predict_concepts(cb, z, normalized=normalized)
    if g.ndim != 1:
        raise ValueError("expected a single embedding vector")
    return g


def contributions(cb: ConceptBottleneck, layer: SparseFinalLayer, z, class_j: int,
                  normalized: bool = True) -> np.ndarray:
    """``g_i(z) * W_F[j, i]`` for every concept ``i``.

    ``g`` is the normalised concept logit by default, which is what the
    final layer consumes; ``normalized=False`` uses raw logits instead.
    """
    if not 0 <= class_j < layer.n_classes:
        raise IndexError(f"class {class_j} out of range [0, {layer.n_classes})")
    g = _concept_values(cb, z, normalized)
    if g.shape[0] != layer.k:
        raise ValueError(f"CBL has {g.shape[0]} concepts, final layer expects {layer.k}")
    return g * layer.weights[class_j]


def _render(name: str, value: float) -> str:
    return f"NOT {name}" if value < 0 else name


def top_contributions(cb: ConceptBottleneck, layer: SparseFinalLayer, z,
                      concept_names: Sequence[str], top_n: int = 5,
                      sample_id: str = "", normalized: bool = True) -> Explanation:
    """Top-``top_n`` contributions towards the predicted class.

    The ``top_n`` concepts with the largest ``|contribution|`` are kept
    (ties by concept index), then listed by descending contribution.  The
    remainder sums the other concepts.  With at most ``top_n`` nonzero
    weights in the row every omitted term is an exact zero, so the remainder
    is exactly zero.
    """
    if top_n < 1:
        raise ValueError("top_n must be >= 1")
    g = _concept_values(cb, z, normalized)
    if len(concept_names) != g.shape[0]:
        raise ValueError("concept_names length differs from the number of concepts")
    logits = layer.weights @ g + layer.bias
    j = int(np.argmax(logits))
    c = g * layer.weights[j]
    chosen = np.argsort(-np.abs(c), kind="stable")[:top_n]
    chosen = chosen[np.argsort(-c[chosen], kind="stable")]
    mask = np.ones(c.shape[0], dtype=bool)
    mask[chosen] = False
    entries = [ExplanationEntry(int(i), _render(concept_names[i], g[i]), float(c[i]), float(g[i]))
               for i in chosen]
    return Explanation(sample_id, j, entries, float(c[mask].sum()), float(layer.bias[j]),
                       float(logits[j]))


def explain_batch(cb: ConceptBottleneck, layer: SparseFinalLayer, embeddings,
                  ids: Sequence[str], concept_names: Sequence[str], top_n: int = 5,
                  normalized: bool = True) -> list[Explanation]:
    Z = np.asarray(embeddings, dtype=np.float64)
    if Z.shape[0] != len(ids):
        raise ValueError("ids and embeddings differ in length")
    return [top_contributions(cb, layer, Z[i], concept_names, top_n, ids[i], normalized)
            for i in range(Z.shape[0])]


def negative_reasoning_rate(explanations: Sequence[Explanation]) -> float:
    """Share of explanation entries that cite a concept through its absence."""
    flags = [e.negative for ex in explanations for e in ex.entries]
    return float(np.mean(flags)) if flags else float("nan")


def write_explanations(explanations: Sequence[Explanation], out_dir,
                       summary_csv: Optional[str] = "summary.csv") -> dict:
    """One JSON file per sample plus a corpus CSV of all entries."""
    out = ensure_dir(out_dir)
    rows = []
    for n, ex in enumerate(explanations):
        write_json(ex.to_dict(), out / f"sample_{n:06d}.json")
        for rank, e in enumerate(ex.entries):
            rows.append((ex.sample_id, ex.predicted_class, rank, e.concept_index, e.label,
                         e.contribution, int(e.negative)))
    if summary_csv:
        write_table(out / summary_csv, ["sample_id", "predicted_class", "rank",
                                        "concept_index", "label", "contribution",
                                        "negative"], rows)
    summary = {"samples": len(explanations), "entries": len(rows),
               "negative_reasoning_rate": negative_reasoning_rate(explanations)}
    write_json(summary, out / "corpus.json")
    return summary


__all__ = [
    "Explanation", "ExplanationEntry", "contributions", "explain_batch",
    "negative_reasoning_rate", "top_contributions", "write_explanations",
]

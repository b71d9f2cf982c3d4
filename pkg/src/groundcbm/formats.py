"""On-disk artifacts: embeddings, detections, vocabularies, model bundles,
dataset manifests and CSV reports.

Binary layouts (embeddings and model bundles) share one scheme::

    magic (4 bytes) | version (1 byte) | JSON header line terminated by b"\\n" |
    row-major little-endian float32 payload

Embedding files use the magic ``b"VLGC"``; the header carries ``n``, ``d`` and
the row ids inline (``"ids"``).  Model bundles use ``b"GCBM"``; the header
carries free-form metadata plus an ordered list of ``{"name", "shape"}``
array descriptors whose payloads follow back to back.

Detections and vocabularies are newline-delimited JSON, one record per line,
so that errors can be reported with a line number.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

EMBEDDING_MAGIC = b"VLGC"
BUNDLE_MAGIC = b"GCBM"
FORMAT_VERSION = 1

_F32 = np.dtype("<f4")


class FormatError(ValueError):
    """Base class for every reader/writer error."""


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class DimensionMismatchError(FormatError):
    pass


class DuplicateIdError(FormatError):
    pass


class MalformedRecordError(FormatError):
    """A line that cannot be parsed; ``line`` is 1-based."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class InvariantError(FormatError):
    """A parsed record that violates a type invariant; names the field."""

    def __init__(self, message: str, field: str, line: int | None = None):
        self.field = field
        self.line = line
        self.detail = message
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(f"{prefix}{field}: {message}")


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class EmbeddingMatrix:
    """Row-identified float32 matrix of backbone embeddings."""

    ids: list[str]
    values: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise DimensionMismatchError(
                f"values must be 2-D, got shape {self.values.shape}")
        self.ids = [str(i) for i in self.ids]
        if len(self.ids) != self.values.shape[0]:
            raise DimensionMismatchError(
                f"{len(self.ids)} ids for {self.values.shape[0]} rows")
        if len(set(self.ids)) != len(self.ids):
            raise DuplicateIdError(_first_duplicate(self.ids))
        if not np.all(np.isfinite(self.values)):
            raise InvariantError("contains NaN or Inf", field="values")
        self._index = None

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def index_of(self, image_id: str) -> int:
        if self._index is None:
            self._index = {k: i for i, k in enumerate(self.ids)}
        return self._index[image_id]

    def rows(self, ids: Iterable[str]) -> np.ndarray:
        """float64 rows for ``ids`` in the given order."""
        idx = [self.index_of(i) for i in ids]
        return self.values[idx].astype(np.float64)

    def __eq__(self, other):
        if not isinstance(other, EmbeddingMatrix):
            return NotImplemented
        return (self.ids == other.ids
                and self.values.shape == other.values.shape
                and self.values.tobytes() == other.values.tobytes())


@dataclass(frozen=True)
class BoundingBox:
    coords: tuple[float, float, float, float]
    confidence: float
    concept: str

    def __post_init__(self):
        x0, y0, x1, y1 = self.coords
        if not x0 < x1:
            raise InvariantError(f"x_min {x0} >= x_max {x1}", field="coords")
        if not y0 < y1:
            raise InvariantError(f"y_min {y0} >= y_max {y1}", field="coords")
        if not 0.0 <= self.confidence <= 1.0:
            raise InvariantError(
                f"{self.confidence} outside [0, 1]", field="confidence")
        if not self.concept:
            raise InvariantError("empty concept", field="concept")


@dataclass(frozen=True)
class DetectionRecord:
    image_id: str
    class_label: int
    boxes: tuple[BoundingBox, ...] = ()

    def __post_init__(self):
        if self.class_label < 0:
            raise InvariantError(
                f"negative class label {self.class_label}", field="class_label")


@dataclass
class ConceptVocabulary:
    concepts: list[str]
    class_candidates: dict[int, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.concepts)) != len(self.concepts):
            raise DuplicateIdError(
                f"duplicate concept {_first_duplicate(self.concepts)!r}")
        k = len(self.concepts)
        for c, idx in self.class_candidates.items():
            for j in idx:
                if not 0 <= j < k:
                    raise InvariantError(
                        f"class {c} candidate index {j} out of range [0, {k})",
                        field="class_candidates")

    def index(self) -> dict[str, int]:
        return {s: j for j, s in enumerate(self.concepts)}


@dataclass(eq=False)
class ModelBundle:
    """Metadata header plus named float32 arrays."""

    metadata: dict[str, Any]
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, ModelBundle):
            return NotImplemented
        if self.metadata != other.metadata:
            return False
        if list(self.arrays) != list(other.arrays):
            return False
        for name, a in self.arrays.items():
            b = other.arrays[name]
            a32 = np.asarray(a, dtype=_F32)
            b32 = np.asarray(b, dtype=_F32)
            if a32.shape != b32.shape or a32.tobytes() != b32.tobytes():
                return False
        return True


def _first_duplicate(items):
    seen = set()
    for s in items:
        if s in seen:
            return s
        seen.add(s)
    return None


# ---------------------------------------------------------------------------
# Binary helpers
# ---------------------------------------------------------------------------


def _write_binary(path, magic: bytes, header: dict, payloads: Sequence[np.ndarray]):
    line = json.dumps(header, sort_keys=True, separators=(",", ":"))
    if "\n" in line:
        raise FormatError("header must serialise to a single line")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(bytes([FORMAT_VERSION]))
        fh.write(line.encode("utf-8"))
        fh.write(b"\n")
        for a in payloads:
            fh.write(np.ascontiguousarray(a, dtype=_F32).tobytes())


def _read_binary(path, magic: bytes) -> tuple[dict, bytes]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != magic:
        raise BadMagicError(f"{path}: expected magic {magic!r}, got {data[:4]!r}")
    if len(data) < 5:
        raise TruncatedPayloadError(f"{path}: missing version byte")
    if data[4] != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{path}: version {data[4]}")
    end = data.find(b"\n", 5)
    if end < 0:
        raise TruncatedPayloadError(f"{path}: unterminated header")
    try:
        header = json.loads(data[5:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedRecordError(f"{path}: bad header ({exc})") from exc
    if not isinstance(header, dict):
        raise MalformedRecordError(f"{path}: header is not an object")
    return header, data[end + 1:]


def _take_floats(payload: bytes, offset: int, shape, path) -> tuple[np.ndarray, int]:
    count = int(np.prod(shape, dtype=np.int64))
    nbytes = 4 * count
    if offset + nbytes > len(payload):
        raise TruncatedPayloadError(
            f"{path}: need {nbytes} bytes at offset {offset}, "
            f"{len(payload) - offset} available")
    a = np.frombuffer(payload, dtype=_F32, count=count, offset=offset)
    return a.reshape(shape).astype(np.float32), offset + nbytes


# ---------------------------------------------------------------------------
# Embeddings
# ---------------------------------------------------------------------------


def write_embeddings(m: EmbeddingMatrix, path) -> None:
    header = {"n": m.n, "d": m.d, "ids": list(m.ids)}
    _write_binary(path, EMBEDDING_MAGIC, header, [m.values])


def read_embeddings(path) -> EmbeddingMatrix:
    """Read an embedding file.

    Raises
    ------
    BadMagicError, TruncatedPayloadError, DimensionMismatchError,
    DuplicateIdError
    """
    header, payload = _read_binary(path, EMBEDDING_MAGIC)
    try:
        n, d, ids = int(header["n"]), int(header["d"]), list(header["ids"])
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedRecordError(f"{path}: header missing n/d/ids") from exc
    if n < 0 or d < 0:
        raise DimensionMismatchError(f"{path}: negative dims n={n} d={d}")
    if len(ids) != n:
        raise DimensionMismatchError(f"{path}: header n={n} but {len(ids)} ids")
    if len(set(ids)) != len(ids):
        raise DuplicateIdError(f"{path}: duplicate id {_first_duplicate(ids)!r}")
    values, used = _take_floats(payload, 0, (n, d), path)
    if used != len(payload):
        raise DimensionMismatchError(
            f"{path}: {len(payload) - used} trailing payload bytes for n={n} d={d}")
    if not np.all(np.isfinite(values)):
        raise InvariantError("contains NaN or Inf", field="values")
    return EmbeddingMatrix(ids=ids, values=values)


# ---------------------------------------------------------------------------
# Detections
# ---------------------------------------------------------------------------


def _box_to_json(b: BoundingBox) -> dict:
    return {"coords": [float(c) for c in b.coords],
            "confidence": float(b.confidence),
            "concept": b.concept}


def detection_to_json(r: DetectionRecord) -> dict:
    return {"image_id": r.image_id, "class_label": int(r.class_label),
            "boxes": [_box_to_json(b) for b in r.boxes]}


def detection_from_json(obj: dict, line: int | None = None) -> DetectionRecord:
    try:
        image_id = obj["image_id"]
        class_label = obj["class_label"]
        raw_boxes = obj["boxes"]
    except (KeyError, TypeError) as exc:
        raise MalformedRecordError(f"missing key {exc}", line) from exc
    if not isinstance(image_id, str):
        raise InvariantError("must be a string", field="image_id", line=line)
    if not isinstance(class_label, int) or isinstance(class_label, bool):
        raise InvariantError("must be an integer", field="class_label", line=line)
    boxes = []
    for b in raw_boxes:
        try:
            coords = tuple(float(c) for c in b["coords"])
            conf = float(b["confidence"])
            concept = b["concept"]
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedRecordError(f"bad box {b!r}", line) from exc
        if len(coords) != 4:
            raise InvariantError("need 4 coordinates", field="coords", line=line)
        try:
            boxes.append(BoundingBox(coords, conf, concept))
        except InvariantError as exc:
            raise InvariantError(exc.detail, field=exc.field,
                                 line=line) from None
    try:
        return DetectionRecord(image_id, class_label, tuple(boxes))
    except InvariantError as exc:
        raise InvariantError(exc.detail, field=exc.field,
                             line=line) from None


def write_detections(records: Iterable[DetectionRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(detection_to_json(r), separators=(",", ":")))
            fh.write("\n")


def read_detections(path) -> list[DetectionRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecordError(str(exc), lineno) from exc
            if not isinstance(obj, dict):
                raise MalformedRecordError("record is not an object", lineno)
            out.append(detection_from_json(obj, lineno))
    return out


# ---------------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------------


def write_vocabulary(vocab: ConceptVocabulary, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in vocab.concepts:
            fh.write(json.dumps({"type": "concept", "name": s}) + "\n")
        for c in sorted(vocab.class_candidates):
            rec = {"type": "class", "class": int(c),
                   "candidates": [int(j) for j in vocab.class_candidates[c]]}
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_vocabulary(path) -> ConceptVocabulary:
    concepts: list[str] = []
    candidates: dict[int, list[int]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                kind = obj["type"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise MalformedRecordError(str(exc), lineno) from exc
            if kind == "concept":
                name = obj.get("name")
                if not isinstance(name, str) or not name:
                    raise InvariantError("empty or non-string", field="name",
                                         line=lineno)
                if name in concepts:
                    raise DuplicateIdError(f"line {lineno}: duplicate concept {name!r}")
                concepts.append(name)
            elif kind == "class":
                try:
                    c = int(obj["class"])
                    idx = [int(j) for j in obj["candidates"]]
                except (KeyError, TypeError, ValueError) as exc:
                    raise MalformedRecordError(str(exc), lineno) from exc
                if c in candidates:
                    raise MalformedRecordError(f"class {c} listed twice", lineno)
                candidates[c] = idx
            else:
                raise MalformedRecordError(f"unknown record type {kind!r}", lineno)
    return ConceptVocabulary(concepts, candidates)


# ---------------------------------------------------------------------------
# Model bundles
# ---------------------------------------------------------------------------


def write_bundle(bundle: ModelBundle, path) -> None:
    specs = [{"name": name, "shape": list(np.shape(a))}
             for name, a in bundle.arrays.items()]
    header = {"metadata": bundle.metadata, "arrays": specs}
    _write_binary(path, BUNDLE_MAGIC, header, list(bundle.arrays.values()))


def read_bundle(path) -> ModelBundle:
    header, payload = _read_binary(path, BUNDLE_MAGIC)
    try:
        metadata = header["metadata"]
        specs = header["arrays"]
    except KeyError as exc:
        raise MalformedRecordError(f"{path}: header missing {exc}") from exc
    arrays = {}
    offset = 0
    for spec in specs:
        shape = tuple(int(s) for s in spec["shape"])
        arrays[spec["name"]], offset = _take_floats(payload, offset, shape, path)
    if offset != len(payload):
        raise DimensionMismatchError(
            f"{path}: {len(payload) - offset} trailing payload bytes")
    _check_bundle_dims(metadata, arrays, path)
    return ModelBundle(metadata, arrays)


def _check_bundle_dims(metadata, arrays, path):
    dims = metadata.get("dims", {})
    expected = {
        "W_c": ("k", "d"), "b_c": ("k",), "norm_mean": ("k",),
        "norm_std": ("k",), "W_F": ("C", "k"), "b_F": ("C",),
    }
    for name, keys in expected.items():
        if name not in arrays or not all(key in dims for key in keys):
            continue
        want = tuple(int(dims[key]) for key in keys)
        if arrays[name].shape != want:
            raise DimensionMismatchError(
                f"{path}: {name} has shape {arrays[name].shape}, header declares {want}")


# ---------------------------------------------------------------------------
# JSON manifests and CSV reports
# ---------------------------------------------------------------------------


def write_json(obj: Any, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1, allow_nan=False)
        fh.write("\n")


def read_json(path) -> Any:
    with open(path, encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise MalformedRecordError(str(exc), exc.lineno) from exc


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if not math.isfinite(v):
            raise FormatError(f"non-finite value {v} in report")
        return repr(v)
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def _parse(s: str):
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


def write_table(path, fieldnames: Sequence[str], rows: Iterable[Sequence]) -> None:
    """CSV with shortest round-tripping float representation."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(fieldnames))
        for row in rows:
            if len(row) != len(fieldnames):
                raise DimensionMismatchError(
                    f"row has {len(row)} fields, expected {len(fieldnames)}")
            w.writerow([_fmt(v) for v in row])


def read_table(path) -> tuple[list[str], list[tuple]]:
    with open(path, encoding="utf-8", newline="") as fh:
        r = csv.reader(fh)
        try:
            fieldnames = next(r)
        except StopIteration:
            raise MalformedRecordError(f"{path}: empty table") from None
        rows = []
        for lineno, row in enumerate(r, start=2):
            if len(row) != len(fieldnames):
                raise MalformedRecordError(
                    f"{len(row)} fields, expected {len(fieldnames)}", lineno)
            rows.append(tuple(_parse(s) for s in row))
    return fieldnames, rows


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p

import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from groundcbm import formats as F

from _fixtures import check_corrupt, random_embeddings, roundtrip_all


def test_embeddings_known_values(tmp_path):
    m = F.EmbeddingMatrix(["a", "b"], np.array([[1, 2, 3], [4, 5, 6]], dtype=np.float32))
    F.write_embeddings(m, tmp_path / "e.bin")
    back = F.read_embeddings(tmp_path / "e.bin")
    assert back == m
    assert back.ids == ["a", "b"]
    np.testing.assert_array_equal(back.values, [[1, 2, 3], [4, 5, 6]])
    raw = (tmp_path / "e.bin").read_bytes()
    assert raw[:4] == b"VLGC" and raw[4] == 1
    assert raw.endswith(np.array([1, 2, 3, 4, 5, 6], dtype="<f4").tobytes())


def test_embeddings_empty(tmp_path):
    m = F.EmbeddingMatrix([], np.zeros((0, 3), dtype=np.float32))
    F.write_embeddings(m, tmp_path / "e.bin")
    back = F.read_embeddings(tmp_path / "e.bin")
    assert back.n == 0 and back.d == 3


def test_embeddings_unwritable(tmp_path):
    m = random_embeddings(np.random.default_rng(0))
    with pytest.raises(OSError):
        F.write_embeddings(m, tmp_path / "missing_dir" / "e.bin")


def test_embeddings_reject_bad_values():
    with pytest.raises(F.DuplicateIdError):
        F.EmbeddingMatrix(["a", "a"], np.zeros((2, 2)))
    with pytest.raises(F.DimensionMismatchError):
        F.EmbeddingMatrix(["a"], np.zeros((2, 2)))
    with pytest.raises(F.InvariantError):
        F.EmbeddingMatrix(["a"], np.array([[np.nan, 1.0]]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 6), st.integers(0, 9), st.integers(0, 2 ** 32 - 1))
def test_embeddings_roundtrip_property(tmp_path_factory, n, d, seed):
    m = random_embeddings(np.random.default_rng(seed), n=n, d=d)
    p = tmp_path_factory.mktemp("emb") / "e.bin"
    F.write_embeddings(m, p)
    assert F.read_embeddings(p) == m


@pytest.mark.parametrize("seed", range(5))
def test_all_formats_roundtrip(tmp_path, seed):
    ok = roundtrip_all(np.random.default_rng(seed), tmp_path)
    assert all(ok.values()), {k: v for k, v in ok.items() if not v}


def test_corrupt_files_raise_designated_errors(tmp_path):
    ok = check_corrupt(tmp_path)
    assert all(ok.values()), [k for k, v in ok.items() if not v]


def test_error_classes_are_distinct():
    classes = [F.BadMagicError, F.TruncatedPayloadError, F.DimensionMismatchError,
               F.DuplicateIdError, F.UnsupportedVersionError]
    for a in classes:
        assert issubclass(a, F.FormatError)
        for b in classes:
            assert a is b or not issubclass(a, b)


def test_detection_errors_report_line_and_field(tmp_path):
    p = tmp_path / "d.jsonl"
    good = '{"image_id": "x", "class_label": 0, "boxes": []}'
    bad = ('{"image_id": "y", "class_label": 1, "boxes": '
           '[{"coords": [0, 0, 1, 1], "confidence": 1.3, "concept": "a"}]}')
    p.write_text(good + "\n" + bad + "\n")
    with pytest.raises(F.InvariantError) as exc:
        F.read_detections(p)
    assert exc.value.field == "confidence"
    assert exc.value.line == 2
    assert "confidence" in str(exc.value)
    p.write_text(good + "\n\n{oops\n")
    with pytest.raises(F.MalformedRecordError) as exc:
        F.read_detections(p)
    assert exc.value.line == 3


def test_detections_two_boxes(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text('{"image_id": "x", "class_label": 3, "boxes": ['
                 '{"coords": [0, 0, 1, 1], "confidence": 0.5, "concept": "a"},'
                 '{"coords": [1, 1, 2, 3], "confidence": 0.2, "concept": "b"}]}\n')
    (r,) = F.read_detections(p)
    assert len(r.boxes) == 2 and r.class_label == 3
    assert [b.concept for b in r.boxes] == ["a", "b"]


def test_detections_large_file_order(tmp_path):
    recs = [F.DetectionRecord(f"img{i:05d}", i % 7,
                              (F.BoundingBox((0.0, 0.0, 1.0 + i, 2.0), (i % 100) / 100, "c"),))
            for i in range(10_000)]
    F.write_detections(recs, tmp_path / "d.jsonl")
    back = F.read_detections(tmp_path / "d.jsonl")
    assert len(back) == 10_000
    assert back == recs


def test_bundle_float32_storage(tmp_path):
    b = F.ModelBundle({"dims": {"k": 1, "d": 2}}, {"W_c": np.array([[0.1, 1 / 3]])})
    F.write_bundle(b, tmp_path / "m")
    back = F.read_bundle(tmp_path / "m")
    assert back.arrays["W_c"].dtype == np.float32
    np.testing.assert_array_equal(back.arrays["W_c"], np.float32([[0.1, 1 / 3]]))
    assert back == b


def test_table_rejects_non_finite(tmp_path):
    with pytest.raises(F.FormatError):
        F.write_table(tmp_path / "t.csv", ["x"], [(float("nan"),)])
    with pytest.raises(F.DimensionMismatchError):
        F.write_table(tmp_path / "t.csv", ["x", "y"], [(1,)])


def test_file_sha256_and_ensure_dir(tmp_path):
    d = F.ensure_dir(tmp_path / "a" / "b")
    assert d.is_dir()
    (d / "f").write_bytes(b"abc")
    assert F.file_sha256(d / "f") == (
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad")
    assert os.path.samefile(F.ensure_dir(d), d)

"""Randomised on-disk fixtures and corrupt-file builders for the format tests."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from groundcbm import formats as F
from groundcbm.dataset import read_manifest, write_manifest, assemble


def random_embeddings(rng, n=5, d=7) -> F.EmbeddingMatrix:
    # raw float32 bit patterns, so every finite value is reachable
    bits = rng.integers(0, 2 ** 32, size=(n, d), dtype=np.uint64).astype(np.uint32)
    vals = bits.view(np.float32)
    vals[~np.isfinite(vals)] = 0.0
    return F.EmbeddingMatrix([f"id{i}-{rng.integers(1 << 30)}" for i in range(n)], vals)


def random_detections(rng, n=20, concepts=("a", "b", "c", "d")) -> list[F.DetectionRecord]:
    out = []
    for i in range(n):
        boxes = []
        for _ in range(int(rng.integers(0, 4))):
            x0, y0 = rng.uniform(-50, 500, size=2)
            w, h = rng.uniform(1e-3, 300, size=2)
            boxes.append(F.BoundingBox((float(x0), float(y0), float(x0 + w), float(y0 + h)),
                                       float(rng.random()), str(rng.choice(concepts))))
        out.append(F.DetectionRecord(f"img{i}", int(rng.integers(0, 10)), tuple(boxes)))
    return out


def random_vocabulary(rng, k=12, C=4) -> F.ConceptVocabulary:
    names = [f"concept {j} é" for j in range(k)]
    cand = {c: sorted(rng.choice(k, size=3, replace=False).tolist()) for c in range(C)}
    return F.ConceptVocabulary(names, cand)


def random_bundle(rng) -> F.ModelBundle:
    k, d, C = 6, 9, 3
    meta = {"dims": {"k": k, "d": d, "C": C}, "lambda": float(rng.random()),
            "nested": {"list": [1, 2.5, None], "flag": True}}
    arrays = {"W_c": rng.standard_normal((k, d)).astype(np.float32),
              "b_c": rng.standard_normal(k).astype(np.float32),
              "W_F": rng.standard_normal((C, k)).astype(np.float32),
              "b_F": rng.standard_normal(C).astype(np.float32),
              "empty": np.zeros((0, 4), dtype=np.float32)}
    return F.ModelBundle(meta, arrays)


def random_table(rng, rows=15):
    fields = ["k", "value", "name"]
    data = []
    for i in range(rows):
        scale = 10.0 ** int(rng.integers(-20, 20))
        data.append((int(rng.integers(-100, 100)), float(rng.standard_normal() * scale),
                     f"row_{i}"))
    return fields, data


def roundtrip_all(rng, tmp: Path) -> dict[str, bool]:
    """read(write(x)) == x for every format on one randomised fixture."""
    tmp = Path(tmp)
    ok = {}
    for n in (0, 1, 5):
        m = random_embeddings(rng, n=n, d=7)
        F.write_embeddings(m, tmp / f"e{n}.bin")
        ok[f"embeddings n={n}"] = F.read_embeddings(tmp / f"e{n}.bin") == m
    recs = random_detections(rng)
    F.write_detections(recs, tmp / "det.jsonl")
    ok["detections"] = F.read_detections(tmp / "det.jsonl") == recs
    vocab = random_vocabulary(rng)
    F.write_vocabulary(vocab, tmp / "vocab.jsonl")
    back = F.read_vocabulary(tmp / "vocab.jsonl")
    ok["vocabulary"] = (back.concepts == vocab.concepts
                        and back.class_candidates == vocab.class_candidates)
    b = random_bundle(rng)
    F.write_bundle(b, tmp / "m.bundle")
    ok["bundle"] = F.read_bundle(tmp / "m.bundle") == b
    fields, rows = random_table(rng)
    F.write_table(tmp / "t.csv", fields, rows)
    ok["report csv"] = F.read_table(tmp / "t.csv") == (fields, rows)
    report = {"per_nec": {"5": float(rng.random())}, "levels": [5, 10], "tag": "x"}
    F.write_json(report, tmp / "r.json")
    ok["report json"] = F.read_json(tmp / "r.json") == report
    # dataset manifest on top of the embedding file
    emb = random_embeddings(rng, n=4, d=3)
    F.write_embeddings(emb, tmp / "m_emb.bin")
    recs = [F.DetectionRecord(i, c, (F.BoundingBox((0, 0, 1, 1), 0.9, "a"),))
            for i, c in zip(emb.ids, [0, 1, 0, 1])]
    ds = assemble(emb, recs, F.ConceptVocabulary(["a", "b"]), seed=1)
    write_manifest(ds, tmp / "manifest.json", tmp / "m_emb.bin")
    ok["manifest"] = read_manifest(tmp / "manifest.json", emb, tmp / "m_emb.bin") == ds
    return ok


def _emb_bytes(header: dict, payload: bytes, magic=b"VLGC", version=1) -> bytes:
    return magic + bytes([version]) + json.dumps(header).encode() + b"\n" + payload


def corrupt_cases(tmp: Path):
    """``(name, reader, path, expected_error)`` for every corrupt fixture."""
    tmp = Path(tmp)
    cases = []

    def add(name, reader, content, err, text=False):
        p = tmp / f"corrupt_{len(cases)}"
        if text:
            p.write_text(content, encoding="utf-8")
        else:
            p.write_bytes(content)
        cases.append((name, reader, p, err))

    row = np.arange(1, 4, dtype="<f4").tobytes()
    hdr = {"n": 2, "d": 4, "ids": ["a", "b"]}
    add("embeddings: bad magic", F.read_embeddings,
        _emb_bytes(hdr, row * 2, magic=b"XXXX"), F.BadMagicError)
    add("embeddings: unsupported version", F.read_embeddings,
        _emb_bytes(hdr, row * 2, version=9), F.UnsupportedVersionError)
    add("embeddings: d=4 header, 3 floats per row", F.read_embeddings,
        _emb_bytes(hdr, row * 2), F.TruncatedPayloadError)
    add("embeddings: trailing bytes", F.read_embeddings,
        _emb_bytes({"n": 1, "d": 3, "ids": ["a"]}, row * 2), F.DimensionMismatchError)
    add("embeddings: id count differs from n", F.read_embeddings,
        _emb_bytes({"n": 2, "d": 3, "ids": ["a"]}, row * 2), F.DimensionMismatchError)
    add("embeddings: duplicate ids", F.read_embeddings,
        _emb_bytes({"n": 2, "d": 3, "ids": ["a", "a"]}, row * 2), F.DuplicateIdError)
    add("embeddings: unterminated header", F.read_embeddings,
        b"VLGC\x01{\"n\": 1", F.TruncatedPayloadError)
    good = json.dumps({"image_id": "x", "class_label": 0,
                       "boxes": [{"coords": [0, 0, 1, 1], "confidence": 0.5, "concept": "a"}]})
    add("detections: malformed json", F.read_detections,
        good + "\n{not json\n", F.MalformedRecordError, text=True)
    add("detections: confidence 1.3", F.read_detections,
        good.replace("0.5", "1.3") + "\n", F.InvariantError, text=True)
    add("detections: inverted box", F.read_detections,
        good.replace("[0, 0, 1, 1]", "[2, 0, 1, 1]") + "\n", F.InvariantError, text=True)
    add("detections: missing key", F.read_detections,
        '{"image_id": "x", "boxes": []}\n', F.MalformedRecordError, text=True)
    add("vocabulary: duplicate concept", F.read_vocabulary,
        '{"type": "concept", "name": "a"}\n{"type": "concept", "name": "a"}\n',
        F.DuplicateIdError, text=True)
    add("vocabulary: candidate out of range", F.read_vocabulary,
        '{"type": "concept", "name": "a"}\n{"type": "class", "class": 0, "candidates": [3]}\n',
        F.InvariantError, text=True)
    add("vocabulary: unknown record type", F.read_vocabulary,
        '{"type": "colour", "name": "a"}\n', F.MalformedRecordError, text=True)
    bhdr = {"metadata": {"dims": {"k": 2, "d": 2}}, "arrays": [{"name": "W_c", "shape": [2, 2]}]}
    add("bundle: bad magic", F.read_bundle,
        _emb_bytes(bhdr, row, magic=b"VLGC"), F.BadMagicError)
    add("bundle: truncated payload", F.read_bundle,
        _emb_bytes(bhdr, row, magic=b"GCBM"), F.TruncatedPayloadError)
    bhdr_bad = {"metadata": {"dims": {"k": 3, "d": 2}},
                "arrays": [{"name": "W_c", "shape": [2, 2]}]}
    add("bundle: dims disagree with header", F.read_bundle,
        _emb_bytes(bhdr_bad, np.zeros(4, "<f4").tobytes(), magic=b"GCBM"),
        F.DimensionMismatchError)
    add("report csv: ragged row", F.read_table, "a,b\n1,2\n3\n", F.MalformedRecordError,
        text=True)
    add("report json: malformed", F.read_json, '{"a": 1,,}', F.MalformedRecordError, text=True)
    return cases


def check_corrupt(tmp: Path) -> dict[str, bool]:
    out = {}
    for name, reader, path, err in corrupt_cases(tmp):
        try:
            reader(path)
        except err:
            out[name] = True
        except Exception:  # wrong error class
            out[name] = False
        else:
            out[name] = False
    return out


def oracle_instances(count=20, seed=7):
    """Small random elastic-net problems: n <= 40, k <= 10, C <= 3."""
    from groundcbm.sparse_final import compute_lambda_max
    out = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        n, k, C = int(rng.integers(15, 41)), int(rng.integers(2, 11)), int(rng.integers(2, 4))
        X = rng.standard_normal((n, k))
        y = np.arange(n) % C
        rng.shuffle(y)
        alpha = float(rng.choice([0.5, 0.9, 0.99, 1.0]))
        lam = compute_lambda_max(X, y, alpha) * float(rng.uniform(0.05, 0.6))
        out.append((X, y, lam, alpha))
    return out


def oracle_comparison(tol=1e-9):
    """Per instance: relative objective gap to the coordinate-descent oracle,
    whether the supports agree, and the solver's KKT residual."""
    from groundcbm.sparse_final import objective, solve_elastic_net
    from groundcbm.synth import coordinate_descent_oracle
    rows = []
    for X, y, lam, alpha in oracle_instances():
        fista = solve_elastic_net(X, y, lam, alpha, tol=tol)
        cd = coordinate_descent_oracle(X, y, lam, alpha, tol=1e-13)
        f_obj, o_obj = objective(fista, X, y, lam, alpha), objective(cd, X, y, lam, alpha)
        rows.append((abs(f_obj - o_obj) / abs(o_obj),
                     bool(np.array_equal(fista.weights != 0, cd.weights != 0)),
                     fista.kkt_residual))
    return rows


PIPELINE = ("build-dataset", "train-cbl", "train-final", "eval-anec", "explain", "audit-prune")


def run_cli_pipeline(root: Path, n=600, n_test=400, extra=(), force=False) -> dict[str, int]:
    """Run ``synth generate`` then every pipeline stage under ``root``.

    Returns the exit code of each stage keyed by command name.
    """
    from groundcbm.cli import run

    quiet = lambda *a: None  # noqa: E731
    flags = ["--force"] if force else []
    codes = {"synth": run(["synth", "generate", "--out", str(root / "fixture"), "--n", str(n),
                           "--n-test", str(n_test), *flags, *extra], log=quiet)}
    cfg = str(root / "fixture" / "config.json")
    for cmd in PIPELINE:
        args = [cmd, "--config", cfg, *flags, *extra]
        if cmd == "eval-anec":
            args += ["--random-k", "32"]
        codes[cmd] = run(args, log=quiet)
    return codes


def report_bytes(run_dir: Path) -> dict[str, bytes]:
    """Every report file under ``run_dir`` except manifests, keyed by relative path."""
    out = {}
    for p in sorted(run_dir.rglob("*")):
        if p.is_file() and "manifests" not in p.parts:
            out[p.relative_to(run_dir).as_posix()] = p.read_bytes()
    return out

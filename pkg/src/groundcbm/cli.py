"""Command-line driver for the concept bottleneck pipeline.

Every stage reads a JSON run configuration (``--config``), applies
``--set section.field=value`` overrides plus the stage's own flags, writes
its artifacts under ``paths.output_dir`` and records a manifest in
``<output_dir>/manifests/<stage>.json`` with the config hash, library
versions and a sha256 of every input and output.  A stage whose manifest
still matches is skipped unless ``--force`` is given.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numerical error,
5 failed verification.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import platform
import sys
from dataclasses import fields
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np
import scipy

from . import __version__
from .cbl import (
    CblTrainConfig,
    fit_normalization,
    from_bundle as cbl_from_bundle,
    predict_concepts,
    to_bundle_parts,
    train_cbl,
    train_val_split,
)
from .dataset import DEFAULT_THRESHOLD, DatasetError, assemble, read_manifest, write_manifest
from .explain import explain_batch, write_explanations
from .formats import (
    FormatError,
    ModelBundle,
    ensure_dir,
    file_sha256,
    read_bundle,
    read_detections,
    read_embeddings,
    read_json,
    read_vocabulary,
    write_bundle,
    write_detections,
    write_embeddings,
    write_json,
    write_table,
    write_vocabulary,
)
from .leakage import (
    LeakageSetup,
    check_bounds,
    check_multiclass,
    random_cbl_baseline,
    run_leakage_experiment,
    run_multiclass_experiment,
)
from .metrics import (
    DEFAULT_LEVELS,
    accuracy,
    anec,
    nonzero_distribution,
    prediction_change_after_top5,
    write_anec_report,
    write_nonzero_histogram,
)
from .sparse_final import (
    DEFAULT_ALPHA_MIX,
    DEFAULT_MIN_RATIO,
    DEFAULT_PATH_POINTS,
    layer_bundle_parts,
    layer_from_bundle,
    path_from_bundle,
    path_table,
    path_to_bundle,
    select_for_nec,
    solve_elastic_net,
    solve_path,
)
from .synth import generate, make_planted

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL, EXIT_FAILED = 0, 2, 3, 4, 5

PATH_FIELDS = ("embeddings", "detections", "vocabulary", "crop_embeddings",
               "test_embeddings", "test_detections", "output_dir")


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"config field {field!r}: {message}")
        self.field = field


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def default_config() -> dict:
    return {
        "paths": {name: None for name in PATH_FIELDS},
        "T": DEFAULT_THRESHOLD,
        "seed": 0,
        "cbl": CblTrainConfig().to_dict(),
        "final": {"alpha_mix": DEFAULT_ALPHA_MIX, "path_points": DEFAULT_PATH_POINTS,
                  "min_ratio": DEFAULT_MIN_RATIO, "target_necs": [5],
                  "tol": 1e-7, "max_iter": 50000},
        "eval": {"levels": list(DEFAULT_LEVELS), "random_k": None, "top_n": 5},
        "synth": {"n": 2000, "n_test": 2000, "d": 64, "k": 24, "C": 6, "s": 5,
                  "noise_rate": 0.05},
    }


def _merge(base: dict, extra: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        name = f"{prefix}{key}"
        if key not in out:
            raise ConfigError(name, "unknown field")
        if isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(name, "expected a table")
            out[key] = _merge(out[key], value, name + ".")
        else:
            out[key] = value
    return out


def _parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ConfigError(text, "override must look like section.field=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def load_config(path: Optional[str], overrides=()) -> dict:
    """Defaults, then the JSON file, then ``section.field=value`` overrides.

    Relative paths in the file are resolved against the file's directory.
    """
    cfg = default_config()
    base = Path.cwd()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError("--config", f"file {path} not found")
        try:
            user = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError("--config", f"invalid JSON ({exc})") from None
        if not isinstance(user, dict):
            raise ConfigError("--config", "top level must be an object")
        cfg = _merge(cfg, user)
        base = p.parent
    for text in overrides:
        keys, value = _parse_override(text)
        node = cfg
        for i, key in enumerate(keys[:-1]):
            if not isinstance(node.get(key), dict):
                raise ConfigError(".".join(keys[:i + 1]), "unknown section")
            node = node[key]
        if keys[-1] not in node:
            raise ConfigError(".".join(keys), "unknown field")
        node[keys[-1]] = value
    for name, value in cfg["paths"].items():
        if value is not None:
            cfg["paths"][name] = str((base / value).resolve()) if not Path(value).is_absolute() \
                else value
    return cfg


def cbl_config(cfg: dict) -> CblTrainConfig:
    known = {f.name for f in fields(CblTrainConfig)}
    extra = set(cfg["cbl"]) - known
    if extra:
        raise ConfigError(f"cbl.{sorted(extra)[0]}", "unknown field")
    try:
        return CblTrainConfig(**cfg["cbl"])
    except (TypeError, ValueError) as exc:
        raise ConfigError("cbl", str(exc)) from None


def validate(cfg: dict, need_files=(), need_dirs=("output_dir",)) -> None:
    """Field-addressed checks on the values a stage is about to use."""
    T = cfg["T"]
    if not isinstance(T, (int, float)) or not 0.0 <= T <= 1.0:
        raise ConfigError("T", f"must lie in [0, 1], got {T!r}")
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed", "must be an integer")
    fin = cfg["final"]
    if not 0.0 < float(fin["alpha_mix"]) <= 1.0:
        raise ConfigError("final.alpha_mix", "must lie in (0, 1]")
    if int(fin["path_points"]) < 1:
        raise ConfigError("final.path_points", "must be >= 1")
    if not 0.0 < float(fin["min_ratio"]) < 1.0:
        raise ConfigError("final.min_ratio", "must lie in (0, 1)")
    if any(t < 0 for t in fin["target_necs"]):
        raise ConfigError("final.target_necs", "targets must be >= 0")
    if not cfg["eval"]["levels"]:
        raise ConfigError("eval.levels", "must not be empty")
    cbl_config(cfg)
    for name in need_files:
        value = cfg["paths"][name]
        if value is None:
            raise ConfigError(f"paths.{name}", "required by this stage but not set")
        if not Path(value).is_file():
            raise ConfigError(f"paths.{name}", f"file {value} does not exist")
    for name in need_dirs:
        if cfg["paths"][name] is None:
            raise ConfigError(f"paths.{name}", "required by this stage but not set")


def config_hash(obj) -> str:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def versions() -> dict:
    return {"groundcbm": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


# ---------------------------------------------------------------------------
# Manifests and stage runner
# ---------------------------------------------------------------------------


def _rel(path, root: Path) -> str:
    p = Path(path).resolve()
    try:
        return p.relative_to(root.resolve()).as_posix()
    except ValueError:
        return p.as_posix()


def _manifest_path(out: Path, stage: str) -> Path:
    return out / "manifests" / f"{stage}.json"


def _up_to_date(out: Path, stage: str, chash: str, inputs: list) -> bool:
    mp = _manifest_path(out, stage)
    if not mp.is_file():
        return False
    try:
        m = read_json(mp)
    except FormatError:
        return False
    if m.get("config_hash") != chash or m.get("versions") != versions():
        return False
    want_in = {_rel(p, out): file_sha256(p) for p in inputs}
    if m.get("inputs") != want_in:
        return False
    for rel, digest in m.get("outputs", {}).items():
        p = out / rel
        if not p.is_file() or file_sha256(p) != digest:
            return False
    return True


def _run_stage(cfg: dict, stage: str, stage_args: dict, inputs: list,
               body: Callable[[Path], list], force: bool, log=print) -> int:
    out = ensure_dir(cfg["paths"]["output_dir"])
    chash = config_hash({"config": cfg, "stage": stage, "args": stage_args})
    if not force and _up_to_date(out, stage, chash, inputs):
        log(f"{stage}: up to date (use --force to rerun)")
        return EXIT_OK
    outputs = body(out)
    manifest = {
        "stage": stage,
        "config_hash": chash,
        "versions": versions(),
        "inputs": {_rel(p, out): file_sha256(p) for p in inputs},
        "outputs": {_rel(p, out): file_sha256(p) for p in sorted(set(map(str, outputs)))},
    }
    write_json(manifest, ensure_dir(out / "manifests") / f"{stage}.json")
    log(f"{stage}: wrote {len(manifest['outputs'])} files to {out}")
    return EXIT_OK


def _bundle(parts_meta: dict, arrays: dict, kind: str, extra: Optional[dict] = None
            ) -> ModelBundle:
    meta = {"kind": kind, **parts_meta, **(extra or {})}
    return ModelBundle(meta, {k: np.asarray(v, dtype=np.float32) for k, v in arrays.items()})


def _final_bundle(layer) -> ModelBundle:
    meta, arrays = layer_bundle_parts(layer)
    return _bundle(meta, arrays, "final-layer")


def _test_split(cfg: dict):
    emb = read_embeddings(cfg["paths"]["test_embeddings"])
    recs = read_detections(cfg["paths"]["test_detections"])
    labels = np.array([r.class_label for r in recs], dtype=np.int64)
    return emb, emb.rows([r.image_id for r in recs]), labels, [r.image_id for r in recs]


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def stage_synth(cfg: dict, args, log=print) -> int:
    sy = cfg["synth"]
    planted = make_planted(d=sy["d"], k=sy["k"], C=sy["C"], s=sy["s"],
                           noise_rate=sy["noise_rate"], seed=cfg["seed"])
    out_dir = Path(args.out) if args.out else Path(cfg["paths"]["output_dir"] or ".") / "fixture"
    cfg = copy.deepcopy(cfg)
    cfg["paths"]["output_dir"] = str(out_dir)

    def body(out: Path):
        train = generate(planted, sy["n"], seed=cfg["seed"] * 2 + 1, id_prefix="train")
        test = generate(planted, sy["n_test"], seed=cfg["seed"] * 2 + 2, id_prefix="test")
        files = {
            "embeddings": out / "embeddings.bin",
            "crop_embeddings": out / "crops.bin",
            "detections": out / "detections.jsonl",
            "vocabulary": out / "vocabulary.jsonl",
            "test_embeddings": out / "test_embeddings.bin",
            "test_detections": out / "test_detections.jsonl",
        }
        write_embeddings(train.embeddings, files["embeddings"])
        write_embeddings(train.crop_embeddings, files["crop_embeddings"])
        write_detections(train.detections, files["detections"])
        write_vocabulary(planted.vocabulary(), files["vocabulary"])
        write_embeddings(test.embeddings, files["test_embeddings"])
        write_detections(test.detections, files["test_detections"])
        truth = _bundle({}, {"concept_directions": planted.concept_directions,
                             "true_final": planted.true_final,
                             "test_clean_concepts": test.clean_concepts},
                        "planted-truth", {"d": planted.d, "k": planted.k, "C": planted.C,
                                          "s": planted.s, "seed": cfg["seed"]})
        write_bundle(truth, out / "truth.bundle")
        run_cfg = default_config()
        run_cfg["seed"] = cfg["seed"]
        run_cfg["paths"] = {name: p.name for name, p in files.items()}
        run_cfg["paths"]["output_dir"] = "run"
        write_json(run_cfg, out / "config.json")
        return [*files.values(), out / "truth.bundle", out / "config.json"]

    return _run_stage(cfg, "synth", {"out": str(out_dir)}, [], body, args.force, log)


def stage_build_dataset(cfg: dict, args, log=print) -> int:
    validate(cfg, need_files=("embeddings", "detections", "vocabulary"))
    P = cfg["paths"]

    def body(out: Path):
        emb = read_embeddings(P["embeddings"])
        ds = assemble(emb, read_detections(P["detections"]), read_vocabulary(P["vocabulary"]),
                      float(cfg["T"]), seed=cfg["seed"])
        if ds.k == 0:
            raise DatasetError(f"no concept survives the confidence threshold T={cfg['T']}")
        write_manifest(ds, out / "dataset.json", P["embeddings"], P["crop_embeddings"])
        log(f"build-dataset: {ds.n} images, {ds.k} concepts")
        return [out / "dataset.json"]

    inputs = [P[n] for n in ("embeddings", "detections", "vocabulary")]
    return _run_stage(cfg, "build-dataset", {}, inputs, body, args.force, log)


def _load_dataset(cfg: dict):
    out = Path(cfg["paths"]["output_dir"])
    path = out / "dataset.json"
    if not path.is_file():
        raise DatasetError(f"{path} missing; run build-dataset first")
    emb = read_embeddings(cfg["paths"]["embeddings"])
    return read_manifest(path, emb, verify_hash_of=cfg["paths"]["embeddings"])


def stage_train_cbl(cfg: dict, args, log=print) -> int:
    validate(cfg, need_files=("embeddings",))
    ccfg = cbl_config(cfg)
    P = cfg["paths"]
    out_dir = Path(P["output_dir"])

    def body(out: Path):
        ds = _load_dataset(cfg)
        crops = read_embeddings(P["crop_embeddings"]) if P["crop_embeddings"] else None
        history = []
        cb = fit_normalization(train_cbl(ds, crops, ccfg, history), ds)
        meta, arrays = to_bundle_parts(cb)
        write_bundle(_bundle(meta, arrays, "concept-bottleneck",
                             {"concept_set": ds.concept_set, "train": ccfg.to_dict()}),
                     out / "cbl.bundle")
        rows = []
        for h in history:
            auc = h["val_auc"]
            rows.append((h["epoch"], h["loss"], h["batch_loss"],
                         float(np.nanmean(auc)) if auc.size else float("nan"),
                         float(np.nanmin(auc)) if auc.size else float("nan")))
        write_table(out / "cbl_log.csv",
                    ["epoch", "loss", "batch_loss", "val_auc_mean", "val_auc_min"], rows)
        if history and history[-1]["val_auc"].size:
            write_table(out / "cbl_val_auc.csv", ["concept", "auc"],
                        list(zip(ds.concept_set, history[-1]["val_auc"].tolist())))
            extra = [out / "cbl_val_auc.csv"]
        else:
            extra = []
        return [out / "cbl.bundle", out / "cbl_log.csv", *extra]

    inputs = [out_dir / "dataset.json", P["embeddings"]]
    if P["crop_embeddings"]:
        inputs.append(P["crop_embeddings"])
    _require(inputs)
    return _run_stage(cfg, "train-cbl", {}, inputs, body, args.force, log)


def _require(paths):
    for p in paths:
        if not Path(p).is_file():
            raise DatasetError(f"{p} missing; run the earlier pipeline stages first")


def _load_cbl(out: Path):
    bundle = read_bundle(out / "cbl.bundle")
    return cbl_from_bundle(bundle), bundle.metadata.get("concept_set")


def stage_train_final(cfg: dict, args, log=print) -> int:
    validate(cfg, need_files=("embeddings",))
    fin = cfg["final"]
    out_dir = Path(cfg["paths"]["output_dir"])

    def body(out: Path):
        ds = _load_dataset(cfg)
        cb, _ = _load_cbl(out)
        X = predict_concepts(cb, ds.features(), normalized=True)
        tr, va = train_val_split(ds.n, cbl_config(cfg))
        y = ds.class_labels
        C = int(y.max()) + 1
        path = solve_path(X[tr], y[tr], X[va], y[va], alpha_mix=float(fin["alpha_mix"]),
                          num_points=int(fin["path_points"]), min_ratio=float(fin["min_ratio"]),
                          tol=float(fin["tol"]), max_iter=int(fin["max_iter"]), n_classes=C)
        write_bundle(path_to_bundle(path), out / "path.bundle")
        header, rows = path_table(path)
        write_table(out / "path.csv", header, rows)
        dense = solve_elastic_net(X[tr], y[tr], 0.0, float(fin["alpha_mix"]),
                                  tol=float(fin["tol"]), max_iter=int(fin["max_iter"]),
                                  n_classes=C)
        write_bundle(_final_bundle(dense), out / "final_dense.bundle")
        written = [out / "path.bundle", out / "path.csv", out / "final_dense.bundle"]
        for t in fin["target_necs"]:
            layer = select_for_nec(path, t)
            name = out / f"final_nec{_tag(t)}.bundle"
            write_bundle(_final_bundle(layer), name)
            written.append(name)
        log(f"train-final: path NEC range {path.necs.min():g}..{path.necs.max():g}")
        return written

    inputs = [out_dir / "dataset.json", out_dir / "cbl.bundle", cfg["paths"]["embeddings"]]
    _require(inputs)
    return _run_stage(cfg, "train-final", {}, inputs, body, args.force, log)


def _tag(t) -> str:
    return f"{t:g}".replace(".", "p")


def stage_eval_anec(cfg: dict, args, log=print) -> int:
    validate(cfg, need_files=("test_embeddings", "test_detections"))
    out_dir = Path(cfg["paths"]["output_dir"])
    levels = [int(v) for v in cfg["eval"]["levels"]]
    random_k = cfg["eval"]["random_k"]

    def body(out: Path):
        cb, _ = _load_cbl(out)
        path = path_from_bundle(read_bundle(out / "path.bundle"))
        _, Zte, yte, _ = _test_split(cfg)
        report = anec(path, cb, Zte, yte, levels)
        write_anec_report(report, out / "anec.csv", out / "anec.json")
        written = [out / "anec.csv", out / "anec.json"]
        for lv in levels:
            dist = nonzero_distribution(select_for_nec(path, lv))
            write_nonzero_histogram(dist, out / f"nonzero_nec{lv}.csv")
            written.append(out / f"nonzero_nec{lv}.csv")
        dense = layer_from_bundle(read_bundle(out / "final_dense.bundle"))
        summary = {"anec5": report.anec5, "anec_avg": report.anec_avg,
                   "dense_accuracy": accuracy(dense, cb, Zte, yte)}
        if random_k:
            ds = _load_dataset(cfg)
            tr, va = train_val_split(ds.n, cbl_config(cfg))
            Z, y = ds.features(), ds.class_labels
            fin = cfg["final"]
            rcb, rpath = random_cbl_baseline(
                Z[tr], y[tr], Z[va], y[va], k=int(random_k), seed=cfg["seed"],
                alpha_mix=float(fin["alpha_mix"]), num_points=int(fin["path_points"]),
                min_ratio=float(fin["min_ratio"]), tol=float(fin["tol"]),
                max_iter=int(fin["max_iter"]), n_classes=int(y.max()) + 1)
            rreport = anec(rpath, rcb, Zte, yte, levels)
            write_anec_report(rreport, out / "anec_random.csv")
            written.append(out / "anec_random.csv")
            summary["random_k"] = int(random_k)
            summary["random_anec5"] = rreport.anec5
            summary["random_per_nec"] = {str(k): v for k, v in rreport.per_nec.items()}
        write_json(summary, out / "eval_summary.json")
        written.append(out / "eval_summary.json")
        log("eval-anec: " + ", ".join(f"NEC={lv}: {report.per_nec[lv]:.4f}" for lv in levels))
        return written

    inputs = [out_dir / "cbl.bundle", out_dir / "path.bundle", out_dir / "final_dense.bundle",
              cfg["paths"]["test_embeddings"], cfg["paths"]["test_detections"]]
    _require(inputs)
    return _run_stage(cfg, "eval-anec", {}, inputs, body, args.force, log)


def _parse_ids(spec: Optional[str]) -> Optional[list[str]]:
    if not spec:
        return None
    if spec.startswith("@"):
        return [s.strip() for s in Path(spec[1:]).read_text().splitlines() if s.strip()]
    return [s.strip() for s in spec.split(",") if s.strip()]


def stage_explain(cfg: dict, args, log=print) -> int:
    validate(cfg)
    out_dir = Path(cfg["paths"]["output_dir"])
    model = Path(args.model) if args.model else out_dir / "final_nec5.bundle"
    emb_path = args.embeddings or cfg["paths"]["test_embeddings"]
    if emb_path is None:
        raise ConfigError("paths.test_embeddings", "explain needs --embeddings or this path")
    top_n = int(args.top_n or cfg["eval"]["top_n"])

    def body(out: Path):
        cb, names = _load_cbl(out)
        layer = layer_from_bundle(read_bundle(model))
        emb = read_embeddings(emb_path)
        ids = _parse_ids(args.ids) or list(emb.ids)
        missing = [i for i in ids if i not in set(emb.ids)]
        if missing:
            raise DatasetError(f"unknown image id {missing[0]!r}")
        names = names or [f"concept_{j}" for j in range(cb.k)]
        exps = explain_batch(cb, layer, emb.rows(ids), ids, names, top_n,
                             normalized=not args.raw)
        target = out / "explanations"
        summary = write_explanations(exps, target)
        log(f"explain: {summary['samples']} samples, negative reasoning rate "
            f"{summary['negative_reasoning_rate']:.4f}")
        return sorted(target.iterdir())

    inputs = [out_dir / "cbl.bundle", model, emb_path]
    _require(inputs)
    return _run_stage(cfg, "explain", {"model": _rel(model, out_dir), "ids": args.ids,
                                       "top_n": top_n, "raw": bool(args.raw)},
                      inputs, body, args.force, log)


def stage_audit_prune(cfg: dict, args, log=print) -> int:
    validate(cfg, need_files=("test_embeddings", "test_detections"))
    out_dir = Path(cfg["paths"]["output_dir"])
    top_n = int(args.top_n)

    def body(out: Path):
        cb, _ = _load_cbl(out)
        path = path_from_bundle(read_bundle(out / "path.bundle"))
        _, Zte, _, _ = _test_split(cfg)
        rows = []
        for t in cfg["final"]["target_necs"]:
            layer = select_for_nec(path, t)
            rows.append((f"nec{_tag(t)}", layer.nec,
                         prediction_change_after_top5(layer, cb, Zte, top_n)))
        dense = layer_from_bundle(read_bundle(out / "final_dense.bundle"))
        rows.append(("dense", dense.nec, prediction_change_after_top5(dense, cb, Zte, top_n)))
        write_table(out / "audit_prune.csv", ["model", "nec", "change_fraction"], rows)
        for name, nec_value, frac in rows:
            log(f"audit-prune: {name} (NEC {nec_value:.2f}) changes {100 * frac:.2f}%")
        return [out / "audit_prune.csv"]

    inputs = [out_dir / "cbl.bundle", out_dir / "path.bundle", out_dir / "final_dense.bundle",
              cfg["paths"]["test_embeddings"], cfg["paths"]["test_detections"]]
    _require(inputs)
    return _run_stage(cfg, "audit-prune", {"top_n": top_n}, inputs, body, args.force, log)


def stage_verify_theorem(cfg: dict, args, log=print) -> int:
    if cfg["paths"]["output_dir"] is None:
        cfg = copy.deepcopy(cfg)
        cfg["paths"]["output_dir"] = "."
    k_grid = [int(v) for v in args.k_grid.split(",")] if args.k_grid else \
        [1, 8, 16, 32, 48, 63, args.d, args.d + 16]
    seed = cfg["seed"] if args.seed is None else args.seed
    status = {}

    def body(out: Path):
        setup = LeakageSetup.random(d=args.d, seed=seed, k_grid=k_grid, trials=args.trials)
        result = run_leakage_experiment(setup)
        write_table(out / "theorem.csv", ["k", "mean_error", "std_error", "bound"],
                    result.rows())
        flags = check_bounds(result, args.d)
        rng = np.random.default_rng([seed, 0xC3])
        rows_of_W = rng.standard_normal((args.classes, args.d))
        multi = run_multiclass_experiment(
            LeakageSetup(d=args.d, sigma=setup.sigma, w=setup.w, k_grid=k_grid,
                         trials=args.trials, seed=seed), rows_of_W)
        write_table(out / "theorem_multiclass.csv", ["k", "summed_mean_error", "summed_bound"],
                    [(k, e, b) for k, (e, b) in multi.items()])
        flags["multiclass"] = check_multiclass(multi, args.d, result.lambda_max, rows_of_W)
        eig = np.linalg.eigvalsh(setup.sigma)
        summary = {"d": args.d, "trials": args.trials, "seed": seed, "k_grid": k_grid,
                   "lambda_max": result.lambda_max, "lambda_min": float(eig[0]),
                   "w_norm_sq": result.w_norm_sq,
                   "exact_recovery_max_error": result.exact_recovery_max_error,
                   "checks": flags, "pass": all(flags.values())}
        write_json(summary, out / "theorem_summary.json")
        status["pass"] = summary["pass"]
        for name, ok in flags.items():
            log(f"verify-theorem: {name}: {'PASS' if ok else 'FAIL'}")
        return [out / "theorem.csv", out / "theorem_multiclass.csv", out / "theorem_summary.json"]

    stage_args = {"d": args.d, "trials": args.trials, "k_grid": k_grid, "seed": seed,
                  "classes": args.classes}
    code = _run_stage(cfg, "verify-theorem", stage_args, [], body, args.force, log)
    if "pass" not in status:
        status["pass"] = read_json(Path(cfg["paths"]["output_dir"]) /
                                   "theorem_summary.json")["pass"]
    log("PASS" if status["pass"] else "FAIL")
    return code if status["pass"] else EXIT_FAILED


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field, e.g. cbl.epochs=10")
    common.add_argument("--output-dir", help="shorthand for --set paths.output_dir=...")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--force", action="store_true", help="rerun even if up to date")
    common.add_argument("--threads", type=int, default=None,
                        help="cap BLAS threads (needs threadpoolctl)")

    parser = argparse.ArgumentParser(prog="groundcbm", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", parents=[common], help="write a planted fixture directory")
    sp.add_argument("action", choices=["generate"])
    sp.add_argument("--out", help="fixture directory (default <output_dir>/fixture)")
    sp.add_argument("--n", type=int)
    sp.add_argument("--n-test", type=int)

    sub.add_parser("build-dataset", parents=[common], help="filter detections, label images")
    sub.add_parser("train-cbl", parents=[common], help="train the concept bottleneck layer")

    sp = sub.add_parser("train-final", parents=[common], help="solve the sparse final layer path")
    sp.add_argument("--alpha-mix", type=float)
    sp.add_argument("--path-points", type=int)
    sp.add_argument("--min-ratio", type=float)
    sp.add_argument("--target-nec", type=float, action="append")

    sp = sub.add_parser("eval-anec", parents=[common], help="ANEC report on the test split")
    sp.add_argument("--random-k", type=int, help="also evaluate a random CBL with k neurons")

    sp = sub.add_parser("explain", parents=[common], help="per-sample top contributions")
    sp.add_argument("--model", help="final-layer bundle (default final_nec5.bundle)")
    sp.add_argument("--embeddings", help="embedding file (default the test embeddings)")
    sp.add_argument("--ids", help="comma-separated ids or @file with one id per line")
    sp.add_argument("--top-n", type=int)
    sp.add_argument("--raw", action="store_true", help="use raw instead of normalised logits")

    sp = sub.add_parser("audit-prune", parents=[common], help="prediction change after top-5")
    sp.add_argument("--top-n", type=int, default=5)

    sp = sub.add_parser("verify-theorem", parents=[common], help="random-CBL bound check")
    sp.add_argument("--d", type=int, default=64)
    sp.add_argument("--trials", type=int, default=1000)
    sp.add_argument("--k-grid", help="comma-separated k values")
    sp.add_argument("--classes", type=int, default=3)
    return parser


STAGES = {
    "synth": stage_synth,
    "build-dataset": stage_build_dataset,
    "train-cbl": stage_train_cbl,
    "train-final": stage_train_final,
    "eval-anec": stage_eval_anec,
    "explain": stage_explain,
    "audit-prune": stage_audit_prune,
    "verify-theorem": stage_verify_theorem,
}


def _apply_flags(cfg: dict, args) -> dict:
    if args.output_dir:
        cfg["paths"]["output_dir"] = str(Path(args.output_dir).resolve())
    if args.seed is not None and args.command != "verify-theorem":
        cfg["seed"] = args.seed
        cfg["cbl"]["seed"] = args.seed
    if args.command == "train-final":
        for flag, key in (("alpha_mix", "alpha_mix"), ("path_points", "path_points"),
                          ("min_ratio", "min_ratio"), ("target_nec", "target_necs")):
            if getattr(args, flag) is not None:
                cfg["final"][key] = getattr(args, flag)
    if args.command == "eval-anec" and args.random_k is not None:
        cfg["eval"]["random_k"] = args.random_k
    if args.command == "synth":
        if args.n is not None:
            cfg["synth"]["n"] = args.n
        if args.n_test is not None:
            cfg["synth"]["n_test"] = args.n_test
    return cfg


def _limit_threads(n: Optional[int]):
    if n is None:
        return None
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        print("--threads ignored: threadpoolctl is not installed", file=sys.stderr)
        return None
    return threadpool_limits(limits=n)


def run(argv=None, log=print) -> int:
    """Parse ``argv`` and run one stage; returns the process exit code."""
    args = build_parser().parse_args(argv)
    try:
        cfg = _apply_flags(load_config(args.config, args.set), args)
        limiter = _limit_threads(args.threads)
        try:
            return STAGES[args.command](cfg, args, log)
        finally:
            if limiter is not None:
                limiter.unregister()
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, DatasetError, FileNotFoundError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

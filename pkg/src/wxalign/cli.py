"""Command-line entry point: ``wxalign <command> [options]``.

Every command prints exactly one JSON object on stdout. Logs, including
per-epoch training records as JSON lines, go to stderr.

Exit codes: 0 success, 2 configuration or argument error, 3 I/O or file
format error, 4 numeric failure (non-finite loss, gradient-check breach).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import evaluation, gradcheck, plotting
from .config import ConfigError, load_config
from .imaging import FOG_LEVELS, Image, PPMFormatError, render_detections, save_ppm
from .nnet import CheckpointFormatError, ShapeError, param_count
from .pipeline import (
    ModelBundle,
    NumericError,
    PairSet,
    align_adverse,
    assemble_hybrid,
    cache_reference_features,
    params_digest,
    predict_batch,
    train_clean,
)
from .synthdata import (
    DEGRADATION_KINDS,
    DatasetManifest,
    LabelParseError,
    build_mixed_dataset,
    generate_dataset,
)

log = logging.getLogger("wxalign")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


class IOFailure(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _emit(obj):
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")
    sys.stdout.flush()


def _log_record(record):
    sys.stderr.write(json.dumps(record, sort_keys=True) + "\n")


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _read_manifest(path):
    try:
        return DatasetManifest.read(path)
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise IOFailure(f"cannot read manifest {path}: {exc}") from exc
    except ValueError as exc:
        raise IOFailure(str(exc)) from exc


def _read_bundle(path):
    try:
        return ModelBundle.from_bytes(Path(path).read_bytes())
    except OSError as exc:
        raise IOFailure(f"cannot read checkpoint {path}: {exc}") from exc


def _write_bundle(bundle, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(bundle.to_bytes())
    return path


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _threads(args):
    return args.threads if args.threads else (os.cpu_count() or 1)


def _load_split(manifest):
    try:
        return evaluation.load_split(manifest)
    except FileNotFoundError as exc:
        raise IOFailure(f"missing file: {exc.filename}") from exc


def _bundle_summary(bundle, path):
    return {
        "checkpoint": str(path),
        "sha256": _sha256(path),
        "stage": bundle.stage,
        "params": param_count(bundle.inference_params()),
        "backbone_digest": params_digest(bundle.backbone),
        "head_digest": params_digest(bundle.head),
    }


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args):
    cfg = _config(args)
    train_n = cfg.dataset.train_count if args.count is None else args.count
    test_n = cfg.dataset.test_count if args.test_count is None else args.test_count
    if train_n < 1 or test_n < 1:
        raise ConfigError(f"image counts must be positive, got train={train_n} test={test_n}")
    out = _out_dir(args)
    spec = cfg.scene_spec()
    summary = {"command": "synth", "seed": cfg.seeds.master}
    for split, n in (("train", train_n), ("test", test_n)):
        manifest = generate_dataset(spec, n, split, cfg.seeds.master, out / split, _threads(args))
        path = out / split / "manifest.json"
        summary[split] = {"manifest": str(path), "images": len(manifest), "sha256": _sha256(path)}
    (out / "config.json").write_text(cfg.to_json())
    _emit(summary)
    return EXIT_OK


def cmd_degrade(args):
    cfg = _config(args)
    kind = args.kind or cfg.align.kind
    if kind not in DEGRADATION_KINDS:
        raise ConfigError(f"unknown degradation kind {kind!r}; expected one of {DEGRADATION_KINDS}")
    clean = _read_manifest(args.manifest)
    out = _out_dir(args)
    try:
        mixed = build_mixed_dataset(clean, kind, cfg.seeds.master, out, cfg.align.atmospheric_light, _threads(args))
    except FileNotFoundError as exc:
        raise IOFailure(str(exc)) from exc
    path = out / "manifest.json"
    _emit(
        {
            "command": "degrade",
            "kind": kind,
            "manifest": str(path),
            "entries": len(mixed),
            "sources": len(clean.clean_entries()),
            "sha256": _sha256(path),
        }
    )
    return EXIT_OK


def cmd_train_clean(args):
    cfg = _config(args)
    manifest = _read_manifest(args.train)
    images, labels = _load_split(manifest)
    out = _out_dir(args)
    bundle, history = train_clean(images, labels, cfg.model_config(), cfg.train_config(), log_fn=_log_record)
    bundle.extra["run_config"] = cfg.to_dict()
    path = _write_bundle(bundle, out / "clean.ckpt")
    (out / "clean_losses.json").write_text(json.dumps(history) + "\n")
    summary = {"command": "train-clean", "epochs": len(history), "final_loss": history[-1] if history else None}
    summary.update(_bundle_summary(bundle, path))
    _emit(summary)
    return EXIT_OK


def cmd_align(args):
    cfg = _config(args)
    lam = cfg.align.lam if args.lam is None else args.lam
    if lam < 0:
        raise ConfigError("lambda must be non-negative")
    clean = _read_bundle(args.clean)
    if clean.stage != "clean":
        raise ConfigError(f"--clean must be a clean checkpoint, got stage {clean.stage!r}")
    mixed = _read_manifest(args.mixed)
    images, _ = _load_split(mixed)
    ref_idx = [i for i, e in enumerate(mixed.entries) if e.origin == "clean"]
    if not ref_idx:
        raise ConfigError("the mixed manifest has no clean reference entries")
    pairs = PairSet(
        np.array([e.source_id for e in mixed.entries]), images, [e.origin for e in mixed.entries]
    )
    out = _out_dir(args)
    store_path = out / "reference_features.bin"
    store = cache_reference_features(clean, images[ref_idx], [mixed.entries[i].source_id for i in ref_idx])
    store_path.write_bytes(store.to_bytes())

    before = (params_digest(clean.backbone), params_digest(clean.head))
    epoch_losses = []

    def flush():
        if epoch_losses:
            epoch = epoch_losses[0][0]
            _log_record({"stage": "align", "epoch": epoch, "loss": float(np.mean([v for _, v in epoch_losses])), "lambda": lam})
            epoch_losses.clear()

    def on_step(rec):
        if epoch_losses and epoch_losses[0][0] != rec["epoch"]:
            flush()
        epoch_losses.append((rec["epoch"], rec["loss"]))

    tcfg = cfg.train_config(lam=lam)
    aligned, records = align_adverse(clean, pairs, tcfg, store=store, log_fn=on_step)
    flush()
    if before != (params_digest(clean.backbone), params_digest(clean.head)):
        raise NumericError("reference backbone or head changed during alignment")
    aligned.extra.update({"kind": mixed.kind, "run_config": cfg.to_dict()})
    path = _write_bundle(aligned, out / "aligned.ckpt")
    with open(out / "align_trace.jsonl", "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    summary = {
        "command": "align",
        "kind": mixed.kind,
        "lambda": lam,
        "steps": len(records),
        "final_loss": records[-1]["loss"] if records else None,
        "reference_backbone_digest": before[0],
        "reference_head_digest": before[1],
        "feature_store_sha256": _sha256(store_path),
    }
    summary.update(_bundle_summary(aligned, path))
    _emit(summary)
    return EXIT_OK


def cmd_assemble(args):
    aligned = _read_bundle(args.aligned)
    clean = _read_bundle(args.clean)
    if aligned.stage != "aligned" or clean.stage != "clean":
        raise ConfigError(f"assemble needs an aligned and a clean checkpoint, got {aligned.stage!r}, {clean.stage!r}")
    hybrid = assemble_hybrid(aligned, clean)
    out = _out_dir(args)
    path = _write_bundle(hybrid, out / "hybrid.ckpt")
    summary = {
        "command": "assemble",
        "params_clean": param_count(clean.inference_params()),
        "params_added": param_count(hybrid.inference_params()) - param_count(clean.inference_params()),
    }
    summary.update(_bundle_summary(hybrid, path))
    _emit(summary)
    return EXIT_OK


def _test_arrays(cfg, manifest, degrade):
    images, labels = _load_split(manifest)
    if degrade != "none":
        images = evaluation.degraded_test_arrays(images, degrade, cfg.seeds.master, cfg.align.atmospheric_light)
    return images, labels


def cmd_eval(args):
    cfg = _config(args)
    bundle = _read_bundle(args.model)
    manifest = _read_manifest(args.manifest)
    images, labels = _test_arrays(cfg, manifest, args.degrade)
    e = cfg.eval
    dets = predict_batch(bundle, images, e.conf, e.nms)
    report = evaluation.score(dets, labels, bundle.config.num_classes, e.iou, e.report_conf)
    doc = report.to_dict()
    doc.update({"command": "eval", "degrade": args.degrade, "stage": bundle.stage})
    evaluation.validate_report(doc)
    out = _out_dir(args)
    (out / "report.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    with open(out / "detections.jsonl", "w", encoding="utf-8") as fh:
        for entry, image_dets in zip(manifest.entries, dets):
            for d in image_dets:
                rec = json.loads(d.to_json())
                rec["image"] = entry.image
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    _emit(doc)
    return EXIT_OK


def _parse_model_args(values):
    models = []
    for v in values:
        label, sep, path = v.partition("=")
        if not sep:
            label, path = Path(v).stem, v
        models.append((label, path))
    labels = [m[0] for m in models]
    if len(set(labels)) != len(labels):
        raise ConfigError(f"model labels must be unique, got {labels}")
    return models


def _read_trace(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]
    except (OSError, json.JSONDecodeError) as exc:
        raise IOFailure(f"cannot read trace {path}: {exc}") from exc


def cmd_report(args):
    cfg = _config(args)
    manifest = _read_manifest(args.manifest)
    images, labels = _load_split(manifest)
    kind = args.kind or cfg.align.kind
    degraded = evaluation.degraded_test_arrays(images, kind, cfg.seeds.master, cfg.align.atmospheric_light)
    e = cfg.eval
    kw = {"iou_threshold": e.iou, "conf": e.conf, "report_conf": e.report_conf, "nms_threshold": e.nms}
    out = _out_dir(args)
    rows, series, models = [], {}, []
    for label, path in _parse_model_args(args.model):
        bundle = _read_bundle(path)
        levels = evaluation.per_level_report(bundle, images, labels, "fog", cfg.align.atmospheric_light, **kw)
        doc = levels.to_dict()
        evaluation.validate_report(doc)
        deg = evaluation.evaluate_arrays(bundle, degraded, labels, **kw).to_dict()
        evaluation.validate_report(deg)
        entry = {
            "label": label,
            "stage": bundle.stage,
            "lambda": bundle.extra.get("lambda"),
            "clean": doc,
            "degraded": deg,
        }
        models.append(entry)
        series[label] = doc["levels"]
        rows.append({"label": label, "clean": doc["map50"], "degraded": deg["map50"]})
    figures = [
        plotting.plot_levels(series, out / "levels.png", evaluation.FULL_SCALE_FOG_LEVELS if args.reference else None),
        plotting.plot_comparison(rows, out / "comparison.png", keys=("clean", "degraded")),
    ]
    traces = {}
    for label, path in _parse_model_args(args.trace or []):
        recs = _read_trace(path)
        traces[label] = [r["loss"] for r in recs]
    if traces:
        figures.append(plotting.plot_losses(traces, out / "losses.png"))
    if args.render:
        figures.append(_render(models, args, images, degraded, out, cfg))
    doc = {
        "command": "report",
        "degrade": kind,
        "levels_beta": [round(0.05 + 0.01 * i, 2) for i in range(FOG_LEVELS)],
        "models": models,
        "comparison": rows,
        "full_scale_reference": evaluation.FULL_SCALE_FOG_LEVELS,
        "traces": {k: {"steps": len(v), "final_loss": v[-1] if v else None} for k, v in traces.items()},
        "figures": [str(Path(f).name) for f in figures],
    }
    (out / "report.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    _emit(doc)
    return EXIT_OK


def _render(models, args, images, degraded, out, cfg):
    """Debug render: the first N degraded test images with each model's detections."""
    n = min(args.render, len(images))
    render_dir = out / "render"
    render_dir.mkdir(exist_ok=True)
    tiles, titles = [], []
    for label, path in _parse_model_args(args.model):
        bundle = _read_bundle(path)
        dets = predict_batch(bundle, degraded[:n], cfg.eval.report_conf, cfg.eval.nms)
        for i in range(n):
            img = render_detections(Image(degraded[i].astype(np.float64) / 255.0), dets[i])
            (render_dir / f"{label}_{i:03d}.ppm").write_bytes(save_ppm(img))
            tiles.append(img.data)
            titles.append(f"{label} #{i}")
    return plotting.plot_gallery(tiles, out / "render.png", titles, cols=n)


def cmd_gradcheck(args):
    seed = 0 if args.seed is None else args.seed
    results = gradcheck.run_all(seed=seed, n_seeds=args.n_seeds)
    passed = all(r["passed"] for r in results.values())
    _emit({"command": "gradcheck", "seed": seed, "passed": passed, "suites": results})
    return EXIT_OK if passed else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON (defaults for every field when omitted)")
    common.add_argument("--seed", type=int, help="master seed; overrides seeds.master")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--threads", type=int, default=0, help="worker cap (default: all cores)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="wxalign", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate train and test corpora")
    p.add_argument("--count", type=int, help="training images")
    p.add_argument("--test-count", type=int, help="test images")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("degrade", parents=[common], help="build the clean + 10 degraded copies mixed set")
    p.add_argument("--manifest", required=True, help="clean manifest (file or directory)")
    p.add_argument("--kind", help="fog or lowlight (default: align.kind)")
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("train-clean", parents=[common], help="stage A: train backbone and head on clean data")
    p.add_argument("--train", required=True, help="training manifest")
    p.set_defaults(func=cmd_train_clean)

    p = sub.add_parser("align", parents=[common], help="stage B: Barlow alignment of a backbone copy")
    p.add_argument("--clean", required=True, help="clean checkpoint")
    p.add_argument("--mixed", required=True, help="mixed manifest from the degrade command")
    p.add_argument("--lambda", dest="lam", type=float, help="redundancy weight (default: align.lambda)")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("assemble", parents=[common], help="stage C: aligned backbone + clean head")
    p.add_argument("--aligned", required=True)
    p.add_argument("--clean", required=True)
    p.set_defaults(func=cmd_assemble)

    p = sub.add_parser("eval", parents=[common], help="mAP@50 and P/R/F1 on a manifest")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--degrade", choices=("none",) + DEGRADATION_KINDS, default="none")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", parents=[common], help="per-fog-level tables, comparisons and figures")
    p.add_argument("--model", action="append", required=True, help="LABEL=PATH or PATH; repeatable")
    p.add_argument("--manifest", required=True, help="test manifest")
    p.add_argument("--kind", choices=DEGRADATION_KINDS, help="degraded set for the comparison")
    p.add_argument("--trace", action="append", help="LABEL=PATH of an align_trace.jsonl; repeatable")
    p.add_argument("--render", type=int, default=0, help="render detections on the first N degraded images")
    p.add_argument("--no-reference", dest="reference", action="store_false", help="omit the full-scale curve")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference checks of every backward pass")
    p.add_argument("--n-seeds", type=int, default=5)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_CONFIG
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (NumericError, FloatingPointError) as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (IOFailure, PPMFormatError, CheckpointFormatError, LabelParseError, OSError) as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except jsonschema.ValidationError as exc:
        log.error("report failed schema validation: %s", exc.message)
        return EXIT_NUMERIC
    except (ConfigError, ShapeError, ValueError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()

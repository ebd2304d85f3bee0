"""Command-line interface.

Results are printed to stdout as JSON and logs go to stderr. Exit codes:
0 success, 1 validation errors (bad flags, bad manifest, missing model),
2 input/output errors (unreadable or malformed files).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import report as rpt
from .annotations import (DatasetManifest, import_csv, parse_manifest, split_dataset,
                          vertebra_polygon, write_manifest)
from .classifier import (INPUT_SIZE, EpochLog, Model, TrainConfig, history_csv, normalise,
                         occlusion_saliency)
from .geometry import BBox
from .errors import ImageIOError, InvalidArgumentError, ValidationError
from .raster import load_image, render_overlay
from .segpatch import SegPatchConfig, run_segpatch
from .synthgen import SynthConfig, corpus_stats, generate
from .tiling import TilingConfig, class_counts, run_tiling
from .workflow import (SEGPATCH_PRESET, TILING_PRESET, corpus_scale, evaluate_method, find_patch,
                       models_dir, patch_image, train_method)

log = logging.getLogger("spinepatch")

PRESETS = {"tiling": TILING_PRESET, "segpatch": SEGPATCH_PRESET}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InvalidArgumentError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------- helpers

def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    sys.stdout.flush()


def _manifest_path(args) -> Path:
    return Path(args.manifest) if args.manifest else Path(args.out_dir) / "manifest.json"


def _load(args) -> DatasetManifest:
    path = _manifest_path(args)
    if not path.exists():
        raise InvalidArgumentError(f"manifest not found: {path}")
    return parse_manifest(path)


def _save(m: DatasetManifest, path: Path) -> None:
    """Write ``m`` to ``path``, rewriting file references relative to its new directory."""
    path.parent.mkdir(parents=True, exist_ok=True)
    new_base = path.parent.resolve()
    if Path(m.base_dir).resolve() != new_base:
        def rel(p):
            return Path(os.path.relpath(m.resolve(p), new_base)).as_posix()
        scans = tuple(replace(s, image_path=rel(s.image_path),
                              mask_paths=None if s.mask_paths is None
                              else tuple(rel(q) for q in s.mask_paths))
                      for s in m.scans)
        m = replace(m, scans=scans, base_dir=new_base)
    write_manifest(m, path)


def _write_json(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _failures(failures) -> list:
    return [{"scan_id": sid, "error": msg} for sid, msg in failures]


def _train_config(args, method: str) -> TrainConfig:
    fields = dict(PRESETS[method])
    for flag, name in (("lr", "learning_rate"), ("momentum", "momentum"), ("epochs", "epochs"),
                       ("batch_size", "batch_size"), ("step", "scheduler_step"),
                       ("gamma", "scheduler_gamma"), ("loss", "loss"), ("focal_gamma", "focal_gamma"),
                       ("rotation_max", "rotation_max_deg"), ("equalize_prob", "equalize_prob")):
        value = getattr(args, flag, None)
        if value is not None:
            fields[name] = value
    if getattr(args, "no_augment", False):
        fields["rotation_max_deg"] = 0.0
        fields["equalize_prob"] = 0.0
    return TrainConfig(seed=args.seed, **fields)


def _read_history(path: Path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        return [EpochLog(int(r["epoch"]), float(r["lr"]), float(r["loss"]), float(r["train_acc"]))
                for r in csv.DictReader(fh)]


# --------------------------------------------------------------------------- subcommands

def cmd_synth(args) -> int:
    cfg = SynthConfig(seed=args.seed, n_scans=args.n_scans, region_mix=args.region_mix,
                      osteophyte_rate=args.osteophyte_rate, curvature=args.curvature,
                      noise_sigma=args.noise_sigma, bump_radius=args.bump_radius,
                      artifact_text_rate=args.artifact_text_rate, image_format=args.image_format)
    m = generate(cfg, args.out_dir, args.jobs)
    if not args.no_split:
        m = split_dataset(m, args.train_fraction, args.seed)
    _save(m, _manifest_path(args))
    _emit(corpus_stats(m))
    return 0


def cmd_import(args) -> int:
    path = _manifest_path(args)
    m = import_csv(args.csv, args.image_dir, path.parent)
    _save(m, path)
    _emit(corpus_stats(m))
    return 0


def cmd_tile(args) -> int:
    m = _load(args)
    cfg = TilingConfig(args.tile_w, args.tile_h, args.half_extent)
    if args.scale is not None:
        cfg = cfg.scaled(args.scale)
    m, summary, failures = run_tiling(m, cfg, args.out_dir, args.jobs)
    _save(m, _manifest_path(args))
    summary.update(config={"tile_w": cfg.tile_w, "tile_h": cfg.tile_h,
                           "annotation_half_extent": cfg.annotation_half_extent},
                   failures=_failures(failures))
    _emit(summary)
    return 2 if failures else 0


def _segpatch_config(args) -> SegPatchConfig:
    return SegPatchConfig(dx_minus_x={"cervical": args.dx_cervical, "lumbar": args.dx_lumbar},
                          dy_plus_y={"cervical": args.dy_cervical, "lumbar": args.dy_lumbar},
                          contour_source=args.contour_source, label_geometry=args.label_geometry)


def cmd_segpatch(args) -> int:
    m = _load(args)
    m, summary, coverage, failures = run_segpatch(m, _segpatch_config(args), args.out_dir, args.jobs)
    _save(m, _manifest_path(args))
    _write_json(coverage, Path(args.out_dir) / "segpatch" / "coverage.json")
    summary.update(coverage=coverage, failures=_failures(failures))
    _emit(summary)
    return 2 if failures else 0


def cmd_split(args) -> int:
    m = split_dataset(_load(args), args.train_fraction, args.seed)
    _save(m, _manifest_path(args))
    _emit({name: len(ids) for name, ids in m.splits.items()})
    return 0


def _train_and_save(m, method, cfg, out_dir: Path, jobs: int) -> dict:
    model, history, metrics = train_method(m, method, cfg, jobs)
    mdir = models_dir(out_dir)
    mdir.mkdir(parents=True, exist_ok=True)
    model.save(mdir / f"{method}.model")
    logs = out_dir / "logs"
    logs.mkdir(parents=True, exist_ok=True)
    (logs / f"{method}_history.csv").write_text(history_csv(history), encoding="utf-8")
    metrics["class_balance"] = class_counts(m.patches_for(method))
    _write_json(metrics, out_dir / "metrics" / f"{method}.json")
    return metrics


def cmd_train(args) -> int:
    m = _load(args)
    cfg = _train_config(args, args.method)
    _emit(_train_and_save(m, args.method, cfg, Path(args.out_dir), args.jobs))
    return 0


def _load_model(args) -> Model:
    path = models_dir(args.out_dir) / f"{args.method}.model"
    if not path.exists():
        raise InvalidArgumentError(f"model file not found: {path}; run `train --method {args.method}` first")
    return Model.load(path)


def cmd_eval(args) -> int:
    model = _load_model(args)
    m = _load(args)
    _emit(evaluate_method(m, args.method, model, args.jobs))
    return 0


def cmd_saliency(args) -> int:
    model = _load_model(args)
    m = _load(args)
    patches = m.patches_for(args.method)
    if args.patch_id:
        patch = find_patch(m, args.method, args.patch_id)
        if patch is None:
            raise InvalidArgumentError(f"no {args.method} patch {args.patch_id!r}")
    else:
        patch = next((p for p in patches if p.present and p.split == "test"),
                     next((p for p in patches if p.present), None))
        if patch is None:
            raise InvalidArgumentError(f"no present {args.method} patch to explain")
    img = normalise(patch_image(m, patch))
    sal = occlusion_saliency(model, img, args.window, args.stride)
    out = Path(args.out_dir) / "saliency"
    fig = rpt.plot_saliency(img, sal, out / f"{args.method}_{patch.patch_id}.png",
                            title=f"{patch.patch_id} ({patch.label})")
    i, j = divmod(int(abs(sal).argmax()), sal.shape[1])
    top = (j * args.stride, i * args.stride, j * args.stride + args.window - 1, i * args.stride + args.window - 1)
    overlay = out / f"{args.method}_{patch.patch_id}_overlay.png"
    render_overlay(img, [], [], [BBox(*top)], overlay)
    _emit({"patch_id": patch.patch_id, "label": patch.label, "shape": list(sal.shape),
           "max_abs": float(abs(sal).max()), "top_window": list(top),
           "figure": str(fig), "overlay": str(overlay), "input_size": INPUT_SIZE})
    return 0


def cmd_overlay(args) -> int:
    m = _load(args)
    try:
        scan = m.scan(args.scan_id)
    except KeyError:
        raise InvalidArgumentError(f"no scan {args.scan_id!r} in manifest") from None
    img = load_image(m.resolve(scan.image_path))
    polys = [vertebra_polygon(v) for v in scan.vertebrae]
    points = [o.location for o in scan.osteophytes]
    boxes = [p.crop for p in m.patches_for(args.method) if p.scan_id == scan.scan_id] if args.method else []
    path = Path(args.out_dir) / "overlays" / f"{scan.scan_id}.png"
    render_overlay(img, polys, points, boxes, path)
    _emit({"scan_id": scan.scan_id, "path": str(path), "vertebrae": len(polys),
           "osteophytes": len(points), "boxes": len(boxes)})
    return 0


def cmd_stats(args) -> int:
    m = _load(args)
    stats = corpus_stats(m)
    stats["class_balance"] = {method: class_counts(m.patches_for(method))
                              for method in ("segpatch", "tiling") if m.patches_for(method)}
    _emit(stats)
    return 0


def _compare(m, out_dir: Path) -> dict:
    metrics = {}
    histories = {}
    for method in ("tiling", "segpatch"):
        path = out_dir / "metrics" / f"{method}.json"
        if not path.exists():
            raise InvalidArgumentError(f"missing metrics for {method}: {path}; run `train --method {method}` first")
        metrics[method] = json.loads(path.read_text(encoding="utf-8"))
        hist = out_dir / "logs" / f"{method}_history.csv"
        if hist.exists():
            histories[method] = _read_history(hist)
    rep = rpt.compare_report(m, metrics["tiling"], metrics["segpatch"])
    rep["files"] = rpt.write_report(rep, out_dir / "report", histories)
    return rep


def cmd_compare(args) -> int:
    _emit(_compare(_load(args), Path(args.out_dir)))
    return 0


def cmd_demo(args) -> int:
    out = Path(args.out_dir)
    path = _manifest_path(args)
    t0 = time.perf_counter()
    m = generate(SynthConfig(seed=args.seed, n_scans=args.n_scans), out, args.jobs)
    m = split_dataset(m, 0.75, args.seed)
    _save(m, path)
    m = parse_manifest(path)
    scale = args.tile_scale if args.tile_scale is not None else corpus_scale(m)
    tcfg = TilingConfig().scaled(scale)
    m, tiling_summary, tf = run_tiling(m, tcfg, out, args.jobs)
    m, seg_summary, coverage, sf = run_segpatch(m, SegPatchConfig(), out, args.jobs)
    _save(m, path)
    _write_json(coverage, out / "segpatch" / "coverage.json")
    log.info("demo: corpus and patches ready in %.1fs", time.perf_counter() - t0)
    results = {}
    for method in ("tiling", "segpatch"):
        cfg = TrainConfig(seed=args.seed, **PRESETS[method])
        if not args.augment:
            cfg = replace(cfg, rotation_max_deg=0.0, equalize_prob=0.0)
        results[method] = _train_and_save(m, method, cfg, out, args.jobs)
    rep = _compare(m, out)
    log.info("demo: finished in %.1fs", time.perf_counter() - t0)
    seg_summary.pop("skipped", None)
    _emit({
        "tiling": {"config": {"tile_w": tcfg.tile_w, "tile_h": tcfg.tile_h,
                              "annotation_half_extent": tcfg.annotation_half_extent},
                   **tiling_summary},
        "segpatch": {**seg_summary, "uncovered": len(coverage["uncovered"])},
        "test_accuracy": {k: v["test"]["accuracy"] for k, v in results.items()},
        "gap": rep["gap"],
        "failures": _failures(tf + sf),
    })
    return 2 if tf or sf else 0


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    g = common.add_argument_group("global options")
    g.add_argument("--manifest", help="manifest path (default: OUT_DIR/manifest.json)")
    g.add_argument("--out-dir", default=".", help="output directory (default: current directory)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--jobs", type=int, default=1, help="worker processes for per-scan work")
    g.add_argument("--log-level", default="WARNING",
                   help="DEBUG, INFO, WARNING or ERROR; SPINEPATCH_LOG overrides")

    parser = _Parser(prog="spinepatch", description="Osteophyte patch datasets from spine radiographs.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        p = sub.add_parser(name, parents=[common], help=help_, description=help_)
        p.set_defaults(func=fn)
        return p

    p = add("synth", cmd_synth, "render a synthetic annotated corpus")
    d = SynthConfig()
    p.add_argument("--n-scans", type=int, default=d.n_scans)
    p.add_argument("--region-mix", type=float, default=d.region_mix, help="fraction of cervical scans")
    p.add_argument("--osteophyte-rate", type=float, default=d.osteophyte_rate)
    p.add_argument("--curvature", type=float, default=d.curvature)
    p.add_argument("--noise-sigma", type=float, default=d.noise_sigma)
    p.add_argument("--bump-radius", type=float, default=d.bump_radius)
    p.add_argument("--artifact-text-rate", type=float, default=d.artifact_text_rate)
    p.add_argument("--image-format", choices=("pgm", "png"), default=d.image_format)
    p.add_argument("--train-fraction", type=float, default=0.75)
    p.add_argument("--no-split", action="store_true", help="leave the corpus unsplit")

    p = add("import", cmd_import, "build a manifest from a CSV point list")
    p.add_argument("--csv", required=True)
    p.add_argument("--image-dir", required=True)

    p = add("tile", cmd_tile, "cut fixed-size tiles labelled by annotation boxes")
    d = TilingConfig()
    p.add_argument("--tile-w", type=int, default=d.tile_w)
    p.add_argument("--tile-h", type=int, default=d.tile_h)
    p.add_argument("--half-extent", type=float, default=d.annotation_half_extent)
    p.add_argument("--scale", type=float, help="rescale tile and box size for a resampled corpus")

    p = add("segpatch", cmd_segpatch, "cut one patch per vertebra from expanded contours")
    d = SegPatchConfig()
    p.add_argument("--dx-cervical", type=float, default=d.dx_minus_x["cervical"])
    p.add_argument("--dx-lumbar", type=float, default=d.dx_minus_x["lumbar"])
    p.add_argument("--dy-cervical", type=float, default=d.dy_plus_y["cervical"])
    p.add_argument("--dy-lumbar", type=float, default=d.dy_plus_y["lumbar"])
    p.add_argument("--contour-source", choices=("mask", "six_points"), default=d.contour_source)
    p.add_argument("--label-geometry", choices=("expanded_polygon", "crop_bbox"), default=d.label_geometry)

    p = add("split", cmd_split, "stratified scan-level train/test split")
    p.add_argument("--train-fraction", type=float, default=0.75)

    p = add("train", cmd_train, "train the patch classifier for one method")
    p.add_argument("--method", choices=("tiling", "segpatch"), required=True)
    p.add_argument("--loss", choices=("cross_entropy", "weighted_cross_entropy", "focal"))
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--step", type=int, help="scheduler step in epochs")
    p.add_argument("--gamma", type=float, help="scheduler decay factor")
    p.add_argument("--focal-gamma", type=float)
    p.add_argument("--rotation-max", type=float, help="max augmentation rotation in degrees")
    p.add_argument("--equalize-prob", type=float)
    p.add_argument("--no-augment", action="store_true")

    for name, fn, help_ in (("eval", cmd_eval, "score a trained model on both splits"),
                            ("saliency", cmd_saliency, "occlusion saliency for one patch")):
        p = add(name, fn, help_)
        p.add_argument("--method", choices=("tiling", "segpatch"), required=True)
        if name == "saliency":
            p.add_argument("--patch-id")
            p.add_argument("--window", type=int, default=32)
            p.add_argument("--stride", type=int, default=16)

    p = add("overlay", cmd_overlay, "draw annotations and patch boxes over a scan")
    p.add_argument("--scan-id", required=True)
    p.add_argument("--method", choices=("tiling", "segpatch"))

    add("stats", cmd_stats, "corpus and class-balance statistics")
    add("compare", cmd_compare, "compare the two methods' metrics")

    p = add("demo", cmd_demo, "synthesise, patch, split, train both methods and compare")
    p.add_argument("--n-scans", type=int, default=40)
    p.add_argument("--tile-scale", type=float,
                   help="tile scale factor (default: corpus resolution relative to full-size films)")
    p.add_argument("--augment", action="store_true", help="train with rotation and equalisation")
    return parser


def _setup_logging(level: str) -> None:
    level = os.environ.get("SPINEPATCH_LOG") or level
    value = logging.getLevelName(str(level).upper())
    if not isinstance(value, int):
        raise InvalidArgumentError(f"unknown log level {level!r}")
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("spinepatch")
    root.handlers[:] = [handler]
    root.setLevel(value)
    root.propagate = False


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _setup_logging(args.log_level)
        if args.jobs < 1:
            raise InvalidArgumentError(f"--jobs must be at least 1, got {args.jobs}")
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ImageIOError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

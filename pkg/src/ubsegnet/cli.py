"""Command-line entry point: ``ubsegnet {gen-data,train,detect,evaluate,replay}``.

Every command resolves its flags into a plain configuration dict, runs from
that dict alone, and writes a JSON manifest next to its outputs. ``replay``
feeds a manifest's resolved configuration back through the same runner, which
reproduces the outputs byte for byte.

Precedence: command-line flags, then ``--config`` JSON, then built-in presets.

Exit codes: 0 success, 1 invalid flags or configuration, 2 failure while running.
"""

from __future__ import annotations

import argparse
import hashlib
import importlib.resources
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import __version__
from .detector import DetectorConfig, ModelFormatError, detect, init_model, load_model, save_model
from .evaluation import DEFAULT_SLAP_OVERLAP, DEFAULT_STEP, DEFAULT_THRESHOLDS, EvaluationError, curves_svg, evaluate, load_pairs
from .synthdata import AnnotatedImage, AnnotationError, GenConfig, LabeledBox, generate, load_annotations, read_pgm, save_annotations
from .trainer import TrainConfig, TrainingError, train

log = logging.getLogger("ubsegnet")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
ANNOTATIONS = "annotations.tsv"
MANIFEST = "manifest.json"
PRESETS = ("desk", "full")


class UsageError(Exception):
    """Invalid flags or configuration (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def preset(name: str) -> dict:
    """Built-in configuration: ``desk`` (small, CPU-friendly) or ``full`` (full-width layers)."""
    if name == "full":
        return {"detector": DetectorConfig().to_dict(), "train": TrainConfig().to_dict()}
    if name != "desk":
        raise UsageError(f"unknown preset {name!r}; choose from {PRESETS}")
    text = importlib.resources.files("ubsegnet").joinpath("configs/desk.json").read_text(encoding="utf-8")
    return json.loads(text)


def _read_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must be a JSON object")
    return data


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(x) for x in text.lower().split("x"))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from exc
    return h, w


def _require_file(path: str, what: str) -> None:
    if not Path(path).is_file():
        raise UsageError(f"{what} not found: {path}")


def _writable_dir(path: Path) -> None:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {path}: {exc.strerror}") from exc
    if not os.access(path, os.W_OK):
        raise UsageError(f"output directory {path} is not writable")


def write_manifest(path: Path, command: str, config: dict, inputs: dict, outputs: Sequence[Path], started: float) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "config": config,
        "seed": config.get("seed"),
        "inputs": {k: {"path": str(v), "sha256": sha256_file(v)} for k, v in inputs.items()},
        "outputs": {str(p): sha256_file(p) for p in sorted(outputs)},
        "wall_time": round(time.time() - started, 3),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


def resolve_gen(args: argparse.Namespace) -> dict:
    cfg = _merge({"gen": {}}, _read_config(args.config))
    gen = dict(cfg["gen"])
    for key, val in (
        ("count", args.count),
        ("seed", args.seed),
        ("image_size", args.image_size),
        ("variable_size", args.variable_size),
        ("noise", args.noise),
    ):
        if val is not None:
            gen[key] = list(val) if isinstance(val, tuple) else val
    try:
        resolved = GenConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in gen.items()})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid generation config: {exc}") from exc
    g = json.loads(json.dumps(resolved.__dict__))
    return {"gen": g, "seed": resolved.seed, "out": str(args.out)}


def run_gen(cfg: dict) -> Path:
    out = Path(cfg["out"])
    _writable_dir(out)
    started = time.time()
    gen = GenConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in cfg["gen"].items()})
    data = generate(gen)
    save_annotations(data, out / ANNOTATIONS)
    outputs = [out / ANNOTATIONS] + [out / "images" / f"{d.image_id}.pgm" for d in data]
    write_manifest(out / MANIFEST, "gen-data", cfg, {}, outputs, started)
    log.info("wrote %d images to %s", len(data), out)
    return out / ANNOTATIONS


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def resolve_train(args: argparse.Namespace) -> dict:
    cfg = _merge(preset(args.preset), _read_config(args.config))
    unknown = set(cfg) - {"detector", "train", "seed"}
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    tr = dict(cfg.get("train", {}))
    if args.phases is not None:
        phases = [p for p in args.phases.split(",") if p]
        base = list(tr.get("phases", TrainConfig().phases))
        # per-phase values from the preset schedule follow their phase letter
        for key, flag in (("epochs", args.epochs), ("learning_rates", args.lr)):
            values = tr.get(key, getattr(TrainConfig(), key))
            if flag is None and len(values) != len(phases):
                table = dict(zip(base, values))
                if any(ph not in table for ph in phases):
                    raise UsageError(f"--phases {args.phases} needs explicit per-phase {key}")
                tr[key] = [table[ph] for ph in phases]
        tr["phases"] = phases
    if args.epochs is not None:
        tr["epochs"] = list(args.epochs)
    if args.lr is not None:
        tr["learning_rates"] = list(args.lr)
    if args.images_per_step is not None:
        tr["images_per_step"] = args.images_per_step
    seed = args.seed if args.seed is not None else cfg.get("seed", tr.get("seed", 0))
    tr["seed"] = seed
    try:
        det = DetectorConfig.from_dict(cfg.get("detector", {}))
        trc = TrainConfig.from_dict(tr)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from exc
    _require_file(args.data, "training annotations")
    out = Path(args.out)
    report = Path(args.report) if args.report else out.with_suffix(".losses.csv")
    return {
        "detector": det.to_dict(),
        "train": trc.to_dict(),
        "seed": seed,
        "data": str(args.data),
        "out": str(out),
        "report": str(report),
    }


def run_train(cfg: dict) -> Path:
    started = time.time()
    out, report = Path(cfg["out"]), Path(cfg["report"])
    for p in (out, report):
        _writable_dir(p.parent)
    data = load_annotations(cfg["data"])
    if any(d.pixels is None for d in data):
        raise UsageError("every training record needs an image path")
    det = DetectorConfig.from_dict(cfg["detector"])
    trc = TrainConfig.from_dict(cfg["train"])
    model = init_model(det, seed=cfg["seed"])
    initial = model.checksums()
    model, rep = train(model, data, trc)
    save_model(model, out)
    report.write_text(rep.to_csv(), encoding="utf-8")
    sums = out.with_suffix(".checksums.json")
    phases = [{"phase": ph, "before": b, "after": a} for ph, b, a in rep.phase_checksums]
    sums.write_text(json.dumps({"initial": initial, "phases": phases, "final": rep.checksums}, indent=2) + "\n", encoding="utf-8")
    write_manifest(
        out.with_suffix(".manifest.json"), "train", cfg, {"data": cfg["data"]}, [out, report, sums], started
    )
    log.info("saved model to %s (%d epochs logged)", out, len(rep.epochs))
    return out


# ---------------------------------------------------------------------------
# detect
# ---------------------------------------------------------------------------


def resolve_detect(args: argparse.Namespace) -> dict:
    _require_file(args.model, "model")
    if (args.data is None) == (not args.images):
        raise UsageError("give exactly one of --data or --images")
    if args.data is not None:
        _require_file(args.data, "annotation file")
    for p in args.images or ():
        _require_file(p, "image")
    if args.score_threshold is not None and not 0.0 <= args.score_threshold <= 1.0:
        raise UsageError("--score-threshold must be in [0, 1]")
    return {
        "model": str(args.model),
        "data": None if args.data is None else str(args.data),
        "images": [str(p) for p in args.images or ()],
        "out": str(args.out),
        "score_threshold": args.score_threshold,
        "overlays": None if args.overlays is None else str(args.overlays),
    }


def _detect_inputs(cfg: dict) -> list[tuple[str, Path]]:
    if cfg["data"] is not None:
        root = Path(cfg["data"]).parent
        items = load_annotations(cfg["data"], load_pixels=False)
        missing = [i.image_id for i in items if not i.image_path]
        if missing:
            raise UsageError(f"records without image paths: {missing[:3]}")
        return [(i.image_id, root / i.image_path) for i in items]
    seen: set[str] = set()
    out = []
    for p in map(Path, cfg["images"]):
        if p.stem in seen:
            raise UsageError(f"duplicate image id {p.stem!r}")
        seen.add(p.stem)
        out.append((p.stem, p))
    return out


def overlay_svg(pixels: np.ndarray, dets: Sequence[LabeledBox]) -> str:
    """Image with predicted boxes and score labels; rect attributes carry the exact coordinates."""
    import base64
    import io

    from PIL import Image

    h, w = pixels.shape
    buf = io.BytesIO()
    Image.fromarray(np.round(np.clip(pixels, 0, 1) * 255).astype(np.uint8), mode="L").save(buf, format="PNG")
    uri = "data:image/png;base64," + base64.b64encode(buf.getvalue()).decode("ascii")
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
        f'<image x="0" y="0" width="{w}" height="{h}" href="{uri}"/>',
    ]
    for d in dets:
        b = d.box
        coords = ",".join(repr(float(v)) for v in (b.x1, b.y1, b.x2, b.y2))
        parts.append(
            f'<rect x="{b.x1!r}" y="{b.y1!r}" width="{b.width!r}" height="{b.height!r}" data-box="{coords}" '
            f'data-label="{d.label}" data-score="{d.score!r}" fill="none" stroke="red" stroke-width="1"/>'
        )
        parts.append(f'<text x="{b.x1!r}" y="{max(b.y1 - 2, 8)!r}" font-size="8" fill="red">{d.label} {d.score:.3f}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def run_detect(cfg: dict) -> Path:
    started = time.time()
    out = Path(cfg["out"])
    _writable_dir(out.parent)
    try:
        model = load_model(cfg["model"])
    except OSError as exc:
        raise UsageError(f"cannot read model {cfg['model']}: {exc.strerror}") from exc
    overlays = None if cfg["overlays"] is None else Path(cfg["overlays"])
    if overlays is not None:
        _writable_dir(overlays)
    results, written = [], [out]
    for image_id, path in _detect_inputs(cfg):
        try:
            pixels = read_pgm(path)
        except (OSError, ValueError) as exc:
            raise RuntimeError(f"unreadable image {path}: {exc}") from exc
        dets = detect(model, pixels, cfg["score_threshold"])
        boxes = [LabeledBox(d.box, d.label, d.score) for d in dets]
        rel = os.path.relpath(path.resolve(), out.parent.resolve())
        results.append(AnnotatedImage(image_id, None, boxes, rel))
        if overlays is not None:
            svg = overlays / f"{image_id}.svg"
            svg.write_text(overlay_svg(pixels, boxes), encoding="utf-8")
            written.append(svg)
    save_annotations(results, out, write_images=False)
    write_manifest(out.with_suffix(".manifest.json"), "detect", cfg, {"model": cfg["model"]}, written, started)
    log.info("wrote predictions for %d images to %s", len(results), out)
    return out


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def resolve_evaluate(args: argparse.Namespace) -> dict:
    _require_file(args.predictions, "predictions")
    _require_file(args.ground_truth, "ground truth")
    thresholds = args.thresholds
    if not thresholds or any(not 0.0 < t <= 1.0 for t in thresholds):
        raise UsageError("thresholds must be in (0, 1]")
    if not 0.0 < args.slap_overlap <= 1.0:
        raise UsageError("--slap-overlap must be in (0, 1]")
    if args.curve_stride < 1:
        raise UsageError("--curve-stride must be >= 1")
    return {
        "predictions": str(args.predictions),
        "ground_truth": str(args.ground_truth),
        "out": str(args.out),
        "thresholds": list(thresholds),
        "slap_overlap": args.slap_overlap,
        "filter_slaps": not args.count_before_slap_filter,
        "bin_step": args.bin_step,
        "curve_stride": args.curve_stride,
    }


def run_evaluate(cfg: dict) -> Path:
    started = time.time()
    out = Path(cfg["out"])
    _writable_dir(out)
    try:
        pairs = load_pairs(cfg["predictions"], cfg["ground_truth"])
    except EvaluationError as exc:
        raise UsageError(str(exc)) from exc
    report = evaluate(
        pairs,
        thresholds=cfg["thresholds"],
        step=cfg["bin_step"],
        x_overlap_threshold=cfg["slap_overlap"],
        filter_slaps=cfg["filter_slaps"],
    )
    written = [out / "report.csv", out / "curves.svg"]
    (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    (out / "curves.svg").write_text(curves_svg(report.curves), encoding="utf-8")
    curve_dir = out / "curves"
    curve_dir.mkdir(exist_ok=True)
    for trait, curve in report.curves.items():
        p = curve_dir / f"{trait}.csv"
        p.write_text(curve.to_csv(cfg["curve_stride"]), encoding="utf-8")
        written.append(p)
    for trait in report.flagged:
        log.warning("trait %s has no ground-truth samples", trait)
    write_manifest(
        out / MANIFEST,
        "evaluate",
        cfg,
        {"predictions": cfg["predictions"], "ground_truth": cfg["ground_truth"]},
        written,
        started,
    )
    return out / "report.csv"


# ---------------------------------------------------------------------------
# replay
# ---------------------------------------------------------------------------

RUNNERS: dict[str, Callable[[dict], Path]] = {
    "gen-data": run_gen,
    "train": run_train,
    "detect": run_detect,
    "evaluate": run_evaluate,
}


def run_replay(path: str) -> Path:
    _require_file(path, "manifest")
    try:
        manifest = json.loads(Path(path).read_text(encoding="utf-8"))
        runner = RUNNERS[manifest["command"]]
        cfg = manifest["config"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise UsageError(f"{path} is not a run manifest") from exc
    return runner(cfg)


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ubsegnet", description="Synthetic biometric ROI detection: data, training, detection, evaluation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--out", required=True, type=Path, help="output directory")
    g.add_argument("--count", type=int, help="images per trait (default 40)")
    g.add_argument("--seed", type=int, help="generator seed (default 0)")
    g.add_argument("--image-size", type=_size, help="HxW, default 96x96")
    g.add_argument("--variable-size", type=_ints, help="MIN,MAX side length drawn per image")
    g.add_argument("--noise", type=float, help="pixel noise amplitude")
    g.add_argument("--config", help="JSON file with a 'gen' section")

    t = sub.add_parser("train", help="train a detector")
    t.add_argument("--data", required=True, help="training annotation file")
    t.add_argument("--out", required=True, help="model file to write")
    t.add_argument("--report", help="loss CSV path (default: <out>.losses.csv)")
    t.add_argument("--preset", choices=PRESETS, default="desk", help="built-in defaults (default: desk)")
    t.add_argument("--config", help="JSON file with 'detector', 'train' and 'seed' entries")
    t.add_argument("--phases", help="comma-separated subset of b,c,d,e (default b,c,d,e)")
    t.add_argument("--epochs", type=_ints, help="epochs per phase, comma-separated")
    t.add_argument("--lr", type=_floats, help="learning rate per phase, comma-separated")
    t.add_argument("--images-per-step", type=int)
    t.add_argument("--seed", type=int, help="initialisation and sampling seed")

    d = sub.add_parser("detect", help="run a trained detector")
    d.add_argument("--model", required=True)
    d.add_argument("--data", help="annotation file listing the images")
    d.add_argument("--images", nargs="*", help="PGM files; ids are the file stems")
    d.add_argument("--out", required=True, help="predictions file to write")
    d.add_argument("--score-threshold", type=float, help="override the model's score threshold")
    d.add_argument("--overlays", help="directory for per-image SVG overlays")

    e = sub.add_parser("evaluate", help="score predictions against ground truth")
    e.add_argument("--predictions", required=True)
    e.add_argument("--ground-truth", required=True)
    e.add_argument("--out", required=True, help="report directory")
    e.add_argument("--thresholds", type=_floats, default=DEFAULT_THRESHOLDS, help="IOU thresholds (default 0.35,0.5,0.65)")
    e.add_argument("--slap-overlap", type=float, default=DEFAULT_SLAP_OVERLAP, help="x-overlap ratio for stacked boxes")
    e.add_argument(
        "--count-before-slap-filter",
        action="store_true",
        help="precision denominator counts slap predictions before duplicate removal",
    )
    e.add_argument("--bin-step", type=float, default=DEFAULT_STEP, help="IOU histogram bin width")
    e.add_argument("--curve-stride", type=int, default=100, help="write every n-th curve bin (default 100)")

    r = sub.add_parser("replay", help="re-run a command from its manifest")
    r.add_argument("manifest")
    return p


RESOLVERS = {
    "gen-data": resolve_gen,
    "train": resolve_train,
    "detect": resolve_detect,
    "evaluate": resolve_evaluate,
}


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "replay":
            run_replay(args.manifest)
        else:
            RUNNERS[args.command](RESOLVERS[args.command](args))
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (AnnotationError, ModelFormatError, TrainingError, EvaluationError, RuntimeError, OSError, ValueError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Procedural multi-trait images with ground-truth boxes, plus their file format.

Each trait is a distinct texture placed on a noisy background:

* iris     concentric rings in a disk
* face     bright patch with a grid of dark blobs
* palm     broad diagonal stripes
* knuckle  short horizontal arcs
* finger   fine vertical ridges; slap images carry four adjacent patches

Pixels are quantized to 1/255 steps so the 8-bit PGM files written by
:func:`save_annotations` reload bit-exactly.

Annotation grammar (UTF-8, ``\\n`` line endings)::

    file    := header "\\n" { record "\\n" }
    header  := "#ubsegnet-annotations 1"
    record  := id TAB image_path TAB boxes
    boxes   := "" | box { ";" box }
    box     := x1 "," y1 "," x2 "," y2 "," label [ "," score ]

Coordinates and scores are written with Python ``repr`` so floats round-trip
exactly. ``image_path`` is relative to the annotation file's directory.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .boxes import Box

TRAITS = ("face", "iris", "palm", "knuckle", "finger")
SLAP_TRAIT = "finger"
HEADER = "#ubsegnet-annotations 1"
MAX_PLACEMENT_RETRIES = 50


class AnnotationError(ValueError):
    """Malformed annotation record; ``line`` is 1-based."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class LabeledBox:
    box: Box
    label: str
    score: float | None = None

    def __post_init__(self):
        if self.label not in TRAITS:
            raise ValueError(f"unknown trait label {self.label!r}")


@dataclass
class AnnotatedImage:
    image_id: str
    pixels: np.ndarray | None  # (H, W) grayscale in [0, 1]
    boxes: list[LabeledBox] = field(default_factory=list)
    image_path: str | None = None

    @property
    def trait(self) -> str | None:
        labels = {b.label for b in self.boxes}
        return labels.pop() if len(labels) == 1 else None


@dataclass(frozen=True)
class GenConfig:
    image_size: tuple[int, int] = (96, 96)  # (height, width)
    count: int = 40  # images per trait
    scale_jitter: float = 0.15
    position_jitter: float = 1.0  # fraction of the free margin used for placement
    noise: float = 0.06
    variable_size: tuple[int, int] | None = None  # e.g. (80, 128) draws each side per image
    seed: int = 0

    def __post_init__(self):
        if min(self.image_size) < 32:
            raise ValueError("image sides must be >= 32")
        if self.variable_size is not None and (self.variable_size[0] < 32 or self.variable_size[1] < self.variable_size[0]):
            raise ValueError("variable_size must be an ordered range with lower bound >= 32")
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if not 0 <= self.scale_jitter < 1 or not 0 <= self.position_jitter <= 1 or self.noise < 0:
            raise ValueError("jitter must lie in [0, 1) / [0, 1] and noise must be non-negative")


# nominal (width, height) as a fraction of the shorter image side
_NOMINAL = {
    "face": (0.54, 0.64),
    "iris": (0.40, 0.40),
    "palm": (0.60, 0.60),
    "knuckle": (0.54, 0.30),
    "finger": (0.19, 0.42),
}


def _texture(trait: str, w: int, h: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Return (values, alpha) arrays of shape (h, w)."""
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    u += 0.5
    v += 0.5
    alpha = np.ones((h, w))
    phase = rng.uniform(0, 2 * np.pi)
    if trait == "iris":
        r = np.hypot(u - w / 2, v - h / 2)
        radius = min(w, h) / 2
        tex = 0.28 + 0.16 * np.cos(2 * np.pi * r / 4.0 + phase)
        tex[r < radius * 0.3] = 0.05
        alpha = np.clip(radius - r + 0.5, 0, 1)
    elif trait == "face":
        period = rng.uniform(9, 11)
        blobs = np.cos(np.pi * (u - w / 2) / period * 2) * np.cos(np.pi * (v - h / 2) / period * 2)
        tex = 0.82 - 0.22 * np.clip(blobs, 0, None) ** 2
    elif trait == "palm":
        period = rng.uniform(9, 12)
        tex = 0.62 + 0.2 * np.sign(np.sin(2 * np.pi * (u + v) / period + phase))
    elif trait == "knuckle":
        period = rng.uniform(5, 6.5)
        radius = 3.0 * w
        d = np.hypot(u - w / 2, v - h / 2 + radius)
        arcs = np.cos(2 * np.pi * d / period + phase)
        envelope = np.cos(np.pi * (u - w / 2) / (w * 1.1))
        tex = 0.5 + 0.22 * arcs * envelope
    elif trait == "finger":
        tex = 0.38 + 0.18 * np.cos(2 * np.pi * u / 3.0 + phase)
    else:
        raise ValueError(f"unknown trait {trait!r}")
    return tex, alpha


def _sample_size(trait: str, side: int, cfg: GenConfig, rng: np.random.Generator) -> tuple[int, int]:
    fw, fh = _NOMINAL[trait]
    s = 1.0 + rng.uniform(-cfg.scale_jitter, cfg.scale_jitter)
    w = max(4, int(round(fw * side * s)))
    h = w if trait == "iris" else max(4, int(round(fh * side * s)))
    return w, h


def _place(extent: int, size: int, cfg: GenConfig, rng: np.random.Generator) -> int:
    free = extent - size - 2
    if free < 0:
        raise ValueError("object does not fit")
    mid = free / 2
    lo = mid - cfg.position_jitter * mid
    hi = mid + cfg.position_jitter * mid
    return 1 + int(round(rng.uniform(lo, hi)))


def _layout(trait: str, height: int, width: int, cfg: GenConfig, rng: np.random.Generator) -> list[tuple[int, int, int, int]]:
    side = min(height, width)
    for _ in range(MAX_PLACEMENT_RETRIES):
        try:
            if trait != SLAP_TRAIT:
                w, h = _sample_size(trait, side, cfg, rng)
                x, y = _place(width, w, cfg, rng), _place(height, h, cfg, rng)
                return [(x, y, x + w, y + h)]
            w, h = _sample_size(trait, side, cfg, rng)
            gaps = rng.integers(2, 6, size=3)
            widths = [max(4, w + int(rng.integers(-1, 2))) for _ in range(4)]
            total = sum(widths) + int(gaps.sum())
            lift = max(3, int(round(0.05 * side)))
            x0 = _place(width, total, cfg, rng)
            y0 = _place(height, h + lift, cfg, rng) + lift
            offsets = (lift // 2, lift, lift - 1, 0)
            out, x = [], x0
            for i, fwid in enumerate(widths):
                dy = offsets[i] + int(rng.integers(-1, 2))
                y = min(max(1, y0 - dy), height - h - 1)
                out.append((x, y, x + fwid, y + h))
                x += fwid + (int(gaps[i]) if i < 3 else 0)
            if out[-1][2] <= width - 1:
                return out
        except ValueError:
            continue
    raise ValueError(f"could not place a {trait} instance in a {height}x{width} image")


def _render(trait: str, height: int, width: int, cfg: GenConfig, rng: np.random.Generator):
    img = 0.5 + 0.08 * rng.standard_normal((height, width))
    boxes = _layout(trait, height, width, cfg, rng)
    for x1, y1, x2, y2 in boxes:
        tex, alpha = _texture(trait, x2 - x1, y2 - y1, rng)
        region = img[y1:y2, x1:x2]
        img[y1:y2, x1:x2] = alpha * tex + (1 - alpha) * region
    img += cfg.noise * rng.standard_normal((height, width))
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    labeled = [LabeledBox(Box(float(b[0]), float(b[1]), float(b[2]), float(b[3])), trait) for b in boxes]
    return img, labeled


def generate_one(index: int, cfg: GenConfig) -> AnnotatedImage:
    """Image ``index`` of the dataset; depends only on (cfg, index)."""
    rng = np.random.default_rng([cfg.seed, index])
    trait = TRAITS[index % len(TRAITS)]
    if cfg.variable_size is not None:
        lo, hi = cfg.variable_size
        height, width = int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1))
    else:
        height, width = cfg.image_size
    pixels, boxes = _render(trait, height, width, cfg, rng)
    return AnnotatedImage(f"{trait}_{index:05d}", pixels, boxes)


def generate(cfg: GenConfig) -> list[AnnotatedImage]:
    """``cfg.count`` images per trait, interleaved by trait."""
    return [generate_one(i, cfg) for i in range(cfg.count * len(TRAITS))]


# ---------------------------------------------------------------------------
# PGM
# ---------------------------------------------------------------------------


def write_pgm(path: str | os.PathLike, pixels: np.ndarray) -> None:
    data = np.round(np.clip(pixels, 0, 1) * 255.0).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    pos += 1
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    n = w * h * np.dtype(dtype).itemsize
    if len(raw) - pos < n:
        raise ValueError(f"{path}: truncated PGM pixel data")
    data = np.frombuffer(raw[pos : pos + n], dtype=dtype).reshape(h, w)
    return data.astype(np.float64) / maxval


# ---------------------------------------------------------------------------
# annotations
# ---------------------------------------------------------------------------


def format_record(item: AnnotatedImage) -> str:
    parts = []
    for lb in item.boxes:
        b = lb.box
        fields = [repr(float(b.x1)), repr(float(b.y1)), repr(float(b.x2)), repr(float(b.y2)), lb.label]
        if lb.score is not None:
            fields.append(repr(float(lb.score)))
        parts.append(",".join(fields))
    return f"{item.image_id}\t{item.image_path or ''}\t{';'.join(parts)}"


def parse_record(line: str, lineno: int | None = None) -> AnnotatedImage:
    cols = line.split("\t")
    if len(cols) != 3:
        raise AnnotationError(f"expected 3 tab-separated fields, got {len(cols)}", lineno)
    image_id, image_path, box_field = cols
    if not image_id:
        raise AnnotationError("empty image id", lineno)
    boxes = []
    for chunk in filter(None, box_field.split(";")):
        f = chunk.split(",")
        if len(f) not in (5, 6):
            raise AnnotationError(f"box {chunk!r} needs 5 or 6 comma-separated fields", lineno)
        label = f[4]
        if label not in TRAITS:
            raise AnnotationError(f"unknown label {label!r}", lineno)
        try:
            coords = [float(x) for x in f[:4]]
            score = float(f[5]) if len(f) == 6 else None
        except ValueError as exc:
            raise AnnotationError(f"bad number in box {chunk!r}", lineno) from exc
        try:
            box = Box(*coords)
        except ValueError as exc:
            raise AnnotationError(str(exc), lineno) from exc
        if score is not None and not 0.0 <= score <= 1.0:
            raise AnnotationError(f"score {score} outside [0, 1]", lineno)
        boxes.append(LabeledBox(box, label, score))
    return AnnotatedImage(image_id, None, boxes, image_path or None)


def save_annotations(
    dataset: Sequence[AnnotatedImage], path: str | os.PathLike, image_dir: str = "images", write_images: bool = True
) -> None:
    """Write the annotation file; pixels go to ``<dir>/<image_dir>/<id>.pgm``."""
    path = Path(path)
    root = path.parent
    lines = [HEADER]
    for item in dataset:
        rel = item.image_path
        if write_images and item.pixels is not None:
            rel = f"{image_dir}/{item.image_id}.pgm"
            (root / image_dir).mkdir(parents=True, exist_ok=True)
            write_pgm(root / rel, item.pixels)
        lines.append(format_record(AnnotatedImage(item.image_id, None, item.boxes, rel)))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_annotations(path: str | os.PathLike, load_pixels: bool = True) -> list[AnnotatedImage]:
    path = Path(path)
    text = path.read_text(encoding="utf-8").split("\n")
    if not text or text[0] != HEADER:
        raise AnnotationError(f"missing header {HEADER!r}", 1)
    items, seen = [], set()
    for lineno, line in enumerate(text[1:], start=2):
        if not line:
            continue
        item = parse_record(line, lineno)
        if item.image_id in seen:
            raise AnnotationError(f"duplicate image id {item.image_id!r}", lineno)
        seen.add(item.image_id)
        if load_pixels and item.image_path:
            item.pixels = read_pgm(path.parent / item.image_path)
        items.append(item)
    return items


def load_external_database(root: str | os.PathLike, trait: str) -> list[AnnotatedImage]:
    """Plug-in point for real biometric databases.

    A loader returns :class:`AnnotatedImage` items with grayscale pixels in
    [0, 1] and ``LabeledBox`` ground truth; everything downstream is agnostic
    to where the data came from. No public-database loaders ship here.
    """
    raise NotImplementedError(f"no loader registered for {trait!r} data under {root}")

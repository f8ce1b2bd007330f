"""Detection evaluation: IOU collection, accuracy-vs-IOU curves, precision and recall.

Accuracy at threshold ``t`` is the fraction of ground-truth boxes whose
evaluated prediction reaches IOU ``>= t``. It is computed from a histogram of
IOUs at a fixed bin step as ``1 - cdf + pdf``, which makes the threshold
inclusive, so accuracy at 0 is always 1.

Two IOU collection procedures exist:

* single-box traits use the highest-scoring prediction of the gt's class;
* slap traits first drop vertically stacked duplicates (:func:`slap_filter`)
  and then pair each gt with the nearest same-class prediction by center
  distance (:func:`match_boxes`).

A missing prediction contributes IOU 0.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .boxes import Box, Detection, iou
from .synthdata import SLAP_TRAIT, TRAITS, AnnotatedImage, LabeledBox, load_annotations

DEFAULT_THRESHOLDS = (0.35, 0.5, 0.65)
DEFAULT_STEP = 1e-5
DEFAULT_SLAP_OVERLAP = 0.5
ALL = "all"
METRICS = ("accuracy", "precision", "recall")


class EvaluationError(ValueError):
    pass


@dataclass
class EvalPair:
    image_id: str
    predictions: Sequence[Detection]
    ground_truths: Sequence[LabeledBox]


@dataclass
class Correspondence:
    """``matches[i]`` is the prediction index paired with gt ``i`` (or None)."""

    matches: list[int | None]
    ious: list[float]


# ---------------------------------------------------------------------------
# matching and filtering
# ---------------------------------------------------------------------------


def _center_distance(a: Box, b: Box) -> float:
    (ax, ay), (bx, by) = a.center, b.center
    return math.hypot(ax - bx, ay - by)


def match_boxes(preds: Sequence[Detection], gts: Sequence[LabeledBox]) -> Correspondence:
    """Pair gts with same-class predictions by center distance, each prediction at most once.

    Greedy over all (gt, prediction) pairs in ascending distance; ties go to
    the lower gt index, then the lower prediction index.
    """
    pairs = sorted(
        (_center_distance(g.box, p.box), gi, pi)
        for gi, g in enumerate(gts)
        for pi, p in enumerate(preds)
        if p.label == g.label
    )
    matches: list[int | None] = [None] * len(gts)
    used: set[int] = set()
    for _, gi, pi in pairs:
        if matches[gi] is None and pi not in used:
            matches[gi] = pi
            used.add(pi)
    ious = [0.0 if m is None else iou(preds[m].box, g.box) for m, g in zip(matches, gts)]
    return Correspondence(matches, ious)


def x_overlap_ratio(a: Box, b: Box) -> float:
    """Length of the x-interval overlap divided by the narrower width."""
    overlap = min(a.x2, b.x2) - max(a.x1, b.x1)
    return max(overlap, 0.0) / min(a.width, b.width)


def slap_filter(preds: Sequence[Detection], x_overlap_threshold: float = DEFAULT_SLAP_OVERLAP) -> list[Detection]:
    """Drop the lower box of every pair whose x-projections overlap by more than the threshold.

    Pairs are judged on the input set, so a box below a stacked pair goes
    even when the box directly above it is itself dropped. Equal centers
    drop the box that comes later in descending-score order (stable). The
    survivors are returned in input order.
    """
    if not 0.0 < x_overlap_threshold <= 1.0:
        raise ValueError("x_overlap_threshold must be in (0, 1]")
    rank = {i: r for r, i in enumerate(sorted(range(len(preds)), key=lambda i: -preds[i].score))}
    key = [(preds[i].box.center[1], rank[i]) for i in range(len(preds))]
    dropped = set()
    for i, j in itertools.combinations(range(len(preds)), 2):
        if x_overlap_ratio(preds[i].box, preds[j].box) > x_overlap_threshold:
            dropped.add(i if key[i] > key[j] else j)
    return [p for i, p in enumerate(preds) if i not in dropped]


# ---------------------------------------------------------------------------
# per-image evaluation sets
# ---------------------------------------------------------------------------


def _is_slap(pair: EvalPair, slap_traits: frozenset[str]) -> bool:
    return any(g.label in slap_traits for g in pair.ground_truths)


def evaluated_predictions(
    pair: EvalPair,
    slap_traits: Iterable[str] = (SLAP_TRAIT,),
    x_overlap_threshold: float = DEFAULT_SLAP_OVERLAP,
    filter_slaps: bool = True,
) -> list[Detection]:
    """The predictions an image is scored on for precision.

    Slap images keep every prediction that survives :func:`slap_filter`
    (or all of them when ``filter_slaps`` is False). Other images keep the
    top-scoring prediction per gt box.
    """
    slap = frozenset(slap_traits)
    preds = list(pair.predictions)
    if _is_slap(pair, slap):
        return slap_filter(preds, x_overlap_threshold) if filter_slaps else preds
    ranked = sorted(range(len(preds)), key=lambda i: -preds[i].score)
    return [preds[i] for i in sorted(ranked[: len(pair.ground_truths)])]


def collect_ious(
    pairs: Sequence[EvalPair],
    slap_traits: Iterable[str] = (SLAP_TRAIT,),
    x_overlap_threshold: float = DEFAULT_SLAP_OVERLAP,
) -> list[tuple[str, float]]:
    """One (trait, IOU) per ground-truth box, in pair order."""
    slap = frozenset(slap_traits)
    out: list[tuple[str, float]] = []
    for pair in pairs:
        stacked = [g for g in pair.ground_truths if g.label in slap]
        filtered = slap_filter(pair.predictions, x_overlap_threshold) if stacked else []
        corr = match_boxes(filtered, stacked)
        slap_iou = iter(corr.ious)
        for g in pair.ground_truths:
            if g.label in slap:
                out.append((g.label, next(slap_iou)))
                continue
            cands = [p for p in pair.predictions if p.label == g.label]
            best = max(cands, key=lambda p: p.score, default=None)
            out.append((g.label, 0.0 if best is None else iou(best.box, g.box)))
    return out


# ---------------------------------------------------------------------------
# accuracy curve
# ---------------------------------------------------------------------------


def _bin_count(step: float) -> int:
    n = int(round(1.0 / step))
    if n < 1 or not math.isclose(n * step, 1.0, rel_tol=1e-9):
        raise ValueError(f"bin step {step} must divide 1")
    return n


def bin_index(value: float | np.ndarray, n: int) -> np.ndarray:
    """Largest ``k`` with ``k / n <= value``, robust to float rounding."""
    v = np.asarray(value, dtype=np.float64)
    k = np.floor(v * n).astype(np.int64)
    k = np.where(k / n > v, k - 1, k)
    k = np.where((k + 1) / n <= v, k + 1, k)
    return np.clip(k, 0, n)


@dataclass
class AccuracyCurve:
    step: float
    counts: np.ndarray  # (n + 1,) histogram, bin k covers [k*step, (k+1)*step)
    pdf: np.ndarray
    cdf: np.ndarray
    accuracy: np.ndarray

    @property
    def samples(self) -> int:
        return int(self.counts.sum())

    @property
    def thresholds(self) -> np.ndarray:
        return np.arange(len(self.counts)) / (len(self.counts) - 1)

    def at(self, threshold: float) -> float:
        if not 0.0 <= threshold <= 1.0:
            raise ValueError("threshold must be in [0, 1]")
        return float(self.accuracy[int(bin_index(threshold, len(self.counts) - 1))])

    def to_csv(self, stride: int = 1) -> str:
        if stride < 1:
            raise ValueError("stride must be >= 1")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["threshold", "accuracy"])
        idx = np.arange(0, len(self.counts), stride)
        if idx[-1] != len(self.counts) - 1:
            idx = np.append(idx, len(self.counts) - 1)
        t = self.thresholds
        for k in idx:
            w.writerow([repr(float(t[k])), repr(float(self.accuracy[k]))])
        return buf.getvalue()


def accuracy_curve(ious: Sequence[float] | np.ndarray, step: float = DEFAULT_STEP) -> AccuracyCurve:
    """Histogram IOUs at ``step`` and derive ``accuracy = 1 - cdf + pdf`` per bin."""
    v = np.asarray(ious, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise EvaluationError("accuracy curve needs at least one IOU")
    if not np.all(np.isfinite(v)) or v.min() < 0.0 or v.max() > 1.0:
        raise EvaluationError("IOUs must lie in [0, 1]")
    n = _bin_count(step)
    counts = np.bincount(bin_index(v, n), minlength=n + 1)
    cum = np.cumsum(counts)
    total = v.size
    pdf = counts / total
    cdf = cum / total
    # integer numerator keeps accuracy exactly 1 at bin 0 and monotone
    accuracy = (total - cum + counts) / total
    return AccuracyCurve(step, counts, pdf, cdf, accuracy)


# ---------------------------------------------------------------------------
# precision / recall
# ---------------------------------------------------------------------------


def _ratio(num: int, den: int, empty: float) -> float:
    return num / den if den else empty


@dataclass
class Counts:
    correct: int = 0
    predicted: int = 0
    gts: int = 0

    @property
    def precision(self) -> float:
        return _ratio(self.correct, self.predicted, 1.0 if self.gts == 0 else 0.0)

    @property
    def recall(self) -> float:
        return _ratio(self.correct, self.gts, 1.0)


def pr_counts(
    pairs: Sequence[EvalPair],
    iou_threshold: float,
    slap_traits: Iterable[str] = (SLAP_TRAIT,),
    x_overlap_threshold: float = DEFAULT_SLAP_OVERLAP,
    filter_slaps: bool = True,
) -> dict[str, Counts]:
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError("iou_threshold must be in (0, 1]")
    slap = tuple(slap_traits)
    out: dict[str, Counts] = {t: Counts() for t in (*TRAITS, ALL)}

    def bucket(label: str) -> Counts:
        return out.setdefault(label, Counts())

    for pair in pairs:
        preds = evaluated_predictions(pair, slap, x_overlap_threshold, filter_slaps)
        corr = match_boxes(preds, pair.ground_truths)
        for p in preds:
            bucket(p.label).predicted += 1
            out[ALL].predicted += 1
        for g, m, v in zip(pair.ground_truths, corr.matches, corr.ious):
            bucket(g.label).gts += 1
            out[ALL].gts += 1
            if m is not None and v >= iou_threshold:
                bucket(g.label).correct += 1
                out[ALL].correct += 1
    return out


def precision_recall(
    pairs: Sequence[EvalPair],
    iou_threshold: float,
    slap_traits: Iterable[str] = (SLAP_TRAIT,),
    x_overlap_threshold: float = DEFAULT_SLAP_OVERLAP,
    filter_slaps: bool = True,
) -> dict[str, tuple[float, float]]:
    """(precision, recall) per trait and under ``"all"``.

    A prediction is correct when matched to a same-class gt at IOU
    ``>= iou_threshold``. Matched predictions share the gt's class, so the
    per-trait split of correct counts is the same for both ratios.
    ``filter_slaps=False`` counts slap predictions before duplicate removal.
    """
    counts = pr_counts(pairs, iou_threshold, slap_traits, x_overlap_threshold, filter_slaps)
    return {k: (c.precision, c.recall) for k, c in counts.items()}


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


@dataclass
class TraitRow:
    trait: str
    samples: int  # gt boxes
    predictions: int
    # metric -> threshold -> value; empty when the trait has no samples
    cells: dict[str, dict[float, float]] = field(default_factory=dict)

    @property
    def flagged(self) -> bool:
        return self.samples == 0


@dataclass
class EvalReport:
    thresholds: tuple[float, ...]
    rows: list[TraitRow]
    curves: dict[str, AccuracyCurve]

    def row(self, trait: str) -> TraitRow:
        for r in self.rows:
            if r.trait == trait:
                return r
        raise KeyError(trait)

    def cell(self, trait: str, metric: str, threshold: float) -> float:
        return self.row(trait).cells[metric][threshold]

    @property
    def flagged(self) -> list[str]:
        return [r.trait for r in self.rows if r.flagged]

    def columns(self) -> list[str]:
        return [f"{m}@{t:g}" for t in self.thresholds for m in METRICS]

    def to_csv(self) -> str:
        """One row per trait plus ``all``; empty cells and a ``no-samples`` flag for absent traits."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["trait", "samples", "predictions", *self.columns(), "flag"])
        for r in self.rows:
            vals = []
            for t in self.thresholds:
                for m in METRICS:
                    vals.append("" if r.flagged else f"{r.cells[m][t]:.6f}")
            w.writerow([r.trait, r.samples, r.predictions, *vals, "no-samples" if r.flagged else ""])
        return buf.getvalue()


def evaluate(
    pairs: Sequence[EvalPair],
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    step: float = DEFAULT_STEP,
    slap_traits: Iterable[str] = (SLAP_TRAIT,),
    x_overlap_threshold: float = DEFAULT_SLAP_OVERLAP,
    filter_slaps: bool = True,
) -> EvalReport:
    if not pairs:
        raise EvaluationError("nothing to evaluate")
    ids = [p.image_id for p in pairs]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise EvaluationError(f"duplicate image ids: {dup[:5]}")
    thresholds = tuple(float(t) for t in thresholds)
    slap = tuple(slap_traits)
    samples = collect_ious(pairs, slap, x_overlap_threshold)
    by_trait: dict[str, list[float]] = {t: [] for t in TRAITS}
    for trait, v in samples:
        by_trait.setdefault(trait, []).append(v)
    by_trait[ALL] = [v for _, v in samples]
    pr = {t: pr_counts(pairs, t, slap, x_overlap_threshold, filter_slaps) for t in thresholds}

    rows, curves = [], {}
    for trait, values in by_trait.items():
        row = TraitRow(trait, len(values), pr[thresholds[0]][trait].predicted if thresholds else 0)
        if values:
            curve = accuracy_curve(values, step)
            curves[trait] = curve
            row.cells = {
                "accuracy": {t: curve.at(t) for t in thresholds},
                "precision": {t: pr[t][trait].precision for t in thresholds},
                "recall": {t: pr[t][trait].recall for t in thresholds},
            }
        rows.append(row)
    return EvalReport(thresholds, rows, curves)


# ---------------------------------------------------------------------------
# file ingestion
# ---------------------------------------------------------------------------


def as_detections(boxes: Sequence[LabeledBox]) -> list[Detection]:
    """Scoreless boxes (plain ground truth) count as score 1."""
    return [Detection(b.box, b.label, 1.0 if b.score is None else b.score) for b in boxes]


def pairs_from_images(predictions: Sequence[AnnotatedImage], ground_truth: Sequence[AnnotatedImage]) -> list[EvalPair]:
    """Join by image id in ground-truth order; both sides must cover the same ids."""
    pred = {p.image_id: p for p in predictions}
    gt_ids = [g.image_id for g in ground_truth]
    missing = [i for i in gt_ids if i not in pred]
    extra = sorted(set(pred) - set(gt_ids))
    if missing or extra:
        raise EvaluationError(f"id mismatch: {len(missing)} without predictions {missing[:3]}, {len(extra)} unknown {extra[:3]}")
    return [EvalPair(g.image_id, as_detections(pred[g.image_id].boxes), list(g.boxes)) for g in ground_truth]


def load_pairs(predictions_path: str | os.PathLike, ground_truth_path: str | os.PathLike) -> list[EvalPair]:
    return pairs_from_images(
        load_annotations(predictions_path, load_pixels=False),
        load_annotations(ground_truth_path, load_pixels=False),
    )


# ---------------------------------------------------------------------------
# plots
# ---------------------------------------------------------------------------

_PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#000000")


def curves_svg(curves: Mapping[str, AccuracyCurve], width: int = 480, height: int = 320, points: int = 200) -> str:
    """Standalone SVG line plot of accuracy against IOU threshold."""
    left, right, top, bottom = 50, 110, 20, 40
    pw, ph = width - left - right, height - top - bottom

    def xy(t: float, a: float) -> str:
        return f"{left + t * pw:.2f},{top + (1 - a) * ph:.2f}"

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#888"/>',
    ]
    for i in range(6):
        v = i / 5
        parts.append(f'<text x="{left + v * pw:.1f}" y="{top + ph + 15}" font-size="10" text-anchor="middle">{v:.1f}</text>')
        parts.append(f'<text x="{left - 5}" y="{top + (1 - v) * ph + 3:.1f}" font-size="10" text-anchor="end">{v:.1f}</text>')
    parts.append(f'<text x="{left + pw / 2}" y="{height - 8}" font-size="11" text-anchor="middle">IOU threshold</text>')
    parts.append(
        f'<text x="14" y="{top + ph / 2}" font-size="11" text-anchor="middle" transform="rotate(-90 14 {top + ph / 2})">accuracy</text>'
    )
    for n, (name, curve) in enumerate(curves.items()):
        colour = _PALETTE[n % len(_PALETTE)]
        bins = len(curve.counts) - 1
        idx = np.unique(np.linspace(0, bins, points + 1).round().astype(int))
        path = " ".join(xy(k / bins, float(curve.accuracy[k])) for k in idx)
        parts.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{path}"/>')
        ly = top + 12 + 16 * n
        parts.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 28}" y2="{ly}" stroke="{colour}" stroke-width="2"/>')
        parts.append(f'<text x="{left + pw + 32}" y="{ly + 4}" font-size="11">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"

"""Bounding-box geometry: IOU, anchors, delta coding, NMS and anchor assignment.

Boxes are corner-encoded ``(x1, y1, x2, y2)`` in pixel coordinates. The
vectorized helpers operate on ``(N, 4)`` float64 arrays; :class:`Box` is the
validated scalar form used at API boundaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DEFAULT_SCALES = (16.0, 32.0, 64.0)
DEFAULT_RATIOS = (0.5, 1.0, 2.0)
DELTA_CLAMP = 4.0


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates {coords}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"degenerate box {coords}: need x2 > x1 and y2 > y1")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "Box":
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))


@dataclass(frozen=True)
class BoxDelta:
    tx: float
    ty: float
    tw: float
    th: float

    def as_array(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tw, self.th], dtype=np.float64)


@dataclass(frozen=True)
class Detection:
    box: Box
    label: str
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


def boxes_to_array(boxes: Sequence[Box]) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 4))
    return np.array([[b.x1, b.y1, b.x2, b.y2] for b in boxes], dtype=np.float64)


# ---------------------------------------------------------------------------
# IOU
# ---------------------------------------------------------------------------


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IOU between (N, 4) and (M, 4) arrays -> (N, M)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0)


# ---------------------------------------------------------------------------
# anchors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AnchorGrid:
    """Anchors tiled over a feature map.

    Ordering is row-major over cells, then scale, then ratio, which matches
    the channel layout ``k = scale_index * len(ratios) + ratio_index`` of the
    RPN outputs.
    """

    fm_height: int
    fm_width: int
    stride: float
    scales: tuple[float, ...]
    ratios: tuple[float, ...]
    anchors: np.ndarray = field(repr=False, compare=False)

    @property
    def per_cell(self) -> int:
        return len(self.scales) * len(self.ratios)

    def __len__(self) -> int:
        return self.anchors.shape[0]

    def boxes(self) -> list[Box]:
        return [Box.from_array(a) for a in self.anchors]


def anchor_shapes(scales: Sequence[float], ratios: Sequence[float]) -> np.ndarray:
    """(K, 2) widths and heights; ratio is height/width and area is scale**2."""
    shapes = []
    for s in scales:
        for r in ratios:
            shapes.append((s / math.sqrt(r), s * math.sqrt(r)))
    return np.array(shapes, dtype=np.float64)


def generate_anchors(
    fm_height: int,
    fm_width: int,
    stride: float,
    scales: Sequence[float] = DEFAULT_SCALES,
    ratios: Sequence[float] = DEFAULT_RATIOS,
) -> AnchorGrid:
    if fm_height <= 0 or fm_width <= 0 or stride <= 0:
        raise ValueError("feature map extents and stride must be positive")
    if len(scales) == 0 or len(ratios) == 0:
        raise ValueError("need at least one scale and one ratio")
    if any(s <= 0 for s in scales) or any(r <= 0 for r in ratios):
        raise ValueError("scales and ratios must be positive")
    wh = anchor_shapes(scales, ratios)
    cy, cx = np.meshgrid(
        (np.arange(fm_height) + 0.5) * stride, (np.arange(fm_width) + 0.5) * stride, indexing="ij"
    )
    centers = np.stack([cx.ravel(), cy.ravel()], axis=1)  # (HW, 2)
    c = centers[:, None, :]
    half = 0.5 * wh[None, :, :]
    anchors = np.concatenate([c - half, c + half], axis=2).reshape(-1, 4)
    return AnchorGrid(
        int(fm_height), int(fm_width), float(stride), tuple(map(float, scales)), tuple(map(float, ratios)), anchors
    )


# ---------------------------------------------------------------------------
# delta coding
# ---------------------------------------------------------------------------


def _center_form(b: np.ndarray) -> tuple[np.ndarray, ...]:
    w = b[..., 2] - b[..., 0]
    h = b[..., 3] - b[..., 1]
    return b[..., 0] + 0.5 * w, b[..., 1] + 0.5 * h, w, h


def encode_boxes(gt: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Center/log-size offsets of ``gt`` relative to ``anchors``, both (N, 4)."""
    gx, gy, gw, gh = _center_form(np.asarray(gt, dtype=np.float64))
    ax, ay, aw, ah = _center_form(np.asarray(anchors, dtype=np.float64))
    return np.stack([(gx - ax) / aw, (gy - ay) / ah, np.log(gw / aw), np.log(gh / ah)], axis=-1)


def decode_boxes(deltas: np.ndarray, anchors: np.ndarray, clamp: float = DELTA_CLAMP) -> np.ndarray:
    d = np.asarray(deltas, dtype=np.float64)
    ax, ay, aw, ah = _center_form(np.asarray(anchors, dtype=np.float64))
    cx = ax + d[..., 0] * aw
    cy = ay + d[..., 1] * ah
    w = aw * np.exp(np.clip(d[..., 2], -clamp, clamp))
    h = ah * np.exp(np.clip(d[..., 3], -clamp, clamp))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)


def encode(gt: Box, anchor: Box) -> BoxDelta:
    return BoxDelta(*map(float, encode_boxes(gt.as_array(), anchor.as_array())))


def decode(delta: BoxDelta, anchor: Box, clamp: float = DELTA_CLAMP) -> Box:
    return Box.from_array(decode_boxes(delta.as_array(), anchor.as_array(), clamp))


def clip_boxes(boxes: np.ndarray, width: float, height: float) -> np.ndarray:
    out = np.array(boxes, dtype=np.float64, copy=True)
    out[..., 0::2] = np.clip(out[..., 0::2], 0.0, width)
    out[..., 1::2] = np.clip(out[..., 1::2], 0.0, height)
    return out


# ---------------------------------------------------------------------------
# NMS
# ---------------------------------------------------------------------------


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy NMS; returns kept indices in descending score order (ties by input order)."""
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError("iou_threshold must be in (0, 1]")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    suppressed = np.zeros(len(order), dtype=bool)
    ious = iou_matrix(boxes[order], boxes[order])
    keep = []
    for i in range(len(order)):
        if suppressed[i]:
            continue
        keep.append(order[i])
        suppressed[i + 1 :] |= ious[i, i + 1 :] > iou_threshold
    return np.array(keep, dtype=np.intp)


def nms(dets: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    if len(dets) == 0:
        if not 0.0 < iou_threshold <= 1.0:
            raise ValueError("iou_threshold must be in (0, 1]")
        return []
    keep = nms_indices(boxes_to_array([d.box for d in dets]), np.array([d.score for d in dets]), iou_threshold)
    return [dets[i] for i in keep]


# ---------------------------------------------------------------------------
# anchor assignment
# ---------------------------------------------------------------------------

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1


@dataclass
class Assignment:
    labels: np.ndarray  # (A,) in {POSITIVE, NEGATIVE, IGNORE}
    gt_index: np.ndarray  # (A,) gt index for positives, -1 elsewhere
    targets: np.ndarray  # (A, 4) encode(gt, anchor) for positives, 0 elsewhere
    max_iou: np.ndarray  # (A,)

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.labels == POSITIVE)

    @property
    def negatives(self) -> np.ndarray:
        return np.flatnonzero(self.labels == NEGATIVE)


def assign_anchors(
    grid: AnchorGrid | np.ndarray,
    gts: Sequence[Box] | np.ndarray,
    pos_threshold: float = 0.7,
    neg_threshold: float = 0.3,
) -> Assignment:
    """Label anchors positive / negative / ignore against ground-truth boxes.

    Every gt gets at least one positive: its best anchor is forced positive
    even below ``pos_threshold``. When two gts share a best anchor the later
    gt falls back to its next-best unclaimed anchor.
    """
    if pos_threshold <= neg_threshold:
        raise ValueError("pos_threshold must exceed neg_threshold")
    anchors = grid.anchors if isinstance(grid, AnchorGrid) else np.asarray(grid, dtype=np.float64)
    gt = gts if isinstance(gts, np.ndarray) else boxes_to_array(list(gts))
    gt = gt.reshape(-1, 4)
    n_anchor = anchors.shape[0]
    labels = np.full(n_anchor, IGNORE, dtype=np.int64)
    gt_index = np.full(n_anchor, -1, dtype=np.int64)
    targets = np.zeros((n_anchor, 4))
    if gt.shape[0] == 0:
        labels[:] = NEGATIVE
        return Assignment(labels, gt_index, targets, np.zeros(n_anchor))

    ious = iou_matrix(anchors, gt)  # (A, G)
    best_gt = ious.argmax(axis=1)
    max_iou = ious[np.arange(n_anchor), best_gt]
    labels[max_iou < neg_threshold] = NEGATIVE
    pos = max_iou >= pos_threshold
    labels[pos] = POSITIVE
    gt_index[pos] = best_gt[pos]

    claimed: set[int] = set()
    for g in range(gt.shape[0]):
        for a in np.argsort(-ious[:, g], kind="stable"):
            if int(a) not in claimed:
                claimed.add(int(a))
                labels[a] = POSITIVE
                gt_index[a] = g
                break

    p = labels == POSITIVE
    targets[p] = encode_boxes(gt[gt_index[p]], anchors[p])
    return Assignment(labels, gt_index, targets, max_iou)

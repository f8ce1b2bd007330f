"""Alternating four-phase training with frozen shared layers in the later phases.

Phases:

* ``b``  backbone + RPN, driven by the RPN losses
* ``c``  backbone + heads, driven by the head losses on RPN proposals
* ``d``  RPN only (backbone frozen)
* ``e``  heads only (backbone and RPN frozen)

Every step evaluates all four losses, RPN first, so each epoch logs them all;
only the active phase's losses are back-propagated. Frozen components run in
eval mode so their batchnorm statistics do not move either.

Running batchnorm statistics lag the weights they summarize, so each phase
re-estimates them for its trainable components with a no-gradient pass over
the data: after training when those layers ran on batch statistics, before
training when they run frozen (the statistics then stay fixed for the phase).
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tape, Tensor
from .boxes import AnchorGrid, assign_anchors, boxes_to_array, encode_boxes, iou_matrix
from .detector import (
    CLASSES,
    DetectorModel,
    anchor_grid_for,
    backbone_forward,
    flatten_rpn_tensors,
    heads_forward,
    propose_arrays,
    roi_pool,
    rpn_forward,
)
from .synthdata import AnnotatedImage

log = logging.getLogger(__name__)

PHASES = ("b", "c", "d", "e")
TRAINABLE = {"b": ("backbone", "rpn"), "c": ("backbone", "heads"), "d": ("rpn",), "e": ("heads",)}
LOSS_NAMES = ("rpn_cls", "rpn_reg", "head_cls", "head_reg")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    phases: tuple[str, ...] = PHASES
    epochs: tuple[int, ...] = (6, 6, 3, 3)
    learning_rates: tuple[float, ...] = (0.02, 0.02, 0.01, 0.01)
    rpn_batch_size: int = 32
    rpn_positive_fraction: float = 0.5
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    roi_batch_size: int = 16
    roi_fg_fraction: float = 0.5
    roi_fg_iou: float = 0.5
    add_gt_proposals: bool = True
    images_per_step: int = 1
    # phases whose trainable batchnorm layers run on frozen running statistics
    frozen_bn_phases: tuple[str, ...] = ("d", "e")
    bn_recalibration: bool = True
    loss_weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    shuffle: bool = True
    seed: int = 0

    def __post_init__(self):
        if any(p not in PHASES for p in self.phases):
            raise ValueError(f"phases must be drawn from {PHASES}")
        if len(self.epochs) != len(self.phases) or len(self.learning_rates) != len(self.phases):
            raise ValueError("epochs and learning_rates need one entry per phase")
        if any(e < 0 for e in self.epochs) or any(lr < 0 for lr in self.learning_rates):
            raise ValueError("epochs and learning rates must be non-negative")
        if len(self.loss_weights) != 4 or any(w <= 0 for w in self.loss_weights):
            raise ValueError("need four positive loss weights")
        if self.images_per_step < 1:
            raise ValueError("images_per_step must be >= 1")
        if any(p not in PHASES for p in self.frozen_bn_phases):
            raise ValueError(f"frozen_bn_phases must be drawn from {PHASES}")
        if not 0 < self.rpn_positive_fraction <= 1 or not 0 < self.roi_fg_fraction <= 1:
            raise ValueError("sampling fractions must be in (0, 1]")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    rpn_cls: float
    rpn_reg: float
    head_cls: float
    head_reg: float
    wall_time: float

    @property
    def total(self) -> float:
        return self.rpn_cls + self.rpn_reg + self.head_cls + self.head_reg


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    phase_times: list[tuple[str, float]] = field(default_factory=list)
    checksums: dict[str, str] = field(default_factory=dict)
    # per phase entry: component checksums before and after
    phase_checksums: list[tuple[str, dict[str, str], dict[str, str]]] = field(default_factory=list)

    def losses(self, name: str) -> list[float]:
        return [getattr(r, name) for r in self.epochs]

    def totals(self) -> list[float]:
        return [r.total for r in self.epochs]

    def to_csv(self, include_time: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ["epoch", "phase", *LOSS_NAMES] + (["wall_time"] if include_time else [])
        w.writerow(cols)
        for r in self.epochs:
            row = [r.epoch, r.phase] + [repr(getattr(r, n)) for n in LOSS_NAMES]
            if include_time:
                row.append(f"{r.wall_time:.3f}")
            w.writerow(row)
        return buf.getvalue()

    def extend(self, other: "TrainReport") -> None:
        offset = len(self.epochs)
        for r in other.epochs:
            self.epochs.append(EpochRecord(**{**asdict(r), "epoch": r.epoch + offset}))
        self.phase_times.extend(other.phase_times)
        self.phase_checksums.extend(other.phase_checksums)
        self.checksums = dict(other.checksums)


# ---------------------------------------------------------------------------
# targets and losses
# ---------------------------------------------------------------------------


@dataclass
class RpnTargets:
    labels: np.ndarray  # (A,) 1 positive, 0 negative, -1 ignore
    deltas: np.ndarray  # (A, 4)
    sampled: np.ndarray  # anchor indices, positives first

    @property
    def sampled_labels(self) -> np.ndarray:
        return self.labels[self.sampled]

    @property
    def sampled_positives(self) -> np.ndarray:
        return self.sampled[self.labels[self.sampled] == 1]


def rpn_targets(grid: AnchorGrid, gts, cfg: TrainConfig, rng: np.random.Generator) -> RpnTargets:
    a = assign_anchors(grid, gts, cfg.rpn_pos_iou, cfg.rpn_neg_iou)
    pos, neg = a.positives, a.negatives
    n_pos = min(len(pos), int(round(cfg.rpn_batch_size * cfg.rpn_positive_fraction)))
    pos = np.sort(rng.permutation(pos)[:n_pos]) if n_pos else pos[:0]
    n_neg = min(len(neg), cfg.rpn_batch_size - len(pos))
    neg = np.sort(rng.permutation(neg)[:n_neg]) if n_neg else neg[:0]
    return RpnTargets(a.labels, a.targets, np.concatenate([pos, neg]).astype(np.intp))


def _zero() -> Tensor:
    return Tensor(np.array(0.0))


def rpn_loss(objectness: Tensor, deltas: Tensor, targets: RpnTargets) -> tuple[Tensor, Tensor]:
    """(BCE over sampled anchors, MSE over sampled positives)."""
    scores, d = flatten_rpn_tensors(objectness, deltas)
    if targets.sampled.size == 0:
        return _zero(), _zero()
    cls = ag.loss_bce(ag.take(scores, targets.sampled), targets.sampled_labels.astype(np.float64))
    pos = targets.sampled_positives
    if pos.size == 0:
        return cls, _zero()
    reg = ag.loss_mse(ag.take(d, pos), targets.deltas[pos])
    return cls, reg


@dataclass
class RoiTargets:
    rois: np.ndarray  # (R, 4)
    labels: np.ndarray  # (R,) class index, 0 = background
    deltas: np.ndarray  # (R, 4), zero for background

    @property
    def foreground(self) -> np.ndarray:
        return np.flatnonzero(self.labels > 0)


def roi_targets(
    proposals: np.ndarray,
    gt_boxes: np.ndarray,
    gt_labels: Sequence[str],
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> RoiTargets:
    """Label proposals against gts (IOU >= roi_fg_iou is foreground) and subsample."""
    rois = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    if cfg.add_gt_proposals and len(gt_boxes):
        rois = np.concatenate([rois, gt_boxes])
    if rois.shape[0] == 0:
        return RoiTargets(rois, np.zeros(0, dtype=np.intp), np.zeros((0, 4)))
    cls_index = np.array([CLASSES.index(l) for l in gt_labels], dtype=np.intp)
    if len(gt_boxes):
        ious = iou_matrix(rois, gt_boxes)
        best = ious.argmax(axis=1)
        fg = ious[np.arange(len(rois)), best] >= cfg.roi_fg_iou
    else:
        best = np.zeros(len(rois), dtype=np.intp)
        fg = np.zeros(len(rois), dtype=bool)
    fg_idx, bg_idx = np.flatnonzero(fg), np.flatnonzero(~fg)
    n_fg = min(len(fg_idx), int(round(cfg.roi_batch_size * cfg.roi_fg_fraction)))
    fg_idx = np.sort(rng.permutation(fg_idx)[:n_fg])
    n_bg = min(len(bg_idx), cfg.roi_batch_size - n_fg)
    bg_idx = np.sort(rng.permutation(bg_idx)[:n_bg])
    keep = np.concatenate([fg_idx, bg_idx]).astype(np.intp)
    labels = np.zeros(len(keep), dtype=np.intp)
    deltas = np.zeros((len(keep), 4))
    nf = len(fg_idx)
    if nf:
        labels[:nf] = cls_index[best[fg_idx]]
        deltas[:nf] = encode_boxes(gt_boxes[best[fg_idx]], rois[fg_idx])
    return RoiTargets(rois[keep], labels, deltas)


def head_loss(scores: Tensor, deltas: Tensor, targets: RoiTargets) -> tuple[Tensor, Tensor]:
    """(CCE over all sampled rois, MSE over foreground rois' own-class deltas)."""
    if targets.labels.size == 0:
        return _zero(), _zero()
    cls = ag.loss_cce(scores, targets.labels)
    fg = targets.foreground
    if fg.size == 0:
        return cls, _zero()
    n_fg_classes = deltas.shape[1] // 4
    flat = (fg[:, None] * n_fg_classes * 4 + (targets.labels[fg, None] - 1) * 4 + np.arange(4)[None, :]).reshape(-1)
    reg = ag.loss_mse(ag.take(deltas.reshape(-1), flat), targets.deltas[fg].reshape(-1))
    return cls, reg


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _batches(dataset: Sequence[AnnotatedImage], order: np.ndarray, size: int) -> list[list[int]]:
    """Chunk ``order`` into steps of up to ``size`` same-shape images."""
    if size == 1:
        return [[int(i)] for i in order]
    open_: dict[tuple, list[int]] = {}
    out: list[list[int]] = []
    for i in order:
        key = dataset[i].pixels.shape
        bucket = open_.setdefault(key, [])
        if not bucket:
            out.append(bucket)
        bucket.append(int(i))
        if len(bucket) == size:
            del open_[key]
    return out


def _step(model: DetectorModel, items: Sequence[AnnotatedImage], phase: str, lr: float, cfg: TrainConfig, rng) -> tuple[float, ...]:
    mcfg = model.config
    trainable = TRAINABLE[phase]
    live = "eval" if phase in cfg.frozen_bn_phases else "train"
    mode = {c: (live if c in trainable else "eval") for c in ("backbone", "rpn", "heads")}
    x = Tensor(np.stack([it.pixels for it in items])[:, None])
    _, _, h, w = x.shape
    gts = [boxes_to_array([b.box for b in it.boxes]) for it in items]

    with Tape() as tape:
        fm = backbone_forward(model, x, mode["backbone"])
        obj, deltas = rpn_forward(model, fm, mode["rpn"])
        grid = anchor_grid_for(mcfg, fm.shape[2], fm.shape[3])
        per_image = [rpn_targets(grid, g, cfg, rng) for g in gts]
        n_anchor = len(grid)
        merged = RpnTargets(
            np.concatenate([t.labels for t in per_image]),
            np.concatenate([t.deltas for t in per_image]),
            np.concatenate([t.sampled + i * n_anchor for i, t in enumerate(per_image)]),
        )
        rpn_cls, rpn_reg = rpn_loss(obj, deltas, merged)
        rois, labels, targets, bidx = [], [], [], []
        for i, it in enumerate(items):
            props, _ = propose_arrays(obj.data[i : i + 1], deltas.data[i : i + 1], grid, (h, w), mcfg)
            rt = roi_targets(props, gts[i], [b.label for b in it.boxes], cfg, rng)
            rois.append(rt.rois)
            labels.append(rt.labels)
            targets.append(rt.deltas)
            bidx.append(np.full(len(rt.labels), i, dtype=np.intp))
        rt = RoiTargets(np.concatenate(rois), np.concatenate(labels), np.concatenate(targets))
        if rt.rois.shape[0]:
            pooled = roi_pool(fm, rt.rois, mcfg.total_stride, mcfg.roi_pool_size, np.concatenate(bidx))
            scores, hd = heads_forward(model, pooled, mode["heads"])
            head_cls, head_reg = head_loss(scores, hd, rt)
        else:
            head_cls, head_reg = _zero(), _zero()
        w1, w2, w3, w4 = cfg.loss_weights
        if phase in ("b", "d"):
            loss = rpn_cls * w1 + rpn_reg * w2
        else:
            loss = head_cls * w3 + head_reg * w4
    values = tuple(t.item() for t in (rpn_cls, rpn_reg, head_cls, head_reg))
    if not all(math.isfinite(v) for v in values):
        raise TrainingError(f"non-finite loss {values}")
    if loss.requires_grad:
        tape.backward(loss)
        ag.sgd_step(model.params.values(), lr)
    model.zero_grad()
    return values


def recalibrate_bn(model: DetectorModel, dataset: Sequence[AnnotatedImage], components: Sequence[str], images_per_step: int = 1) -> None:
    """Replace the running statistics of ``components`` with dataset averages.

    Components are processed in network order, each with everything upstream
    in eval mode, so every layer sees the features it will see at inference.
    Heads are fed the inference proposals.
    """
    base = model.config
    batches = _batches(dataset, np.arange(len(dataset)), images_per_step)
    try:
        for comp in (c for c in ("backbone", "rpn", "heads") if c in components):
            for k, idx in enumerate(batches, start=1):
                # momentum (k-1)/k turns the running update into a cumulative mean
                model.config = replace(base, bn_momentum=(k - 1) / k)
                x = Tensor(np.stack([dataset[i].pixels for i in idx])[:, None])
                fm = backbone_forward(model, x, "train" if comp == "backbone" else "eval")
                if comp == "backbone":
                    continue
                obj, deltas = rpn_forward(model, fm, "train" if comp == "rpn" else "eval")
                if comp == "rpn":
                    continue
                grid = anchor_grid_for(base, fm.shape[2], fm.shape[3])
                rois, bidx = [], []
                for i in range(len(idx)):
                    props, _ = propose_arrays(obj.data[i : i + 1], deltas.data[i : i + 1], grid, x.shape[2:], base)
                    rois.append(props)
                    bidx.append(np.full(len(props), i, dtype=np.intp))
                rois_all = np.concatenate(rois)
                if len(rois_all) > 1:
                    pooled = roi_pool(fm, rois_all, base.total_stride, base.roi_pool_size, np.concatenate(bidx))
                    heads_forward(model, pooled, "train")
    finally:
        model.config = base


def train_phase(
    model: DetectorModel,
    dataset: Sequence[AnnotatedImage],
    phase: str,
    epochs: int,
    learning_rate: float,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> TrainReport:
    """Run one schedule entry; frozen components are verified bit-identical afterwards."""
    if phase not in PHASES:
        raise ValueError(f"unknown phase {phase!r}")
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    report = TrainReport()
    before = model.checksums()
    trainable = TRAINABLE[phase]
    model.set_trainable(trainable)
    start = time.perf_counter()
    frozen_bn = phase in cfg.frozen_bn_phases
    recal = cfg.bn_recalibration and epochs > 0
    try:
        if recal and frozen_bn:
            recalibrate_bn(model, dataset, trainable, cfg.images_per_step)
        for epoch in range(epochs):
            t0 = time.perf_counter()
            order = rng.permutation(len(dataset)) if cfg.shuffle else np.arange(len(dataset))
            sums = np.zeros(4)
            batches = _batches(dataset, order, cfg.images_per_step)
            for step, idx in enumerate(batches):
                try:
                    sums += _step(model, [dataset[i] for i in idx], phase, learning_rate, cfg, rng)
                except (TrainingError, ag.NonFiniteError) as exc:
                    ids = ", ".join(dataset[i].image_id for i in idx)
                    raise TrainingError(f"phase {phase} epoch {epoch + 1} step {step + 1} (images {ids}): {exc}") from exc
            mean = sums / len(batches)
            rec = EpochRecord(epoch + 1, phase, *map(float, mean), wall_time=time.perf_counter() - t0)
            report.epochs.append(rec)
            log.info(
                "phase %s epoch %d  rpn_cls %.4f rpn_reg %.4f head_cls %.4f head_reg %.4f (%.1fs)",
                phase, rec.epoch, rec.rpn_cls, rec.rpn_reg, rec.head_cls, rec.head_reg, rec.wall_time,
            )
        if recal and not frozen_bn:
            recalibrate_bn(model, dataset, trainable, cfg.images_per_step)
    finally:
        model.set_trainable(())
    after = model.checksums()
    for comp in ("backbone", "rpn", "heads"):
        if comp not in trainable and before[comp] != after[comp]:
            raise TrainingError(f"phase {phase} modified frozen component {comp!r}")
    report.phase_times.append((phase, time.perf_counter() - start))
    report.phase_checksums.append((phase, before, after))
    report.checksums = after
    return report


def train(model: DetectorModel, dataset: Sequence[AnnotatedImage], cfg: TrainConfig) -> tuple[DetectorModel, TrainReport]:
    """Run the configured phases in order; deterministic given ``cfg.seed``."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    report = TrainReport(checksums=model.checksums())
    for phase, epochs, lr in zip(cfg.phases, cfg.epochs, cfg.learning_rates):
        report.extend(train_phase(model, dataset, phase, epochs, lr, cfg, rng))
    return model, report

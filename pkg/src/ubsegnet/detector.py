"""Two-stage ROI detector: backbone, RPN, proposals, ROI pooling and dual heads.

Shapes follow NCHW. A forward pass is
backbone -> rpn -> propose -> roi_pool -> heads -> per-class decode/NMS.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .boxes import (
    AnchorGrid,
    Box,
    Detection,
    boxes_to_array,
    clip_boxes,
    decode_boxes,
    generate_anchors,
    nms_indices,
)
from .synthdata import TRAITS

CLASSES = ("background",) + TRAITS
FORMAT_MAGIC = b"UBSEGNET"
FORMAT_VERSION = 1
COMPONENTS = ("backbone", "rpn", "heads")


class ModelFormatError(ValueError):
    pass


class ChecksumError(ModelFormatError):
    pass


class VersionError(ModelFormatError):
    pass


@dataclass(frozen=True)
class DetectorConfig:
    in_channels: int = 1
    # (out_channels, kernel, stride) per conv+bn+relu block
    backbone: tuple[tuple[int, int, int], ...] = ((16, 3, 1), (32, 3, 2), (64, 3, 2), (64, 3, 2))
    rpn_channels: int = 512
    rpn_window: int = 3
    anchor_scales: tuple[float, ...] = (16.0, 32.0, 64.0)
    anchor_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    roi_pool_size: int = 14
    head_channels: tuple[int, int, int] = (512, 512, 2048)
    # spatial grid averaged before the head projections; 1 = global average
    head_pool_grid: int = 1
    num_classes: int = 6
    pre_nms_top: int = 256
    post_nms_top: int = 32
    rpn_nms_threshold: float = 0.7
    det_nms_threshold: float = 0.3
    score_threshold: float = 0.5
    delta_clamp: float = 4.0
    min_box_size: float = 1.0
    bn_momentum: float = 0.9
    bn_epsilon: float = 1e-5

    def __post_init__(self):
        if self.roi_pool_size < 1:
            raise ValueError("roi_pool_size must be >= 1")
        if self.num_classes != len(CLASSES):
            raise ValueError(f"num_classes must be {len(CLASSES)} (5 traits + background)")
        if not self.backbone:
            raise ValueError("backbone needs at least one block")
        if not self.anchor_scales or not self.anchor_ratios:
            raise ValueError("anchor scales and ratios must be non-empty")
        if self.rpn_window != 3:
            raise ValueError("the RPN window is fixed at 3x3")
        if not 1 <= self.head_pool_grid <= self.roi_pool_size:
            raise ValueError("head_pool_grid must be in [1, roi_pool_size]")

    @property
    def total_stride(self) -> int:
        return int(np.prod([b[2] for b in self.backbone]))

    @property
    def anchors_per_cell(self) -> int:
        return len(self.anchor_scales) * len(self.anchor_ratios)

    @property
    def feature_channels(self) -> int:
        return self.backbone[-1][0]

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown detector config keys: {sorted(unknown)}")
        kw = dict(d)
        if "backbone" in kw:
            kw["backbone"] = tuple(tuple(int(v) for v in b) for b in kw["backbone"])
        for key in ("anchor_scales", "anchor_ratios"):
            if key in kw:
                kw[key] = tuple(float(v) for v in kw[key])
        if "head_channels" in kw:
            kw["head_channels"] = tuple(int(v) for v in kw["head_channels"])
        return cls(**kw)

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


@dataclass
class DetectorModel:
    config: DetectorConfig
    params: dict[str, Tensor] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def component_params(self, component: str) -> list[Tensor]:
        return [t for n, t in self.params.items() if n.startswith(component + ".")]

    def set_trainable(self, components: Sequence[str]) -> None:
        for name, t in self.params.items():
            t.requires_grad = name.split(".", 1)[0] in components

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def checksum(self, component: str | None = None) -> str:
        """SHA-256 over the named parameters and buffers of one component (or all)."""
        h = hashlib.sha256()
        items = [(n, t.data) for n, t in self.params.items()] + list(self.buffers.items())
        for name, arr in sorted(items, key=lambda kv: kv[0]):
            if component is None or name.startswith(component + "."):
                h.update(name.encode())
                h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    def checksums(self) -> dict[str, str]:
        return {c: self.checksum(c) for c in COMPONENTS}


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


def _uniform(rng: np.random.Generator, shape, fan_in: int, gain: float) -> Tensor:
    bound = gain * math.sqrt(3.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape))


def init_model(config: DetectorConfig | None = None, seed: int = 0) -> DetectorModel:
    """Fresh model with fan-in scaled uniform weights (no pretrained import)."""
    cfg = config or DetectorConfig()
    rng = np.random.default_rng(seed)
    model = DetectorModel(cfg)
    p, buf = model.params, model.buffers
    relu_gain = math.sqrt(2.0)

    def bn(prefix: str, c: int):
        p[prefix + ".gamma"] = Tensor(np.ones(c))
        p[prefix + ".beta"] = Tensor(np.zeros(c))
        buf[prefix + ".running_mean"] = np.zeros(c)
        buf[prefix + ".running_var"] = np.ones(c)

    c_in = cfg.in_channels
    for i, (c_out, k, _) in enumerate(cfg.backbone):
        p[f"backbone.{i}.conv.weight"] = _uniform(rng, (c_out, c_in, k, k), c_in * k * k, relu_gain)
        bn(f"backbone.{i}.bn", c_out)
        c_in = c_out

    f, r, k = cfg.feature_channels, cfg.rpn_channels, cfg.anchors_per_cell
    p["rpn.conv.weight"] = _uniform(rng, (r, f, 3, 3), f * 9, relu_gain)
    bn("rpn.bn", r)
    p["rpn.cls.weight"] = _uniform(rng, (k, r, 1, 1), r, 1.0)
    p["rpn.cls.bias"] = Tensor(np.zeros(k))
    p["rpn.reg.weight"] = _uniform(rng, (4 * k, r, 1, 1), r, 0.1)
    p["rpn.reg.bias"] = Tensor(np.zeros(4 * k))

    c1, c2, c3 = cfg.head_channels
    p["heads.conv1.weight"] = _uniform(rng, (c1, f, 1, 1), f, relu_gain)
    bn("heads.bn1", c1)
    p["heads.conv2.weight"] = _uniform(rng, (c2, c1, 3, 3), c1 * 9, relu_gain)
    bn("heads.bn2", c2)
    p["heads.conv3.weight"] = _uniform(rng, (c3, c2, 1, 1), c2, relu_gain)
    bn("heads.bn3", c3)
    n_fg = cfg.num_classes - 1
    v = c3 * cfg.head_pool_grid**2
    p["heads.cls.weight"] = _uniform(rng, (cfg.num_classes, v), v, 1.0)
    p["heads.cls.bias"] = Tensor(np.zeros(cfg.num_classes))
    p["heads.reg.weight"] = _uniform(rng, (4 * n_fg, v), v, 0.1)
    p["heads.reg.bias"] = Tensor(np.zeros(4 * n_fg))
    return model


def _conv_bn_relu(model: DetectorModel, x: Tensor, conv: str, bn: str, stride: int, padding: int, mode: str) -> Tensor:
    cfg = model.config
    y = ag.conv2d(x, model.params[conv + ".weight"], None, stride=stride, padding=padding)
    y = ag.batchnorm(
        y,
        model.params[bn + ".gamma"],
        model.params[bn + ".beta"],
        model.buffers[bn + ".running_mean"],
        model.buffers[bn + ".running_var"],
        mode=mode,
        momentum=cfg.bn_momentum,
        epsilon=cfg.bn_epsilon,
    )
    return ag.relu(y)


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def as_image_tensor(image) -> Tensor:
    if isinstance(image, Tensor):
        return image
    a = np.asarray(image, dtype=np.float64)
    if a.ndim == 2:
        a = a[None, None]
    elif a.ndim == 3:
        a = a[None]
    return Tensor(a)


def backbone_forward(model: DetectorModel, image: Tensor, mode: str = "eval") -> Tensor:
    cfg = model.config
    _, c, h, w = image.shape
    if c != cfg.in_channels:
        raise ValueError(f"image has {c} channels, model expects {cfg.in_channels}")
    if h < cfg.total_stride or w < cfg.total_stride:
        raise ValueError(f"image {h}x{w} smaller than the backbone stride {cfg.total_stride}")
    x = image
    for i, (_, k, s) in enumerate(cfg.backbone):
        x = _conv_bn_relu(model, x, f"backbone.{i}.conv", f"backbone.{i}.bn", s, k // 2, mode)
    return x


def rpn_forward(model: DetectorModel, fm: Tensor, mode: str = "eval") -> tuple[Tensor, Tensor]:
    """Objectness (1, K, h, w) after sigmoid and deltas (1, 4K, h, w)."""
    cfg = model.config
    if fm.shape[1] != cfg.feature_channels:
        raise ValueError(f"feature map has {fm.shape[1]} channels, RPN expects {cfg.feature_channels}")
    p = model.params
    hidden = _conv_bn_relu(model, fm, "rpn.conv", "rpn.bn", 1, 1, mode)
    obj = ag.sigmoid(ag.conv2d(hidden, p["rpn.cls.weight"], p["rpn.cls.bias"]))
    deltas = ag.conv2d(hidden, p["rpn.reg.weight"], p["rpn.reg.bias"])
    return obj, deltas


def anchor_grid_for(config: DetectorConfig, fm_height: int, fm_width: int) -> AnchorGrid:
    return generate_anchors(fm_height, fm_width, config.total_stride, config.anchor_scales, config.anchor_ratios)


def flatten_rpn_outputs(objectness: np.ndarray, deltas: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(1|-, K, h, w) and (1|-, 4K, h, w) -> (A,) scores and (A, 4) deltas in anchor order."""
    obj = np.asarray(objectness)
    d = np.asarray(deltas)
    if obj.ndim == 4:
        obj, d = obj[0], d[0]
    k, h, w = obj.shape
    scores = obj.transpose(1, 2, 0).reshape(-1)
    dl = d.reshape(k, 4, h, w).transpose(2, 3, 0, 1).reshape(-1, 4)
    return scores, dl


def flatten_rpn_tensors(objectness: Tensor, deltas: Tensor) -> tuple[Tensor, Tensor]:
    """Differentiable counterpart of :func:`flatten_rpn_outputs`, image-major over the batch."""
    n, k, h, w = objectness.shape
    scores = ag.transpose(objectness, (0, 2, 3, 1)).reshape(-1)
    d = ag.transpose(deltas.reshape(n, k, 4, h, w), (0, 3, 4, 1, 2)).reshape(-1, 4)
    return scores, d


def propose_arrays(
    objectness,
    deltas,
    grid: AnchorGrid,
    image_size: tuple[int, int],
    config: DetectorConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Proposal boxes (P, 4) and objectness scores (P,), sorted by score."""
    obj = objectness.data if isinstance(objectness, Tensor) else objectness
    dl = deltas.data if isinstance(deltas, Tensor) else deltas
    scores, d = flatten_rpn_outputs(obj, dl)
    if scores.shape[0] != len(grid):
        raise ValueError(f"{scores.shape[0]} RPN outputs for {len(grid)} anchors")
    h, w = image_size
    boxes = clip_boxes(decode_boxes(d, grid.anchors, config.delta_clamp), w, h)
    ok = ((boxes[:, 2] - boxes[:, 0]) >= config.min_box_size) & ((boxes[:, 3] - boxes[:, 1]) >= config.min_box_size)
    idx = np.flatnonzero(ok)
    order = idx[np.argsort(-scores[idx], kind="stable")][: config.pre_nms_top]
    boxes, scores = boxes[order], scores[order]
    keep = nms_indices(boxes, scores, config.rpn_nms_threshold)[: config.post_nms_top]
    return boxes[keep], scores[keep]


def propose(objectness, deltas, grid: AnchorGrid, image_size: tuple[int, int], config: DetectorConfig) -> list[Detection]:
    boxes, scores = propose_arrays(objectness, deltas, grid, image_size, config)
    return [Detection(Box.from_array(b), "object", float(s)) for b, s in zip(boxes, scores)]


def _bin_edges(start: int, length: int, bins: int) -> tuple[np.ndarray, np.ndarray]:
    i = np.arange(bins)
    lo = start + (i * length) // bins
    hi = start - ((-(i + 1) * length) // bins)
    return lo, hi


def _roi_cells(lo_px: float, hi_px: float, stride: float, extent: int) -> tuple[int, int]:
    a, b = lo_px / stride, hi_px / stride
    if b <= 0 or a >= extent:
        raise ValueError("roi lies entirely outside the feature map")
    start = min(max(int(math.floor(a)), 0), extent - 1)
    end = min(max(int(math.ceil(b)), start + 1), extent)
    return start, end - start


def roi_pool(fm: Tensor, rois, stride: float, out_size: int = 14, batch_index=None) -> Tensor:
    """Max-pool each image-space roi over a ``out_size`` x ``out_size`` bin grid.

    ``fm`` is (N, F, h, w); ``rois`` is a sequence of Box or an (R, 4) array,
    and ``batch_index`` (default all zeros) picks each roi's image. Returns
    (R, F, out_size, out_size). Rois snap outward to whole feature cells; bins
    use floor/ceil edges so every bin holds at least one cell.
    """
    if isinstance(rois, Box):
        rois = [rois]
    r = rois if isinstance(rois, np.ndarray) else boxes_to_array(list(rois))
    r = r.reshape(-1, 4)
    if np.any(r[:, 2] <= r[:, 0]) or np.any(r[:, 3] <= r[:, 1]):
        raise ValueError("roi must have positive area")
    nb, f, h, w = fm.shape
    bidx = np.zeros(len(r), dtype=np.intp) if batch_index is None else np.asarray(batch_index, dtype=np.intp)
    if bidx.shape != (len(r),) or np.any(bidx < 0) or np.any(bidx >= nb):
        raise ValueError("batch_index must give a valid image per roi")
    n = r.shape[0]
    out = np.empty((n, f, out_size, out_size))
    flat_arg = np.empty((n, f, out_size, out_size), dtype=np.intp)
    chan = np.arange(f)[:, None, None]
    for k in range(n):
        data = fm.data[bidx[k]]
        x0, rw = _roi_cells(r[k, 0], r[k, 2], stride, w)
        y0, rh = _roi_cells(r[k, 1], r[k, 3], stride, h)
        ylo, yhi = _bin_edges(y0, rh, out_size)
        xlo, xhi = _bin_edges(x0, rw, out_size)
        ly, lx = int((yhi - ylo).max()), int((xhi - xlo).max())
        ry = np.minimum(ylo[:, None] + np.arange(ly)[None, :], yhi[:, None] - 1)  # (P, ly)
        rx = np.minimum(xlo[:, None] + np.arange(lx)[None, :], xhi[:, None] - 1)  # (P, lx)
        if ly == 1 and lx == 1:
            out[k] = data[:, ry[:, 0][:, None], rx[:, 0][None, :]]
            cy = np.broadcast_to(ry[:, 0][None, :, None], (f, out_size, out_size))
            cx = np.broadcast_to(rx[:, 0][None, None, :], (f, out_size, out_size))
        else:
            g = data[:, ry[:, :, None, None], rx[None, None, :, :]]  # (F, P, ly, P, lx)
            g = g.transpose(0, 1, 3, 2, 4).reshape(f, out_size, out_size, ly * lx)
            a = g.argmax(axis=-1)
            out[k] = np.take_along_axis(g, a[..., None], axis=-1)[..., 0]
            ay, ax = np.divmod(a, lx)
            cy = ry[np.arange(out_size)[None, :, None], ay]
            cx = rx[np.arange(out_size)[None, None, :], ax]
        flat_arg[k] = ((bidx[k] * f + chan) * h + cy) * w + cx

    def bw(grad):
        gfm = np.zeros(nb * f * h * w)
        np.add.at(gfm, flat_arg.reshape(-1), grad.reshape(-1))
        return (gfm.reshape(fm.shape),)

    return ag.record(out, (fm,), bw)


def heads_forward(model: DetectorModel, pooled: Tensor, mode: str = "eval") -> tuple[Tensor, Tensor]:
    """Class probabilities (R, 6) and per-foreground-class deltas (R, 20)."""
    cfg = model.config
    expected = (cfg.feature_channels, cfg.roi_pool_size, cfg.roi_pool_size)
    if pooled.ndim != 4 or pooled.shape[1:] != expected:
        raise ValueError(f"pooled features must be (R, {expected[0]}, {expected[1]}, {expected[2]})")
    p = model.params
    x = _conv_bn_relu(model, pooled, "heads.conv1", "heads.bn1", 1, 0, mode)
    x = _conv_bn_relu(model, x, "heads.conv2", "heads.bn2", 1, 1, mode)
    x = _conv_bn_relu(model, x, "heads.conv3", "heads.bn3", 1, 0, mode)
    v = ag.grid_avg_pool(x, cfg.head_pool_grid)
    scores = ag.softmax(ag.linear(v, p["heads.cls.weight"], p["heads.cls.bias"]), axis=1)
    deltas = ag.linear(v, p["heads.reg.weight"], p["heads.reg.bias"])
    return scores, deltas


def detect(model: DetectorModel, image, score_threshold: float | None = None) -> list[Detection]:
    """Trait detections sorted by descending head class score."""
    cfg = model.config
    thr = cfg.score_threshold if score_threshold is None else score_threshold
    x = as_image_tensor(image)
    _, _, h, w = x.shape
    fm = backbone_forward(model, x, "eval")
    obj, deltas = rpn_forward(model, fm, "eval")
    grid = anchor_grid_for(cfg, fm.shape[2], fm.shape[3])
    props, _ = propose_arrays(obj, deltas, grid, (h, w), cfg)
    if props.shape[0] == 0:
        return []
    pooled = roi_pool(fm, props, cfg.total_stride, cfg.roi_pool_size)
    scores, hd = heads_forward(model, pooled, "eval")
    probs = scores.data
    hd = hd.data.reshape(props.shape[0], cfg.num_classes - 1, 4)
    out: list[Detection] = []
    for c in range(1, cfg.num_classes):
        sel = np.flatnonzero(probs[:, c] >= thr)
        if sel.size == 0:
            continue
        boxes = clip_boxes(decode_boxes(hd[sel, c - 1], props[sel], cfg.delta_clamp), w, h)
        ok = ((boxes[:, 2] - boxes[:, 0]) >= cfg.min_box_size) & ((boxes[:, 3] - boxes[:, 1]) >= cfg.min_box_size)
        boxes, s = boxes[ok], probs[sel[ok], c]
        for i in nms_indices(boxes, s, cfg.det_nms_threshold):
            out.append(Detection(Box.from_array(boxes[i]), CLASSES[c], float(s[i])))
    out.sort(key=lambda d: -d.score)
    return out


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def _serialize(model: DetectorModel) -> bytes:
    parts = [FORMAT_MAGIC, struct.pack("<I", model.version)]
    cfg = model.config.canonical().encode("utf-8")
    parts.append(struct.pack("<I", len(cfg)) + cfg)
    named = [(n, t.data) for n, t in model.params.items()] + list(model.buffers.items())
    named.sort(key=lambda kv: kv[0])
    parts.append(struct.pack("<I", len(named)))
    for name, arr in named:
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def save_model(model: DetectorModel, path: str | os.PathLike) -> None:
    Path(path).write_bytes(_serialize(model))


def load_model(path: str | os.PathLike) -> DetectorModel:
    raw = Path(path).read_bytes()
    if len(raw) < len(FORMAT_MAGIC) + 4 + 32 or not raw.startswith(FORMAT_MAGIC):
        raise ModelFormatError(f"{path}: not a model file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError(f"{path}: checksum mismatch (corrupt or truncated file)")
    pos = len(FORMAT_MAGIC)
    (version,) = struct.unpack_from("<I", body, pos)
    pos += 4
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: format version {version}, this build reads version {FORMAT_VERSION}")
    (n,) = struct.unpack_from("<I", body, pos)
    pos += 4
    config = DetectorConfig.from_dict(json.loads(body[pos : pos + n].decode("utf-8")))
    pos += n
    model = DetectorModel(config, version=version)
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", body, pos)
        pos += 4
        name = body[pos : pos + ln].decode("utf-8")
        pos += ln
        (ndim,) = struct.unpack_from("<I", body, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(body, dtype="<f8", count=size, offset=pos).astype(np.float64).reshape(shape)
        pos += 8 * size
        if ".running_" in name:
            model.buffers[name] = arr
        else:
            model.params[name] = Tensor(arr)
    if pos != len(body):
        raise ModelFormatError(f"{path}: trailing bytes after tensor table")
    return model

"""Tape-based reverse-mode autodiff over float64 numpy arrays.

Only the layer and loss vocabulary the detector needs is provided. Operations
are recorded on the active :class:`Tape` whenever one of their inputs requires
a gradient; outside a tape every op is a plain forward computation.

    with Tape() as tape:
        loss = loss_mse(linear(x, w, b), y)
    tape.backward(loss)
"""

from __future__ import annotations

import weakref
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PROB_FLOOR = 1e-12
BN_EPSILON = 1e-5
BN_MOMENTUM = 0.9


class NonFiniteError(FloatingPointError):
    """Raised when a forward op or gradient produces NaN or Inf."""


class Tensor:
    """An n-dimensional float64 array with an optional gradient."""

    def __init__(self, values, requires_grad: bool = False):
        self.data = np.ascontiguousarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape_ref: weakref.ref | None = None

    @property
    def _tape(self) -> "Tape | None":
        # weak so tape -> record -> tensor -> tape is not a cycle
        return None if self._tape_ref is None else self._tape_ref()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic used by loss composition
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self):
        return tensor_sum(self)


class _Record:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of differentiable operations.

    Records can only reference tensors that already exist, so the recording
    order is a topological order and reverse replay needs no graph search.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor that requires it."""
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            _accumulate(rec.out, g)
            in_grads = rec.backward(g)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.shape:
                    gi = gi.reshape(t.shape)
                if id(t) in grads:
                    grads[id(t)] = grads[id(t)] + gi
                else:
                    grads[id(t)] = gi
                if t._tape is not self:
                    leaves[id(t)] = t
        for key, t in leaves.items():
            _accumulate(t, grads.pop(key))
        if id(loss) in grads and loss.requires_grad:
            # loss was a leaf never touched by a recorded op
            _accumulate(loss, grads.pop(id(loss)))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("non-finite gradient during backward")
    t.grad = g.copy() if t.grad is None else t.grad + g


def backward(loss: Tensor) -> None:
    """Run backward on the tape that recorded ``loss``."""
    if loss._tape is None:
        if loss.requires_grad and loss.size == 1:
            _accumulate(loss, np.ones_like(loss.data))
            return
        raise ValueError("loss was not produced by a recorded operation")
    loss._tape.backward(loss)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("forward op produced a non-finite value")
    out = Tensor(data)
    if _ACTIVE and any(t.requires_grad for t in inputs):
        tape = _ACTIVE[-1]
        out.requires_grad = True
        out._tape_ref = weakref.ref(tape)
        tape.records.append(_Record(out, tuple(inputs), backward_fn))
    return out


def record(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Emit a custom op. ``backward_fn(grad_out)`` returns one grad (or None) per input."""
    return _emit(np.asarray(data, dtype=np.float64), inputs, backward_fn)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / structural
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _emit(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _emit(a.data * c, (a,), lambda g: (g * c,))
    return _emit(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def tensor_sum(x: Tensor) -> Tensor:
    return _emit(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    out = x.data.mean(axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _emit(np.asarray(out), (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather ``indices`` along ``axis``; repeated indices accumulate in backward."""
    idx = np.asarray(indices, dtype=np.intp)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None),) * axis + (idx,), g)
        return (gx,)

    return _emit(np.take(x.data, idx, axis=axis), (x,), bw)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over NCHW input with (F, C, kh, kw) weights.

    Lowered to one matmul over an NHWC im2col buffer whose rows are
    ``(kh, kw, C)``-ordered, so every gather and scatter moves whole channel runs.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects 4-D input and weight")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    n, c, h, w = x.shape
    f, wc, kh, kw = weight.shape
    if wc != c:
        raise ValueError(f"input has {c} channels but weight expects {wc}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ValueError(f"kernel {kh}x{kw} does not fit padded input {h}x{w}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError("non-positive conv output extent")

    xp = np.zeros((n, h + 2 * padding, w + 2 * padding, c))
    xp[:, padding : padding + h, padding : padding + w, :] = x.data.transpose(0, 2, 3, 1)
    cols = np.empty((n, ho, wo, kh, kw, c))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride, :]
    cols = cols.reshape(n * ho * wo, kh * kw * c)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(f, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))

    def bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gw = None
        if weight.requires_grad:
            gw = (gmat.T @ cols).reshape(f, kh, kw, c).transpose(0, 3, 1, 2)
        gb = gmat.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(n, ho, wo, kh, kw, c)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride, :] += dcols[
                        :, :, :, i, j, :
                    ]
            gx = gxp[:, padding : padding + h, padding : padding + w, :].transpose(0, 3, 1, 2)
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit(out, inputs, bw)


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str = "train",
    momentum: float = BN_MOMENTUM,
    epsilon: float = BN_EPSILON,
) -> Tensor:
    """Per-channel batch normalization over (N, C) or (N, C, H, W) input.

    In train mode the running statistics are updated in place as
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"gamma/beta must have length {c}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    m = x.size // c
    if m == 0:
        raise ValueError("batchnorm over an empty batch-spatial extent")

    if mode == "eval":
        inv = 1.0 / np.sqrt(running_var + epsilon)
        xhat = (x.data - running_mean.reshape(bshape)) * inv.reshape(bshape)
        out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

        def bw_eval(g):
            return (
                g * (gamma.data * inv).reshape(bshape),
                (g * xhat).sum(axis=axes),
                g.sum(axis=axes),
            )

        return _emit(out, (x, gamma, beta), bw_eval)

    xr = x.data.reshape(x.shape[0], c, -1)
    mu = np.einsum("nch->c", xr) / m
    xc = x.data - mu.reshape(bshape)
    xcr = xc.reshape(xr.shape)
    var = np.einsum("nch,nch->c", xcr, xcr) / m
    inv = 1.0 / np.sqrt(var + epsilon)
    out = xc * (gamma.data * inv).reshape(bshape) + beta.data.reshape(bshape)
    running_mean *= momentum
    running_mean += (1.0 - momentum) * mu
    running_var *= momentum
    running_var += (1.0 - momentum) * var

    def bw(g):
        gr = g.reshape(xr.shape)
        gsum = np.einsum("nch->c", gr)
        gdot = np.einsum("nch,nch->c", gr, xcr)
        gbeta, ggamma = gsum, gdot * inv
        # dx = gamma * inv / m * (m * g - sum(g) - xhat * sum(g * xhat))
        scale = (gamma.data * inv).reshape(bshape)
        gx = scale * (g - (gsum / m).reshape(bshape) - xc * (gdot * inv * inv / m).reshape(bshape))
        return gx, ggamma, gbeta

    return _emit(out, (x, gamma, beta), bw)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    return _emit(out, (x,), lambda g: (g * (out > 0),))


def sigmoid(x: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _emit(s, (x,), lambda g: (g * s * (1.0 - s),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} out of range for {x.ndim}-D input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _emit(p, (x,), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """y = x @ W.T + b with W shaped (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear input width {x.shape[-1]} != weight width {weight.shape[1]}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gx = g @ weight.data
        gw = g.T @ x.data
        gb = g.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit(out, inputs, bw)


def maxpool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    stride = window if stride is None else stride
    if window < 1 or stride < 1:
        raise ValueError("pooling window and stride must be positive")
    n, c, h, w = x.shape
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"pooling window {window} larger than input {h}x{w}")
    win = sliding_window_view(x.data, (window, window), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros_like(x.data)
        di, dj = np.divmod(arg, window)
        rows = np.arange(ho)[None, None, :, None] * stride + di
        cols = np.arange(wo)[None, None, None, :] * stride + dj
        nn = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, :, None, None]
        np.add.at(gx, (nn, cc, rows, cols), g)
        return (gx,)

    return _emit(out, (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C)."""
    return mean(x, axis=(2, 3))


def _grid_edges(length: int, bins: int) -> list[tuple[int, int]]:
    return [((i * length) // bins, -((-(i + 1) * length) // bins)) for i in range(bins)]


def grid_avg_pool(x: Tensor, grid: int) -> Tensor:
    """Average over a ``grid`` x ``grid`` partition: (N, C, H, W) -> (N, C * grid * grid).

    Bin edges are floor/ceil of the even split, so bins may overlap by one
    row or column when ``grid`` does not divide the extent. ``grid=1`` is
    :func:`global_avg_pool`.
    """
    if x.ndim != 4:
        raise ValueError("grid_avg_pool expects (N, C, H, W)")
    n, c, h, w = x.shape
    if not 1 <= grid <= min(h, w):
        raise ValueError(f"grid {grid} must be in [1, {min(h, w)}]")
    if grid == 1:
        return global_avg_pool(x)
    ys, xs = _grid_edges(h, grid), _grid_edges(w, grid)
    out = np.empty((n, c, grid, grid))
    for i, (y0, y1) in enumerate(ys):
        for j, (x0, x1) in enumerate(xs):
            out[:, :, i, j] = x.data[:, :, y0:y1, x0:x1].mean(axis=(2, 3))

    def bw(g):
        g = g.reshape(n, c, grid, grid)
        gx = np.zeros_like(x.data)
        for i, (y0, y1) in enumerate(ys):
            for j, (x0, x1) in enumerate(xs):
                gx[:, :, y0:y1, x0:x1] += (g[:, :, i, j] / ((y1 - y0) * (x1 - x0)))[:, :, None, None]
        return (gx,)

    return _emit(out.reshape(n, -1), (x,), bw)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def loss_bce(pred: Tensor, target, floor: float = PROB_FLOOR) -> Tensor:
    """Mean binary cross-entropy of probabilities ``pred`` against {0,1} targets."""
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if t.shape != pred.shape:
        raise ValueError(f"target shape {t.shape} != pred shape {pred.shape}")
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("bce targets must be 0 or 1")
    n = max(pred.size, 1)
    p = np.clip(pred.data, floor, 1.0 - floor)
    live = (pred.data >= floor) & (pred.data <= 1.0 - floor)
    value = -(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)).sum() / n

    def bw(g):
        return (g * live * (-(t / p) + (1.0 - t) / (1.0 - p)) / n,)

    return _emit(np.array(value), (pred,), bw)


def loss_cce(probs: Tensor, target_class, floor: float = PROB_FLOOR) -> Tensor:
    """Mean of -ln p[row, target] over the rows of a (N, C) probability tensor.

    Pass softmax output; the gradient flows back through the softmax op.
    """
    idx = np.asarray(target_class, dtype=np.intp).reshape(-1)
    n, c = probs.shape
    if idx.shape[0] != n:
        raise ValueError(f"{idx.shape[0]} targets for {n} rows")
    if np.any(idx < 0) or np.any(idx >= c):
        raise ValueError(f"class index out of range [0, {c})")
    rows = np.arange(n)
    picked = probs.data[rows, idx]
    p = np.maximum(picked, floor)
    value = -np.log(p).sum() / n

    def bw(g):
        gp = np.zeros_like(probs.data)
        gp[rows, idx] = -g * (picked >= floor) / (p * n)
        return (gp,)

    return _emit(np.array(value), (probs,), bw)


def loss_mse(pred: Tensor, target) -> Tensor:
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if t.shape != pred.shape:
        raise ValueError(f"target shape {t.shape} != pred shape {pred.shape}")
    n = max(pred.size, 1)
    diff = pred.data - t
    return _emit(np.array((diff * diff).sum() / n), (pred,), lambda g: (g * 2.0 * diff / n,))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def sgd_step(params: Iterable[Tensor], learning_rate: float) -> None:
    """In-place ``p -= lr * p.grad``. Tensors with requires_grad False are frozen."""
    if learning_rate < 0:
        raise ValueError("learning rate must be non-negative")
    params = [p for p in params if p.requires_grad and p.grad is not None]
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError("NaN or Inf gradient passed to sgd_step")
    for p in params:
        p.data -= learning_rate * p.grad

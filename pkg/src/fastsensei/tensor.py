"""Minimal dense tensor with tape-based reverse-mode differentiation.

Only the kernels the encoder and the segmentation network need are provided.
Every op is a pure function of its inputs.  When a :class:`Tape` is active and
at least one input requires gradients, the op is appended to the tape; running
:meth:`Tape.backward` replays the recorded ops in exact reverse order.

Arrays are float32 by default; pass ``dtype=np.float64`` when building tensors
for gradient verification.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32

_TAPES: list["Tape"] = []


class Tensor:
    """An immutable n-d array that can take part in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE if dtype is None else dtype)
        _check_finite(arr)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tape: Optional[Tape] = None

    # basic properties
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not differentiable here")
        return mul(self, 1.0 / np.asarray(other, dtype=self.dtype))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def backward(self) -> None:
        """Backpropagate from this scalar through the tape that produced it."""
        if self._tape is None:
            raise RuntimeError("tensor was not produced on a gradient tape")
        self._tape.backward(self)


def _check_finite(arr: np.ndarray) -> None:
    if arr.dtype.kind == "f" and not np.isfinite(arr).all():
        raise FloatingPointError("non-finite value produced")


def _lift(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


@dataclass
class _Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of executed differentiable ops.

    Use as a context manager; ops executed inside the ``with`` block on tensors
    that require gradients are recorded.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._outputs: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def record(self, inputs, output: Tensor, backward) -> None:
        self.nodes.append(_Node(tuple(inputs), output, backward))
        self._outputs.add(id(output))
        output._tape = self

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(t) into ``t.grad`` for every participating leaf.

        Tensors that do not participate in producing ``loss`` keep ``grad=None``.
        """
        if id(loss) not in self._outputs:
            raise RuntimeError("loss is detached from this tape")
        if loss.size != 1:
            raise ValueError("backward needs a scalar loss")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in self._outputs:
                    leaves[key] = inp
        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            t.grad = g.astype(t.dtype, copy=False) if t.grad is None else t.grad + g


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    (tape or loss._tape or _no_tape()).backward(loss)


def _no_tape():
    raise RuntimeError("loss is detached from any tape")


def active_tape() -> Optional[Tape]:
    return _TAPES[-1] if _TAPES else None


def _result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        tape.record(inputs, out, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _result(a.data + b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad * bd, (a, b), bw)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def sin(a: Tensor) -> Tensor:
    x = a.data
    return _result(np.sin(x), (a,), lambda g: (g * np.cos(x),))


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at 0 is taken as 0."""
    mask = x.data > 0
    return _result(np.maximum(x.data, 0), (x,), lambda g: (g * mask,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _result(np.matmul(ad, bd), (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------------------
# normalisation, attention and loss


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply ``gamma * x + beta``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def bw(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * gd + beta.data, (x, gamma, beta), bw)


def masked_softmax(logits: Tensor, valid) -> Tensor:
    """Softmax over the last axis restricted to positions where ``valid`` is True.

    ``valid`` broadcasts against ``logits``.  Masked positions get weight exactly 0.
    """
    valid = np.broadcast_to(np.asarray(valid, dtype=bool), logits.shape)
    if not valid.any(axis=-1).all():
        raise ValueError("masked_softmax: a row has no unmasked position")
    z = np.where(valid, logits.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(valid, np.exp(z), 0.0).astype(logits.dtype)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result(p, (logits,), bw)


def softmax(logits: Tensor) -> Tensor:
    return masked_softmax(logits, np.ones(logits.shape[-1], dtype=bool))


def cross_entropy_mean(logits: Tensor, labels, ignore_label: int = 255) -> Tensor:
    """Mean pixel-wise cross entropy over non-ignored pixels.

    ``logits`` is ``K x H x W`` or ``N x K x H x W``; ``labels`` drops the K axis.
    """
    labels = np.asarray(labels)
    batched = logits.ndim == 4
    ld = logits.data if batched else logits.data[None]
    lab = labels if batched else labels[None]
    if lab.shape != (ld.shape[0],) + ld.shape[2:]:
        raise ValueError(f"label shape {labels.shape} does not match logits {logits.shape}")
    k = ld.shape[1]
    keep = lab != ignore_label
    if not keep.any():
        raise ValueError("cross_entropy_mean: every pixel is ignored")
    if ((lab[keep] < 0) | (lab[keep] >= k)).any():
        raise ValueError("label out of range")
    m = ld.max(axis=1, keepdims=True)
    e = np.exp(ld - m)
    s = e.sum(axis=1, keepdims=True)
    logp = ld - m - np.log(s)
    safe = np.where(keep, lab, 0)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    count = keep.sum()
    loss = -(picked * keep).sum() / count

    def bw(g):
        p = e / s
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
        d = (p - onehot) * keep[:, None] * (g / count)
        return (d.astype(logits.dtype) if batched else d[0].astype(logits.dtype),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), bw)


# ---------------------------------------------------------------------------
# image kernels (C x H x W or N x C x H x W)


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected C x H x W or N x C x H x W, got shape {x.shape}")


def conv2d_3x3_same(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Zero-padded 3x3 convolution (cross-correlation) preserving H and W."""
    xd, squeeze = _batched(x.data)
    wd = w.data
    if wd.shape[1:] != (xd.shape[1], 3, 3):
        raise ValueError(f"conv weight {wd.shape} does not match input channels {xd.shape[1]}")
    xp = np.pad(xd, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # N,C,H,W,3,3
    out = np.tensordot(win, wd, axes=([1, 4, 5], [1, 2, 3]))  # N,H,W,O
    out = out.transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[:, None, None]
    out = np.ascontiguousarray(out, dtype=xd.dtype)
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        g4 = g[None] if squeeze else g
        gx = gw = gb = None
        if x.requires_grad:
            gp = np.pad(g4, ((0, 0), (0, 0), (1, 1), (1, 1)))
            gwin = sliding_window_view(gp, (3, 3), axis=(2, 3))  # N,O,H,W,3,3
            gx = np.tensordot(gwin, wd[:, :, ::-1, ::-1], axes=([1, 4, 5], [0, 2, 3]))
            gx = np.ascontiguousarray(gx.transpose(0, 3, 1, 2))
            if squeeze:
                gx = gx[0]
        if w.requires_grad:
            gw = np.tensordot(g4, win, axes=([0, 2, 3], [0, 2, 3]))
        if b is not None and b.requires_grad:
            gb = g4.sum(axis=(0, 2, 3))
        return (gx, gw) if b is None else (gx, gw, gb)

    return _result(out[0] if squeeze else out, inputs, bw)


def maxpool_2x2(x: Tensor) -> Tensor:
    """Max over non-overlapping 2x2 windows; gradient goes to the first argmax."""
    xd, squeeze = _batched(x.data)
    n, c, h, w = xd.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool_2x2 needs even spatial dims, got {h}x{w}")
    blocks = xd.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        g4 = g[None] if squeeze else g
        gb = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g4[..., None], axis=-1)
        gx = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx[0] if squeeze else gx,)

    return _result(out[0] if squeeze else out, (x,), bw)


def upsample_nearest_2x(x: Tensor) -> Tensor:
    """Replicate every pixel into a 2x2 block."""
    xd, squeeze = _batched(x.data)
    n, c, h, w = xd.shape
    out = np.broadcast_to(xd[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)

    def bw(g):
        g4 = g[None] if squeeze else g
        gx = g4.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))
        return (gx[0] if squeeze else gx,)

    return _result(out[0] if squeeze else out, (x,), bw)


# ---------------------------------------------------------------------------
# fake quantisation

SYMMETRIC_WEIGHT = "symmetric-weight"
UNSIGNED_ACTIVATION = "unsigned-activation"


@dataclass(frozen=True)
class QuantSpec:
    bits: int
    mode: str
    scale: float

    def __post_init__(self):
        if self.bits not in (4, 8):
            raise ValueError(f"unsupported bit width {self.bits}; use 4 or 8")
        if self.mode not in (SYMMETRIC_WEIGHT, UNSIGNED_ACTIVATION):
            raise ValueError(f"unknown quantisation mode {self.mode!r}")
        if not self.scale > 0:
            raise ValueError("quantisation scale must be positive")

    @property
    def levels(self) -> tuple[int, int]:
        """Integer grid bounds (inclusive)."""
        if self.mode == SYMMETRIC_WEIGHT:
            m = 2 ** (self.bits - 1) - 1
            return -m, m
        return 0, 2 ** self.bits - 1


def weight_spec(w: np.ndarray, bits: int) -> QuantSpec:
    """Per-tensor max-abs calibration for a symmetric weight grid."""
    m = float(np.abs(w).max())
    qmax = 2 ** (bits - 1) - 1
    return QuantSpec(bits, SYMMETRIC_WEIGHT, m / qmax if m > 0 else 1.0)


def activation_spec(running_max: float, bits: int = 4) -> QuantSpec:
    qmax = 2 ** bits - 1
    return QuantSpec(bits, UNSIGNED_ACTIVATION, running_max / qmax if running_max > 0 else 1.0)


def fake_quantize(x: Tensor, q: QuantSpec) -> Tensor:
    """Round onto the grid of ``q``, clip, and map back to reals.

    The gradient is the straight-through estimator: identity inside the clip
    range and zero outside it.
    """
    lo, hi = q.levels
    scaled = x.data / np.asarray(q.scale, dtype=x.dtype)
    inside = (scaled >= lo) & (scaled <= hi)
    out = (np.clip(np.round(scaled), lo, hi) * np.asarray(q.scale, dtype=x.dtype)).astype(x.dtype)
    return _result(out, (x,), lambda g: (g * inside,))

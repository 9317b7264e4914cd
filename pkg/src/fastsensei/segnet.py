"""Lightweight U-Net-like segmentation network without skip connections.

Encoder stages (two 3x3 convs + 2x2 max-pool), a two-conv bottleneck, decoder
stages (nearest 2x upsample + two 3x3 convs) and a final 3x3 conv to class
logits.  ReLU follows every conv except the last.

The quantised forward applies fake quantisation to weights (8-bit first and
last conv, 4-bit elsewhere, symmetric per-tensor max-abs) and to every
post-ReLU activation (4-bit unsigned, scale from a calibration max).
"""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor, activation_spec, fake_quantize, weight_spec

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SegNetConfig:
    in_channels: int = 4
    base_channels: int = 8
    n_stages: int = 4
    n_classes: int = 3
    quantized: bool = False

    def __post_init__(self):
        if min(self.in_channels, self.base_channels, self.n_stages, self.n_classes) < 1:
            raise ValueError("SegNetConfig fields must be positive")

    @property
    def downsample(self) -> int:
        return 2 ** self.n_stages

    def schedule(self) -> list[int]:
        """Channel widths: encoder stages, bottleneck, decoder stages."""
        enc = [self.base_channels * 2 ** i for i in range(self.n_stages)]
        return enc + [self.base_channels * 2 ** self.n_stages] + enc[::-1]

    def conv_layers(self) -> list[tuple[int, int]]:
        """``(c_in, c_out)`` of every conv in execution order."""
        layers = []
        c = self.in_channels
        for width in self.schedule():
            layers += [(c, width), (width, width)]
            c = width
        layers.append((c, self.n_classes))
        return layers


Params = dict


def init_segnet(config: SegNetConfig, seed: int = 0, dtype=np.float32) -> Params:
    """He-uniform conv weights (fan-in ``9 * c_in``) and zero biases."""
    rng = np.random.default_rng(seed)
    params: Params = {}
    for i, (cin, cout) in enumerate(config.conv_layers()):
        bound = math.sqrt(6.0 / (9 * cin))
        params[f"conv{i}.w"] = Tensor(rng.uniform(-bound, bound, (cout, cin, 3, 3)).astype(dtype),
                                      requires_grad=True, name=f"conv{i}.w")
        params[f"conv{i}.b"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True, name=f"conv{i}.b")
    return params


def flop_report(config: SegNetConfig, height: int, width: int) -> list[dict]:
    """Multiply-accumulate count per conv: ``H * W * c_in * c_out * 9`` at that conv's resolution."""
    rows = []
    n = config.n_stages
    scales = [2 ** i for i in range(n) for _ in range(2)]
    scales += [2 ** n] * 2
    scales += [2 ** (n - 1 - i) for i in range(n) for _ in range(2)]
    scales.append(1)
    for i, ((cin, cout), s) in enumerate(zip(config.conv_layers(), scales)):
        h, w = height // s, width // s
        rows.append({"layer": f"conv{i}", "c_in": cin, "c_out": cout, "h": h, "w": w,
                     "macs": h * w * cin * cout * 9})
    return rows


def _check_input(x: Tensor, config: SegNetConfig) -> None:
    h, w = x.shape[-2:]
    if h % config.downsample or w % config.downsample:
        raise ValueError(f"input {h}x{w} not divisible by {config.downsample}")
    if x.shape[-3] != config.in_channels:
        raise ValueError(f"expected {config.in_channels} input channels, got {x.shape[-3]}")


@dataclass
class QuantState:
    """Per-layer quantisation scales.

    ``act_max[i]`` is the calibration maximum of the post-ReLU output of conv i
    (every conv but the last).  ``weight_scales`` is filled from the current
    weights when not given.
    """

    act_max: list[float]
    weight_bits: list[int]
    act_bits: int = 4
    weight_scales: Optional[list[float]] = None

    def weight_spec(self, i: int, w: np.ndarray):
        if self.weight_scales is not None:
            return T.QuantSpec(self.weight_bits[i], T.SYMMETRIC_WEIGHT, self.weight_scales[i])
        return weight_spec(w, self.weight_bits[i])

    def act_spec(self, i: int):
        return activation_spec(self.act_max[i], self.act_bits)


def default_weight_bits(config: SegNetConfig) -> list[int]:
    n = len(config.conv_layers())
    return [8] + [4] * (n - 2) + [8]


def _forward(x, params: Params, config: SegNetConfig, qstate: Optional[QuantState], trace: Optional[dict],
             observe: Optional[list]) -> Tensor:
    x = T.as_tensor(x, dtype=params["conv0.w"].dtype)
    _check_input(x, config)
    n_conv = len(config.conv_layers())
    layer = 0

    def conv(h, final=False):
        nonlocal layer
        w = params[f"conv{layer}.w"]
        if qstate is not None:
            w = fake_quantize(w, qstate.weight_spec(layer, w.data))
        h = T.conv2d_3x3_same(h, w, params[f"conv{layer}.b"])
        if not final:
            h = T.relu(h)
            if observe is not None:
                observe[layer] = max(observe[layer], float(h.data.max()))
            if qstate is not None:
                h = fake_quantize(h, qstate.act_spec(layer))
        layer += 1
        return h

    h = x
    for s in range(config.n_stages):
        h = conv(conv(h))
        if trace is not None:
            trace[f"enc{s}"] = h
        h = T.maxpool_2x2(h)
    h = conv(conv(h))
    if trace is not None:
        trace["bottleneck"] = h
    for s in range(config.n_stages):
        h = conv(conv(T.upsample_nearest_2x(h)))
        if trace is not None:
            trace[f"dec{s}"] = h
    logits = conv(h, final=True)
    assert layer == n_conv
    return logits


def segnet_forward(x, params: Params, config: SegNetConfig, trace: Optional[dict] = None) -> Tensor:
    """Float forward; ``x`` is ``C x H x W`` or ``N x C x H x W``."""
    return _forward(x, params, config, None, trace, None)


def segnet_forward_quantized(x, params: Params, config: SegNetConfig, qstate: Optional[QuantState]) -> Tensor:
    """Fake-quantised forward (same graph as :func:`segnet_forward`)."""
    if qstate is None:
        raise ValueError("quantised forward needs calibration scales")
    return _forward(x, params, config, qstate, None, None)


def calibrate(inputs: Iterable, params: Params, config: SegNetConfig) -> QuantState:
    """Record the max post-ReLU activation of every conv over ``inputs`` (float path)."""
    n_conv = len(config.conv_layers())
    observed = [0.0] * (n_conv - 1)
    for x in inputs:
        _forward(x, params, config, None, None, observed)
    return QuantState(act_max=observed, weight_bits=default_weight_bits(config))


def predict_classes(logits) -> np.ndarray:
    """Per-pixel argmax over the class axis (``-3``); ties go to the lowest index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(data, axis=-3).astype(np.uint8)


# ---------------------------------------------------------------------------
# checkpoint file: "SGN1"

MAGIC = b"SGN1"
VERSION = 1


def save_segnet(path, params: Params, config: SegNetConfig, qstate: Optional[QuantState] = None) -> None:
    """Write a flat little-endian checkpoint.

    Layout: magic, u32 version, u32 in_channels, base_channels, n_stages,
    n_classes, quantized flag, u32 tensor count; then per tensor in schedule
    order u32 ndim, u32 dims, f32 values.  When quantized: u32 act_bits, then
    per conv u32 weight bits and f32 weight scale, then f32 activation maxima
    for every conv but the last.
    """
    quantized = qstate is not None
    names = [f"conv{i}.{k}" for i in range(len(config.conv_layers())) for k in ("w", "b")]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<7I", VERSION, config.in_channels, config.base_channels, config.n_stages,
                             config.n_classes, int(quantized), len(names)))
        for name in names:
            arr = np.ascontiguousarray(params[name].data, dtype="<f4")
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
        if quantized:
            fh.write(struct.pack("<I", qstate.act_bits))
            for i in range(len(config.conv_layers())):
                spec = qstate.weight_spec(i, params[f"conv{i}.w"].data)
                fh.write(struct.pack("<If", spec.bits, spec.scale))
            fh.write(np.asarray(qstate.act_max, dtype="<f4").tobytes())


def load_segnet(path) -> tuple[Params, SegNetConfig, Optional[QuantState]]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise ValueError("not a segnet checkpoint (bad magic)")
    try:
        version, cin, base, stages, classes, quantized, count = struct.unpack_from("<7I", buf, 4)
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        config = SegNetConfig(cin, base, stages, classes, bool(quantized))
        off = 32
        params: Params = {}
        names = [f"conv{i}.{k}" for i in range(len(config.conv_layers())) for k in ("w", "b")]
        if count != len(names):
            raise ValueError("tensor count does not match config")
        for name in names:
            (ndim,) = struct.unpack_from("<I", buf, off)
            shape = struct.unpack_from(f"<{ndim}I", buf, off + 4)
            off += 4 + 4 * ndim
            n = int(np.prod(shape))
            arr = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(shape)
            off += 4 * n
            params[name] = Tensor(arr.astype(np.float32), requires_grad=True, name=name)
        qstate = None
        if quantized:
            n_conv = len(config.conv_layers())
            (act_bits,) = struct.unpack_from("<I", buf, off)
            off += 4
            bits, scales = [], []
            for _ in range(n_conv):
                b, s = struct.unpack_from("<If", buf, off)
                off += 8
                bits.append(b)
                scales.append(s)
            act = np.frombuffer(buf, dtype="<f4", count=n_conv - 1, offset=off)
            off += 4 * (n_conv - 1)
            qstate = QuantState([float(a) for a in act], bits, act_bits, scales)
    except struct.error as exc:
        raise ValueError(f"truncated checkpoint: {exc}") from exc
    if off != len(buf):
        raise ValueError("trailing bytes in checkpoint")
    return params, config, qstate

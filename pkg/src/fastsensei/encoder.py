"""Sensor-independent band encoder.

Pipeline: per-band descriptors -> expand MLP -> transformer encoder over band
tokens -> contract MLP -> output block that projects the band images onto a
fixed number of feature maps.

All tensors here carry a leading sample axis ``N``:
bands ``N x Bmax x H x W``, descriptors ``N x Bmax x F``, validity ``N x Bmax``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .descriptor import (
    PADDING_VALUE,
    BandSpec,
    EncodingVariant,
    StatsVariant,
    build_descriptor_batch,
    descriptor_width,
    pad_bands,
)
from .tensor import Tensor

logger = logging.getLogger(__name__)

BAND_MULTIPLICATION = "band-multiplication"
BAND_EMBEDDING = "band-embedding"


@dataclass(frozen=True)
class EncoderConfig:
    d_enc: int = 32
    expand_dims: tuple[int, ...] = (48,)
    d_token: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ffn: int = 256
    contract_dims: tuple[int, ...] = (32, 16)
    c_out: int = 4
    padding_level: int = 3
    output_block: str = BAND_MULTIPLICATION
    encoding: EncodingVariant = EncodingVariant.FAST_SENSEI
    stats: StatsVariant = StatsVariant.FOUR_SUMMARY
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_token % self.n_heads:
            raise ValueError("d_token must be divisible by n_heads")
        if self.c_out < 1:
            raise ValueError("c_out must be >= 1")
        if self.padding_level not in (1, 2, 3):
            raise ValueError("padding_level must be 1, 2 or 3")
        if self.output_block not in (BAND_MULTIPLICATION, BAND_EMBEDDING):
            raise ValueError(f"unknown output block {self.output_block!r}")
        if self.d_enc % 4:
            raise ValueError("d_enc must be a multiple of 4")

    @property
    def descriptor_width(self) -> int:
        return descriptor_width(self.d_enc, self.stats)

    def with_(self, **changes) -> "EncoderConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "d_enc": self.d_enc,
            "expand_dims": list(self.expand_dims),
            "d_token": self.d_token,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_ffn": self.d_ffn,
            "contract_dims": list(self.contract_dims),
            "c_out": self.c_out,
            "padding_level": self.padding_level,
            "output_block": self.output_block,
            "encoding": self.encoding.value,
            "stats": self.stats.value,
            "ln_eps": self.ln_eps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        d["expand_dims"] = tuple(d["expand_dims"])
        d["contract_dims"] = tuple(d["contract_dims"])
        d["encoding"] = EncodingVariant(d["encoding"])
        d["stats"] = StatsVariant(d["stats"])
        return cls(**d)


# Larger body used for the size comparison: 64-dim encoding, no expand/contract bottleneck.
ORIGINAL_SIZE = EncoderConfig(d_enc=64, expand_dims=(96,), d_token=128, d_ffn=384, contract_dims=(64,))


Params = dict  # name -> Tensor, insertion order is the serialisation order


def _linear_shapes(prefix: str, dims: Sequence[int]) -> list[tuple[str, tuple[int, ...]]]:
    out = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        out += [(f"{prefix}.{i}.w", (a, b)), (f"{prefix}.{i}.b", (b,))]
    return out


def param_shapes(config: EncoderConfig) -> list[tuple[str, tuple[int, ...]]]:
    d = config.d_token
    shapes = _linear_shapes("expand", (config.descriptor_width, *config.expand_dims, d))
    for layer in range(config.n_layers):
        p = f"layer{layer}"
        for m in ("q", "k", "v", "o"):
            shapes += [(f"{p}.attn.w{m}", (d, d)), (f"{p}.attn.b{m}", (d,))]
        shapes += [(f"{p}.ln1.g", (d,)), (f"{p}.ln1.b", (d,))]
        shapes += _linear_shapes(f"{p}.ffn", (d, config.d_ffn, d))
        shapes += [(f"{p}.ln2.g", (d,)), (f"{p}.ln2.b", (d,))]
    shapes += _linear_shapes("contract", (d, *config.contract_dims, config.c_out))
    if config.output_block == BAND_EMBEDDING:
        shapes += [("embed.alpha", (config.c_out,)), ("embed.beta", (config.c_out,)), ("embed.gamma", (config.c_out,))]
    return shapes


def init_encoder(config: EncoderConfig, seed: int = 0, dtype=np.float32) -> Params:
    """He-uniform (fan-in) weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    params: Params = {}
    for name, shape in param_shapes(config):
        leaf = name.rsplit(".", 1)[-1]
        if name.startswith("embed."):
            data = rng.uniform(-1.0, 1.0, shape)
        elif leaf == "g":
            data = np.ones(shape)
        elif len(shape) == 2:
            bound = math.sqrt(6.0 / shape[0])
            data = rng.uniform(-bound, bound, shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    logger.debug("encoder params: %d", count_parameters(params))
    return params


def count_parameters(params: Params) -> int:
    return int(sum(p.size for p in params.values()))


def _mlp(x: Tensor, params: Params, prefix: str, final_relu: bool) -> Tensor:
    i = 0
    while f"{prefix}.{i}.w" in params:
        x = T.linear(x, params[f"{prefix}.{i}.w"], params[f"{prefix}.{i}.b"])
        i += 1
        if f"{prefix}.{i}.w" in params or final_relu:
            x = T.relu(x)
    return x


def expand_tokens(descriptors, params: Params) -> Tensor:
    """Per-band MLP from descriptors (``... x F``) to tokens (``... x d_token``)."""
    d = T.as_tensor(descriptors, dtype=params["expand.0.w"].dtype)
    if d.shape[-1] != params["expand.0.w"].shape[0]:
        raise ValueError(f"descriptor width {d.shape[-1]} != {params['expand.0.w'].shape[0]}")
    return _mlp(d, params, "expand", final_relu=True)


def contract_features(tokens, params: Params) -> Tensor:
    """Per-band MLP from tokens to ``c_out`` feature weights (no final activation)."""
    t = T.as_tensor(tokens)
    if t.shape[-1] != params["contract.0.w"].shape[0]:
        raise ValueError(f"token width {t.shape[-1]} != {params['contract.0.w'].shape[0]}")
    return _mlp(t, params, "contract", final_relu=False)


def _attention(x: Tensor, valid: np.ndarray, params: Params, p: str, config: EncoderConfig) -> Tensor:
    n, b, d = x.shape
    h = config.n_heads
    dh = d // h

    def heads(name):
        y = T.linear(x, params[f"{p}.attn.w{name}"], params[f"{p}.attn.b{name}"])
        return y.reshape(n, b, h, dh).transpose(0, 2, 1, 3)

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    if config.padding_level == 3:
        weights = T.masked_softmax(scores, valid[:, None, None, :])
    else:
        weights = T.softmax(scores)
    ctx = T.matmul(weights, v).transpose(0, 2, 1, 3).reshape(n, b, d)
    out = T.linear(ctx, params[f"{p}.attn.wo"], params[f"{p}.attn.bo"])
    if config.padding_level == 3:
        # padding rows do not act as queries
        out = out * valid[:, :, None].astype(out.dtype)
    return out


def fuse_attention(tokens, validity, params: Params, config: EncoderConfig) -> Tensor:
    """Post-norm transformer encoder layers over the band axis.

    At padding level 3 attention to padding positions is masked out; at
    levels 1 and 2 every position attends to every other.
    """
    x = T.as_tensor(tokens)
    valid = np.asarray(validity, dtype=bool)
    squeeze = x.ndim == 2
    if squeeze:
        x, valid = x.reshape(1, *x.shape), valid[None]
    if not valid.any(axis=1).all():
        raise ValueError("every sample needs at least one valid band")
    for layer in range(config.n_layers):
        p = f"layer{layer}"
        x = T.layer_norm(x + _attention(x, valid, params, p, config),
                         params[f"{p}.ln1.g"], params[f"{p}.ln1.b"], config.ln_eps)
        ffn = _mlp(x, params, f"{p}.ffn", final_relu=False)
        x = T.layer_norm(x + ffn, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"], config.ln_eps)
    return x.reshape(x.shape[1:]) if squeeze else x


def _divisor(validity: np.ndarray, bmax: int, level: int, dtype) -> np.ndarray:
    if level == 1:
        return np.full(validity.shape[0], bmax, dtype=dtype)
    return validity.sum(axis=1).astype(dtype)


def band_multiply_mean(bands, features, validity, level: int = 3) -> Tensor:
    """Project band images onto feature maps: ``sum_b (x_b + 0.5) f_b / divisor``.

    Padding bands (pixels -0.5) contribute exact zeros.  The divisor is Bmax at
    level 1 and the number of real bands at levels 2 and 3.
    """
    x = T.as_tensor(bands)
    f = T.as_tensor(features)
    valid = np.asarray(validity, dtype=bool)
    squeeze = x.ndim == 3
    if squeeze:
        x, f, valid = x.reshape(1, *x.shape), f.reshape(1, *f.shape), valid[None]
    n, bmax, h, w = x.shape
    if not valid.any(axis=1).all():
        raise ValueError("n_real must be >= 1")
    shifted = (x + 0.5).reshape(n, bmax, h * w)
    div = _divisor(valid, bmax, level, f.dtype)
    fs = f * (1.0 / div)[:, None, None]
    out = T.matmul(fs.transpose(0, 2, 1), shifted).reshape(n, f.shape[-1], h, w)
    return out.reshape(out.shape[1:]) if squeeze else out


def band_embedding(bands, features, validity, params: Params, level: int = 3) -> Tensor:
    """Learnable sinusoidal pixel mapping averaged over bands.

    ``out_c = sum_b v_b sin(alpha_c x_b + beta_c f_bc + gamma_c) / divisor`` with
    ``v_b`` the validity of band ``b``.
    """
    x = T.as_tensor(bands)
    f = T.as_tensor(features)
    valid = np.asarray(validity, dtype=bool)
    squeeze = x.ndim == 3
    if squeeze:
        x, f, valid = x.reshape(1, *x.shape), f.reshape(1, *f.shape), valid[None]
    n, bmax, h, w = x.shape
    c = f.shape[-1]
    if not valid.any(axis=1).all():
        raise ValueError("n_real must be >= 1")
    alpha = params["embed.alpha"].reshape(1, c, 1, 1, 1)
    beta = params["embed.beta"].reshape(1, c, 1)
    gamma = params["embed.gamma"].reshape(1, c, 1)
    phase = (f.transpose(0, 2, 1) * beta + gamma).reshape(n, c, bmax, 1, 1)
    arg = x.reshape(n, 1, bmax, h, w) * alpha + phase
    weights = valid.astype(x.dtype) / _divisor(valid, bmax, level, x.dtype)[:, None]
    out = (T.sin(arg) * weights.reshape(n, 1, bmax, 1, 1)).sum(axis=2)
    return out.reshape(out.shape[1:]) if squeeze else out


def encode(bands, descriptors, validity, params: Params, config: EncoderConfig) -> Tensor:
    """Full encoder on prepared batched inputs; returns ``N x c_out x H x W``."""
    valid = np.asarray(validity, dtype=bool)
    tokens = expand_tokens(descriptors, params)
    tokens = fuse_attention(tokens, valid, params, config)
    feats = contract_features(tokens, params)
    if config.output_block == BAND_EMBEDDING:
        return band_embedding(bands, feats, valid, params, config.padding_level)
    return band_multiply_mean(bands, feats, valid, config.padding_level)


def prepare_inputs(
    bands,
    specs: Sequence[BandSpec],
    config: EncoderConfig,
    bmax: Optional[int] = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pad one sample to ``bmax`` bands and build its descriptors."""
    bands = np.asarray(bands)
    if bands.shape[0] != len(specs):
        raise ValueError(f"{bands.shape[0]} bands but {len(specs)} specs")
    bmax = bands.shape[0] if bmax is None else bmax
    padded, pspecs = pad_bands(bands, specs, bmax)
    desc, valid = build_descriptor_batch(pspecs, padded, len(specs), config.d_enc, config.encoding, config.stats)
    return padded, desc, valid


def prepare_batch(samples, config: EncoderConfig, bmax: int, dtype=np.float32):
    """Stack ``(bands, specs)`` pairs into padded batch arrays."""
    bs, ds, vs = [], [], []
    for bands, specs in samples:
        b, d, v = prepare_inputs(bands, specs, config, bmax)
        bs.append(b.astype(dtype, copy=False))
        ds.append(d.astype(dtype))
        vs.append(v)
    return np.stack(bs), np.stack(ds), np.stack(vs)


def encoder_forward(tile, params: Params, config: EncoderConfig, bmax: Optional[int] = None) -> Tensor:
    """Encode one tile (anything with ``bands`` and ``specs``) to ``c_out x H x W``."""
    dtype = params["expand.0.w"].dtype
    padded, desc, valid = prepare_inputs(np.asarray(tile.bands, dtype=dtype), tile.specs, config, bmax)
    out = encode(padded[None], desc[None].astype(dtype), valid[None], params, config)
    return out.reshape(out.shape[1:])


__all__ = [
    "BAND_EMBEDDING",
    "BAND_MULTIPLICATION",
    "EncoderConfig",
    "ORIGINAL_SIZE",
    "PADDING_VALUE",
    "band_embedding",
    "band_multiply_mean",
    "contract_features",
    "count_parameters",
    "encode",
    "encoder_forward",
    "expand_tokens",
    "fuse_attention",
    "init_encoder",
    "param_shapes",
    "prepare_batch",
    "prepare_inputs",
]

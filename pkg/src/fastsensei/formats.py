"""Radiometric conversion, tiling, input quantisation and binary file formats.

MSTF tile file (little-endian)::

    b"MST1" | u32 version=1 | u32 H | u32 W | u32 B
    B x (f32 lambda_min_nm, f32 lambda_max_nm)
    B*H*W f32 reflectance, band-major

MSK mask file::

    b"MSK1" | u32 H | u32 W | H*W u8 labels in {0, 1, 2, 255}
"""
from __future__ import annotations

import json
import os
import struct
from typing import Optional, Sequence

import numpy as np

from .data import IGNORE, TileSample
from .descriptor import BandSpec

MSTF_MAGIC = b"MST1"
MSTF_VERSION = 1
MSK_MAGIC = b"MSK1"
ENC_MAGIC = b"ENC1"
LEGAL_LABELS = (0, 1, 2, IGNORE)


def toa_landsat(dn):
    """Landsat 8 DN to TOA reflectance: ``DN * 2e-5 - 0.1``.

    Evaluated as ``(2 * DN - 10000) / 100000`` so integer inputs see a single rounding.
    """
    dn = np.asarray(dn)
    if (dn < 0).any():
        raise ValueError("DN must be non-negative")
    if dn.dtype.kind in "iu":
        num = 2 * dn.astype(np.int64) - 10000
        out = num / 100000.0
    else:
        out = dn * 2e-5 - 0.1
    return out if out.ndim else float(out)


def toa_sentinel(dn):
    """Sentinel-2 L1C DN to TOA reflectance: ``DN / 10000`` (values above 1 are kept)."""
    dn = np.asarray(dn)
    if (dn < 0).any():
        raise ValueError("DN must be non-negative")
    out = dn / 10000.0
    return out if out.ndim else float(out)


def quantize_input_u8(x) -> tuple[np.ndarray, np.ndarray]:
    """``u = round(clip(255 x, 0, 255))`` as uint8, plus the back-mapped ``u / 255``."""
    x = np.asarray(x, dtype=np.float64)
    u = np.round(np.clip(x * 255.0, 0.0, 255.0)).astype(np.uint8)
    return u, u / 255.0


def tile_scene(scene, tile: int = 512, specs: Optional[Sequence[BandSpec]] = None,
               mask: Optional[np.ndarray] = None) -> list[TileSample]:
    """Split a ``B x Hs x Ws`` scene into non-overlapping tiles, row-major; remainders are dropped."""
    scene = np.asarray(scene)
    _, hs, ws = scene.shape
    if hs < tile or ws < tile:
        raise ValueError(f"scene {hs}x{ws} is smaller than one {tile}x{tile} tile")
    if specs is None:
        raise ValueError("band specs are required")
    out = []
    for i in range(hs // tile):
        for j in range(ws // tile):
            sl = (slice(i * tile, (i + 1) * tile), slice(j * tile, (j + 1) * tile))
            m = None if mask is None else mask[sl].copy()
            out.append(TileSample(scene[(slice(None),) + sl].copy(), list(specs), m, name=f"r{i}c{j}"))
    return out


# ---------------------------------------------------------------------------
# MSTF / MSK


def write_mstf(path, tile: TileSample) -> None:
    bands = np.ascontiguousarray(tile.bands, dtype="<f4")
    b, h, w = bands.shape
    with open(path, "wb") as fh:
        fh.write(MSTF_MAGIC)
        fh.write(struct.pack("<4I", MSTF_VERSION, h, w, b))
        for s in tile.specs:
            fh.write(struct.pack("<2f", s.lambda_min_nm, s.lambda_max_nm))
        fh.write(bands.tobytes())


def read_mstf(path) -> TileSample:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MSTF_MAGIC:
        raise ValueError(f"{path}: bad magic")
    if len(buf) < 20:
        raise ValueError(f"{path}: truncated header")
    version, h, w, b = struct.unpack_from("<4I", buf, 4)
    if version != MSTF_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off = 20
    need = off + 8 * b + 4 * b * h * w
    if len(buf) != need:
        raise ValueError(f"{path}: expected {need} bytes, found {len(buf)}")
    specs = []
    for i in range(b):
        lo, hi = struct.unpack_from("<2f", buf, off + 8 * i)
        if lo > hi:
            raise ValueError(f"{path}: band {i} has lambda_min > lambda_max")
        specs.append(BandSpec(lo, hi))
    off += 8 * b
    bands = np.frombuffer(buf, dtype="<f4", offset=off).reshape(b, h, w).astype(np.float32)
    name = os.path.splitext(os.path.basename(str(path)))[0]
    return TileSample(bands, specs, None, name)


def write_mask(path, mask) -> None:
    mask = np.asarray(mask)
    if not np.isin(mask, LEGAL_LABELS).all():
        raise ValueError("mask contains labels outside {0, 1, 2, 255}")
    h, w = mask.shape
    with open(path, "wb") as fh:
        fh.write(MSK_MAGIC)
        fh.write(struct.pack("<2I", h, w))
        fh.write(np.ascontiguousarray(mask, dtype=np.uint8).tobytes())


def read_mask(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MSK_MAGIC:
        raise ValueError(f"{path}: bad magic")
    if len(buf) < 12:
        raise ValueError(f"{path}: truncated header")
    h, w = struct.unpack_from("<2I", buf, 4)
    if len(buf) != 12 + h * w:
        raise ValueError(f"{path}: expected {12 + h * w} bytes, found {len(buf)}")
    mask = np.frombuffer(buf, dtype=np.uint8, offset=12).reshape(h, w).copy()
    if not np.isin(mask, LEGAL_LABELS).all():
        raise ValueError(f"{path}: illegal label value")
    return mask


def load_tile_dir(directory) -> list[TileSample]:
    """Read every ``*.mstf`` in a directory with its sibling ``*.msk`` (if present)."""
    tiles = []
    for fname in sorted(os.listdir(directory)):
        if not fname.endswith(".mstf"):
            continue
        tile = read_mstf(os.path.join(directory, fname))
        mpath = os.path.join(directory, fname[:-5] + ".msk")
        if os.path.exists(mpath):
            tile.mask = read_mask(mpath)
            if tile.mask.shape != tile.bands.shape[1:]:
                raise ValueError(f"{mpath}: mask shape does not match tile")
        tiles.append(tile)
    return tiles


# ---------------------------------------------------------------------------
# encoder parameter file: ENC1 | u32 version | u32 json length | config json | u32 count | tensors


def save_encoder(path, params: dict, config) -> None:
    meta = json.dumps(config.to_dict()).encode()
    with open(path, "wb") as fh:
        fh.write(ENC_MAGIC)
        fh.write(struct.pack("<2I", 1, len(meta)))
        fh.write(meta)
        fh.write(struct.pack("<I", len(params)))
        for p in params.values():
            arr = np.ascontiguousarray(p.data, dtype="<f4")
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_encoder(path):
    from .encoder import EncoderConfig, param_shapes
    from .tensor import Tensor

    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != ENC_MAGIC:
        raise ValueError(f"{path}: bad magic")
    try:
        version, n = struct.unpack_from("<2I", buf, 4)
        config = EncoderConfig.from_dict(json.loads(buf[12:12 + n]))
        off = 12 + n
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        shapes = param_shapes(config)
        if count != len(shapes):
            raise ValueError(f"{path}: tensor count does not match config")
        params = {}
        for name, shape in shapes:
            (ndim,) = struct.unpack_from("<I", buf, off)
            got = struct.unpack_from(f"<{ndim}I", buf, off + 4)
            if tuple(got) != tuple(shape):
                raise ValueError(f"{path}: {name} has shape {got}, expected {shape}")
            off += 4 + 4 * ndim
            size = int(np.prod(shape))
            arr = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(shape)
            off += 4 * size
            params[name] = Tensor(arr.astype(np.float32), requires_grad=True, name=name)
    except struct.error as exc:
        raise ValueError(f"{path}: truncated file") from exc
    return params, config

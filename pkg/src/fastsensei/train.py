"""Training loop: AdamW, warmup + cosine schedule, band-subset sampling, evaluation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .data import IGNORE, TileSample, augment, sample_band_subset
from .encoder import EncoderConfig, encode, prepare_batch
from .formats import quantize_input_u8
from .metrics import ConfusionMatrix, class_metrics, update_confusion
from .segnet import QuantState, SegNetConfig, calibrate, predict_classes, segnet_forward, segnet_forward_quantized
from .tensor import Tape

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    base_lr: float = 5e-4
    weight_decay: float = 5e-3
    batch_size: int = 8
    epochs: int = 50
    steps_per_epoch: int = 100
    warmup_epochs: float = 3.0
    final_lr_frac: float = 0.2
    warmup_start_frac: float = 0.1
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    augment: bool = True
    random_subsets: bool = True

    def __post_init__(self):
        if not 0 < self.warmup_start_frac <= 1:
            raise ValueError("warmup_start_frac must be in (0, 1]")
        if not 0 < self.final_lr_frac <= 1:
            raise ValueError("final_lr_frac must be in (0, 1]")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch


def lr_schedule(t: float, config: TrainConfig) -> float:
    """Learning rate at ``t`` epochs.

    Linear warmup from ``warmup_start_frac * base`` to ``base`` over the warmup
    epochs, then cosine annealing to ``final_lr_frac * base`` at the last epoch.
    """
    base = config.base_lr
    total, warm = config.epochs, config.warmup_epochs
    if total <= warm:
        raise ValueError("epochs must exceed warmup_epochs")
    t = min(max(t, 0.0), float(total))
    if t < warm:
        start = config.warmup_start_frac * base
        return start + (base - start) * t / warm
    end = config.final_lr_frac * base
    tau = (t - warm) / (total - warm)
    return end + (base - end) * (1 + math.cos(math.pi * tau)) / 2


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: AdamState, lr: float, config: TrainConfig) -> None:
    """One AdamW update in place (decoupled weight decay ``lr * wd * theta``)."""
    b1, b2 = config.betas
    state.step += 1
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        theta = p.data
        if g is None:
            g = np.zeros_like(theta)
        if g.shape != theta.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {theta.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = lr * config.weight_decay * theta + lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
        p.data = (theta - update).astype(theta.dtype)


@dataclass
class Model:
    """Optional encoder plus segmentation network."""

    segnet: dict
    seg_config: SegNetConfig
    encoder: Optional[dict] = None
    enc_config: Optional[EncoderConfig] = None
    bmax: int = 5
    qstate: Optional[QuantState] = None

    def parameters(self) -> dict:
        out = {f"seg.{k}": v for k, v in self.segnet.items()}
        if self.encoder is not None:
            out.update({f"enc.{k}": v for k, v in self.encoder.items()})
        return out

    def snapshot(self) -> dict:
        return {k: p.data.copy() for k, p in self.parameters().items()}

    def restore(self, snap: dict) -> None:
        for k, p in self.parameters().items():
            p.data = snap[k].copy()

    def inputs(self, tiles: Sequence[TileSample]) -> np.ndarray:
        """Segnet input for a batch: encoder features or (baseline) u8-rescaled bands."""
        dtype = self.segnet["conv0.w"].dtype
        if self.encoder is None:
            x = np.stack([t.bands for t in tiles])
            _, back = quantize_input_u8(x)
            return T.Tensor(back.astype(dtype))
        bands, desc, valid = prepare_batch([(t.bands, t.specs) for t in tiles], self.enc_config, self.bmax, dtype)
        return encode(bands, desc, valid, self.encoder, self.enc_config)

    def logits(self, tiles: Sequence[TileSample], quantized: bool = False):
        x = self.inputs(tiles)
        if quantized:
            return segnet_forward_quantized(x, self.segnet, self.seg_config, self.qstate)
        return segnet_forward(x, self.segnet, self.seg_config)


def loss_on(model: Model, tiles: Sequence[TileSample], quantized: bool = False):
    masks = np.stack([t.mask for t in tiles])
    return T.cross_entropy_mean(model.logits(tiles, quantized), masks, IGNORE)


def train_step(model: Model, tiles: Sequence[TileSample], state: AdamState, lr: float, config: TrainConfig,
               quantized: bool = False) -> float:
    """Forward, pixel-wise cross entropy, backward and one AdamW step; returns the loss."""
    if not tiles:
        raise ValueError("empty batch")
    params = model.parameters()
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        loss = loss_on(model, tiles, quantized)
    tape.backward(loss)
    grads = {k: p.grad for k, p in params.items() if p.grad is not None}
    adamw_step(params, grads, state, lr, config)
    return float(loss.data)


def draw_batch(tiles: Sequence[TileSample], rng: np.random.Generator, config: TrainConfig) -> list[TileSample]:
    batch = []
    for i in rng.integers(0, len(tiles), config.batch_size):
        t = tiles[i]
        if config.random_subsets:
            idx, _ = sample_band_subset(t.specs, rng)
            t = t.subset(idx)
        if config.augment:
            t = augment(t, rng)
        batch.append(t)
    return batch


def evaluate(model: Model, tiles: Sequence[TileSample], band_indices: Optional[Sequence[int]] = None,
             quantized: bool = False, batch_size: int = 8) -> ConfusionMatrix:
    cm = ConfusionMatrix()
    for start in range(0, len(tiles), batch_size):
        chunk = list(tiles[start:start + batch_size])
        if band_indices is not None:
            chunk = [t.subset(band_indices) for t in chunk]
        pred = predict_classes(model.logits(chunk, quantized))
        for p, t in zip(pred, chunk):
            update_confusion(cm, p, t.mask)
    return cm


@dataclass
class History:
    losses: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    val_miou: list = field(default_factory=list)
    best_epoch: Optional[int] = None


def fit(model: Model, tiles: Sequence[TileSample], config: TrainConfig, val_tiles: Optional[Sequence[TileSample]] = None,
        quantized: bool = False, steps: Optional[int] = None) -> History:
    """Train for ``config.total_steps`` (or ``steps``) with the warmup + cosine schedule.

    With ``val_tiles`` the model is evaluated after every epoch and the best
    validation mIoU snapshot is restored at the end.
    """
    rng = np.random.default_rng(config.seed)
    state = AdamState()
    hist = History()
    total = config.total_steps if steps is None else steps
    best, best_snap = -1.0, None
    for step in range(total):
        lr = lr_schedule(step / config.steps_per_epoch, config)
        batch = draw_batch(tiles, rng, config)
        hist.losses.append(train_step(model, batch, state, lr, config, quantized))
        hist.lrs.append(lr)
        end_of_epoch = (step + 1) % config.steps_per_epoch == 0 or step + 1 == total
        if end_of_epoch:
            logger.info("step %d loss %.4f lr %.2e", step + 1, hist.losses[-1], lr)
            if val_tiles is not None:
                miou = class_metrics(evaluate(model, val_tiles, quantized=quantized))["miou"]
                hist.val_miou.append(miou)
                if miou > best:
                    best, best_snap = miou, model.snapshot()
                    hist.best_epoch = len(hist.val_miou) - 1
    if best_snap is not None:
        model.restore(best_snap)
    return hist


def quantization_aware_finetune(model: Model, tiles: Sequence[TileSample], config: TrainConfig,
                                calib_batches: int = 4) -> History:
    """Calibrate activation ranges on the float model, then train with fake quantisation."""
    rng = np.random.default_rng(config.seed + 1)
    calib = [model.inputs(draw_batch(tiles, rng, config)) for _ in range(calib_batches)]
    model.qstate = calibrate(calib, model.segnet, model.seg_config)
    return fit(model, tiles, config, quantized=True)

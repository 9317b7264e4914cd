"""Train encoder + segnet on synthetic tiles, then fine-tune with 8/4/4 fake quantisation.

Takes a few minutes on one CPU core.
"""
import copy
import logging

from fastsensei.encoder import EncoderConfig, init_encoder
from fastsensei.metrics import class_metrics
from fastsensei.segnet import SegNetConfig, init_segnet
from fastsensei.synthetic import make_dataset
from fastsensei.train import Model, TrainConfig, evaluate, fit, quantization_aware_finetune

logging.basicConfig(level=logging.INFO, format="%(message)s")

train, val = make_dataset(128, seed=0), make_dataset(32, seed=1)
enc_cfg, seg_cfg = EncoderConfig(), SegNetConfig(in_channels=EncoderConfig().c_out)
model = Model(init_segnet(seg_cfg, 0), seg_cfg, init_encoder(enc_cfg, 0), enc_cfg, bmax=5)

cfg = TrainConfig(base_lr=1e-3, epochs=5, steps_per_epoch=40)
hist = fit(model, train, cfg)
print(f"loss {hist.losses[0]:.3f} -> {sum(hist.losses[-10:]) / 10:.3f}")

report = class_metrics(evaluate(model, val))
print("float mIoU", round(report["miou"], 4), "per class", report["iou"].round(3))

# one real band at a time, padded to five
for b in range(5):
    print(f"  band {b} alone: mIoU {class_metrics(evaluate(model, val, band_indices=[b]))['miou']:.3f}")

q = copy.deepcopy(model)
quantization_aware_finetune(q, train, TrainConfig(base_lr=2e-4, epochs=4, steps_per_epoch=30, warmup_epochs=1))
print("quantized mIoU", round(class_metrics(evaluate(q, val, quantized=True))["miou"], 4))

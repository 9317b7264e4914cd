"""Command-line interface.

Exit codes: 0 success, 2 validation error (bad arguments or inputs), 1 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

log = logging.getLogger("fastsensei")


class ValidationError(Exception):
    pass


def _cmd_encode(args) -> int:
    from .encoder import encoder_forward
    from .formats import load_encoder, read_mstf

    tile = read_mstf(args.input)
    params, config = load_encoder(args.params)
    config = config.with_(padding_level=args.level)
    out = encoder_forward(tile, params, config)
    np.ascontiguousarray(out.data, dtype="<f4").tofile(args.out)
    log.info("wrote %s with shape %s", args.out, "x".join(map(str, out.shape)))
    print(json.dumps({"out": args.out, "shape": list(out.shape), "dtype": "float32"}))
    return 0


def _cmd_segment(args) -> int:
    from .encoder import encoder_forward
    from .formats import load_encoder, read_mstf, write_mask
    from .segnet import load_segnet, predict_classes, segnet_forward, segnet_forward_quantized

    tile = read_mstf(args.input)
    enc, enc_config = load_encoder(args.encoder_params)
    seg, seg_config, qstate = load_segnet(args.segnet_params)
    feats = encoder_forward(tile, enc, enc_config)
    if args.quantized:
        if qstate is None:
            raise ValidationError("--quantized needs a checkpoint with quantisation scales")
        logits = segnet_forward_quantized(feats, seg, seg_config, qstate)
    else:
        logits = segnet_forward(feats, seg, seg_config)
    write_mask(args.out, predict_classes(logits))
    return 0


def _read_kv(path) -> dict:
    out = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"{path}:{n}: expected key = value")
            k, v = (s.strip() for s in line.split("=", 1))
            out[k] = v
    return out


_TRAIN_KEYS = {
    "base_lr": float, "weight_decay": float, "batch_size": int, "epochs": int, "steps_per_epoch": int,
    "warmup_epochs": float, "final_lr_frac": float, "warmup_start_frac": float, "seed": int,
}
_MODEL_KEYS = {"padding_level": int, "c_out": int, "bmax": int, "n_tiles": int, "tile_size": int,
               "qat_epochs": int}


def _cmd_train(args) -> int:
    from .encoder import EncoderConfig, init_encoder
    from .formats import load_tile_dir, save_encoder, write_mask, write_mstf
    from .segnet import SegNetConfig, init_segnet, save_segnet
    from .synthetic import make_dataset
    from .train import Model, TrainConfig, fit, quantization_aware_finetune

    raw = _read_kv(args.config) if args.config else {}
    unknown = set(raw) - set(_TRAIN_KEYS) - set(_MODEL_KEYS)
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    try:
        tcfg = TrainConfig(**{k: _TRAIN_KEYS[k](v) for k, v in raw.items() if k in _TRAIN_KEYS})
        model_opts = {k: _MODEL_KEYS[k](v) for k, v in raw.items() if k in _MODEL_KEYS}
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc

    if args.synthetic:
        os.makedirs(args.data, exist_ok=True)
        for t in make_dataset(model_opts.get("n_tiles", 64), seed=tcfg.seed, size=model_opts.get("tile_size", 64)):
            write_mstf(os.path.join(args.data, t.name + ".mstf"), t)
            write_mask(os.path.join(args.data, t.name + ".msk"), t.mask)
    tiles = [t for t in load_tile_dir(args.data) if t.mask is not None]
    if not tiles:
        raise ValidationError(f"no labelled tiles in {args.data}")

    ecfg = EncoderConfig(padding_level=model_opts.get("padding_level", 3), c_out=model_opts.get("c_out", 4))
    scfg = SegNetConfig(in_channels=ecfg.c_out)
    bmax = model_opts.get("bmax", max(t.n_bands for t in tiles))
    model = Model(init_segnet(scfg, tcfg.seed), scfg, init_encoder(ecfg, tcfg.seed), ecfg, bmax=bmax)
    hist = fit(model, tiles, tcfg)
    qat_epochs = model_opts.get("qat_epochs", 0)
    if qat_epochs > 0:
        # short low-lr fine-tune with 8/4/4 fake quantisation; the scales go into the checkpoint
        qcfg = replace(tcfg, base_lr=0.4 * tcfg.base_lr, epochs=qat_epochs, warmup_epochs=min(1.0, qat_epochs / 2))
        quantization_aware_finetune(model, tiles, qcfg)
    os.makedirs(args.out, exist_ok=True)
    save_encoder(os.path.join(args.out, "encoder.enc"), model.encoder, ecfg)
    save_segnet(os.path.join(args.out, "segnet.sgn"), model.segnet, scfg, model.qstate)
    with open(os.path.join(args.out, "history.jsonl"), "w") as fh:
        for i, (loss, lr) in enumerate(zip(hist.losses, hist.lrs)):
            fh.write(json.dumps({"step": i, "loss": loss, "lr": lr}) + "\n")
    print(json.dumps({"steps": len(hist.losses), "first_loss": hist.losses[0], "last_loss": hist.losses[-1]}))
    return 0


def _cmd_eval(args) -> int:
    from .formats import read_mask
    from .metrics import ConfusionMatrix, report, update_confusion

    names = sorted(f for f in os.listdir(args.truth) if f.endswith(".msk"))
    if not names:
        raise ValidationError(f"no .msk files in {args.truth}")
    cm = ConfusionMatrix()
    for name in names:
        ppath = os.path.join(args.pred, name)
        if not os.path.exists(ppath):
            raise ValidationError(f"missing prediction {ppath}")
        truth, pred = read_mask(os.path.join(args.truth, name)), read_mask(ppath)
        if truth.shape != pred.shape:
            raise ValidationError(f"{name}: shape mismatch")
        if (pred == 255).any():
            raise ValidationError(f"{name}: predictions may not contain the ignore label")
        update_confusion(cm, pred, truth)
    text, line = report(cm, binary=args.binary)
    print(text)
    print(line)
    return 0


def _cmd_bench(args) -> int:
    from .bench import VARIANTS, time_variant

    if args.variant not in VARIANTS:
        raise ValidationError(f"unknown variant {args.variant!r}; choose from {sorted(VARIANTS)}")
    rep = time_variant(args.variant, args.bands, args.size, args.iters, args.warmup)
    print(rep.line())
    print(rep.to_json())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fastsensei", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("encode", help="encode an MSTF tile to raw float32 C x H x W")
    s.add_argument("--input", required=True)
    s.add_argument("--params", required=True)
    s.add_argument("--level", type=int, choices=(1, 2, 3), default=3)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_encode)

    s = sub.add_parser("segment", help="encode and segment an MSTF tile into an MSK mask")
    s.add_argument("--input", required=True)
    s.add_argument("--encoder-params", required=True)
    s.add_argument("--segnet-params", required=True)
    s.add_argument("--quantized", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_segment)

    s = sub.add_parser("train", help="train encoder + segnet on a directory of MSTF/MSK pairs")
    s.add_argument("--data", required=True)
    s.add_argument("--config", help="key = value file")
    s.add_argument("--out", required=True)
    s.add_argument("--synthetic", action="store_true", help="generate the synthetic dataset into --data first")
    s.set_defaults(func=_cmd_train)

    s = sub.add_parser("eval", help="Prec/Rec/IoU/mIoU report for predicted vs true masks")
    s.add_argument("--pred", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--binary", action="store_true", help="merge thin and thick cloud")
    s.set_defaults(func=_cmd_eval)

    s = sub.add_parser("bench", help="time one encoder variant")
    s.add_argument("--variant", default="fast-sensei")
    s.add_argument("--bands", type=int, default=5)
    s.add_argument("--iters", type=int, default=10)
    s.add_argument("--warmup", type=int, default=3)
    s.add_argument("--size", type=int, default=512)
    s.set_defaults(func=_cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.exception("runtime failure")
        print(f"runtime error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

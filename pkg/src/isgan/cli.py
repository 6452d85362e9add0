"""``isgan`` command-line front end.

Exit status: 0 on success, 2 on usage errors (argparse), 1 on runtime errors
with the underlying message printed as one line on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .errors import IsganError

MODEL_DIR_ENV = "ISGAN_MODEL_DIR"
MODEL_FILE = "model.isgn"

log = logging.getLogger("isgan")


def _typed(cast, check, what):
    def parse(text):
        try:
            value = cast(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid {cast.__name__} value: {text!r}")
        if not check(value):
            raise argparse.ArgumentTypeError(f"{text} is not {what}")
        return value
    parse.__name__ = cast.__name__
    return parse


positive_int = _typed(int, lambda v: v >= 1, "a positive integer")
nonneg_int = _typed(int, lambda v: v >= 0, "a non-negative integer")
positive_float = _typed(float, lambda v: v > 0, "positive")
nonneg_float = _typed(float, lambda v: v >= 0, "non-negative")
unit_float = _typed(float, lambda v: 0 <= v <= 1, "in [0, 1]")


def _add_model(p):
    p.add_argument("--model", help=f"checkpoint file, or a directory holding {MODEL_FILE} "
                                   f"(default: ${MODEL_DIR_ENV})")


def _add_data(p, split_default):
    p.add_argument("--data", required=True, help="directory of PNG images (searched recursively)")
    p.add_argument("--size", type=positive_int, default=64, help="square side images are resized to")
    p.add_argument("--split-fraction", type=unit_float, default=0.8, help="fraction of files used for training")
    p.add_argument("--split", choices=("train", "val"), default=split_default)
    p.add_argument("--limit", type=positive_int, help="use at most this many pairs")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    from .training import TrainConfig

    d = TrainConfig()
    w = d.loss_weights
    parser = argparse.ArgumentParser(prog="isgan", description="Gray-in-color image hiding with CNNs.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("train", help="train the basic model or, with --adversarial, the adversarial model")
    _add_data(p, "train")
    p.add_argument("--out", required=True, help="checkpoint to write; history goes to <out>.history.csv")
    p.add_argument("--adversarial", action="store_true", help="train against a steganalyzer")
    p.add_argument("--init", help="start encoder/decoder from this checkpoint")
    p.add_argument("--resume", help="continue a run (networks, optimizers, epoch) from this checkpoint")
    p.add_argument("--epochs", type=positive_int, default=d.epochs)
    p.add_argument("--batch-size", type=positive_int, default=d.batch_size)
    p.add_argument("--lr", type=positive_float, default=d.lr_initial)
    p.add_argument("--lr-decay-start", type=nonneg_int, default=d.lr_decay_start_epoch)
    p.add_argument("--lr-decay-factor", type=positive_float, default=d.lr_decay_factor)
    p.add_argument("--lr-decay-every", type=positive_int, default=d.lr_decay_every)
    p.add_argument("--alpha", type=unit_float, default=w.alpha, help="SSIM vs MS-SSIM balance")
    p.add_argument("--beta", type=nonneg_float, default=w.beta, help="MSE weight")
    p.add_argument("--gamma", type=nonneg_float, default=w.gamma, help="secret-loss weight")
    p.add_argument("--loss", choices=("mixed", "mse"), default=d.loss_kind)
    p.add_argument("--adv-weight", type=nonneg_float, default=d.adv_weight)
    p.add_argument("--steg-lr", type=positive_float, default=d.steg_lr)
    p.add_argument("--weight-decay", type=nonneg_float, default=d.weight_decay)
    p.add_argument("--no-label-flip", action="store_true",
                   help="adversarial term is -CE(stego label) instead of CE(cover label)")

    p = sub.add_parser("hide", help="hide a secret image in a cover image")
    p.add_argument("--cover", required=True)
    p.add_argument("--secret", required=True, help="converted to gray if in color")
    _add_model(p)
    p.add_argument("--out", required=True, help="stego PNG to write")

    p = sub.add_parser("reveal", help="recover the secret from a stego image")
    p.add_argument("--stego", required=True)
    _add_model(p)
    p.add_argument("--out", required=True, help="gray PNG to write")

    p = sub.add_parser("evaluate", help="stego/reveal PSNR and SSIM over a dataset split")
    _add_data(p, "val")
    _add_model(p)
    p.add_argument("--out", help="directory for quality.csv / quality.json (default: print JSON)")

    p = sub.add_parser("steganalyze", help="cover/stego probabilities for an image")
    p.add_argument("--image", required=True)
    _add_model(p)

    sub.add_parser("grad-check", help="finite-difference check of every layer kind")

    p = sub.add_parser("make-corpus", help="write RGB patches cut from scikit-image sample photos")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=positive_int, default=400)
    p.add_argument("--size", type=positive_int, default=64)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _model_path(parser, args) -> Path:
    raw = args.model or os.environ.get(MODEL_DIR_ENV)
    if not raw:
        parser.error(f"--model is required (or set {MODEL_DIR_ENV})")
    path = Path(raw)
    return path / MODEL_FILE if path.is_dir() else path


def _load_nets(path, *kinds):
    from .checkpoint import load_checkpoint

    ckpt = load_checkpoint(path)
    missing = [k for k in kinds if k not in ckpt.nets]
    if missing:
        raise IsganError(f"{path}: checkpoint has no {', '.join(missing)} network")
    return ckpt


def _pairs(args):
    from .data import load_pairs, scan_dataset

    manifest = scan_dataset(args.data, args.size, args.seed, args.split_fraction)
    return manifest, load_pairs(manifest, args.split, args.limit)


def cmd_train(parser, args):
    from .checkpoint import load_checkpoint, save_result
    from .metrics import LossWeights
    from .networks import build_decoder, build_encoder, build_steganalyzer
    from .training import TrainConfig, train_basic, train_isgan, write_history_csv

    cfg = TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, lr_initial=args.lr,
        lr_decay_start_epoch=args.lr_decay_start, lr_decay_factor=args.lr_decay_factor,
        lr_decay_every=args.lr_decay_every, loss_weights=LossWeights(args.alpha, args.beta, args.gamma),
        loss_kind=args.loss, adv_weight=args.adv_weight, steg_lr=args.steg_lr,
        weight_decay=args.weight_decay, label_flip=not args.no_label_flip, seed=args.seed)
    _, pairs = _pairs(args)
    resume = None
    if args.resume:
        resume = load_checkpoint(args.resume).resume_state()
        enc, dec, steg = resume.encoder, resume.decoder, resume.steganalyzer
    elif args.init:
        ckpt = _load_nets(args.init, "encoder", "decoder")
        enc, dec = ckpt["encoder"], ckpt["decoder"]
        steg = build_steganalyzer(args.seed + 2)
    else:
        enc, dec = build_encoder(args.seed), build_decoder(args.seed + 1)
        steg = build_steganalyzer(args.seed + 2)
    if args.adversarial and steg is None:
        raise IsganError(f"{args.resume}: resumed checkpoint has no steganalyzer for --adversarial")
    log.info("training on %d pairs of %dx%d", len(pairs), *pairs.size)
    if args.adversarial:
        result = train_isgan(pairs, enc, dec, steg, cfg, resume)
    else:
        result = train_basic(pairs, enc, dec, cfg, resume)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_result(out, result, cfg)
    write_history_csv(result.history, out.with_name(out.name + ".history.csv"))
    last = result.history[-1] if result.history else {}
    print(f"wrote {out}: epoch {result.epoch}, stego-cover SSIM {last.get('stego_cover_ssim', float('nan')):.4f}, "
          f"revealed-secret SSIM {last.get('revealed_secret_ssim', float('nan')):.4f}")


def cmd_hide(parser, args):
    from .image import load_image, save_image, to_gray, to_rgb
    from .networks import hide

    ckpt = _load_nets(_model_path(parser, args), "encoder")
    stego = hide(to_rgb(load_image(args.cover)), to_gray(load_image(args.secret)), ckpt["encoder"])
    save_image(stego, args.out)
    print(f"wrote {args.out}")


def cmd_reveal(parser, args):
    from .image import load_image, save_image, to_rgb
    from .networks import reveal

    ckpt = _load_nets(_model_path(parser, args), "decoder")
    save_image(reveal(to_rgb(load_image(args.stego)), ckpt["decoder"]), args.out)
    print(f"wrote {args.out}")


def cmd_evaluate(parser, args):
    from .evaluation import evaluate_quality

    path = _model_path(parser, args)
    ckpt = _load_nets(path, "encoder", "decoder")
    _, pairs = _pairs(args)
    report = evaluate_quality(ckpt["encoder"], ckpt["decoder"], pairs,
                              dataset=f"{Path(args.data).name}:{args.split}", checkpoint=path.name)
    if args.out:
        csv_path, json_path = report.save(args.out)
        print(f"wrote {csv_path} and {json_path}")
    else:
        sys.stdout.write(report.to_json())
    agg = report.aggregate
    log.info("stego-cover %.2f dB / %.4f, revealed-secret %.2f dB / %.4f", agg["stego_cover_psnr"],
             agg["stego_cover_ssim"], agg["revealed_secret_psnr"], agg["revealed_secret_ssim"])


def cmd_steganalyze(parser, args):
    from .image import load_image, to_rgb
    from .networks import steganalyze

    ckpt = _load_nets(_model_path(parser, args), "steganalyzer")
    p_cover, p_stego = steganalyze(to_rgb(load_image(args.image)), ckpt["steganalyzer"])
    print(json.dumps({"cover": p_cover, "stego": p_stego}))


def cmd_grad_check(parser, args):
    from .nn.gradcheck import run_suite

    reports = run_suite()
    for r in reports:
        print(r.summary())
    if not all(r.passed for r in reports):
        raise IsganError(f"{sum(not r.passed for r in reports)} gradient check(s) failed")


def cmd_make_corpus(parser, args):
    from .data import build_sample_corpus

    paths = build_sample_corpus(args.out, args.count, args.size, args.seed)
    print(f"wrote {len(paths)} images to {args.out}")


COMMANDS = {
    "train": cmd_train,
    "hide": cmd_hide,
    "reveal": cmd_reveal,
    "evaluate": cmd_evaluate,
    "steganalyze": cmd_steganalyze,
    "grad-check": cmd_grad_check,
    "make-corpus": cmd_make_corpus,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        COMMANDS[args.command](parser, args)
    except (IsganError, OSError, ValueError) as exc:
        print(f"isgan {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point.

Subcommands: gen-data, train, eval, segment, inspect-prompts. All failure
paths print a single machine-parsable line ``error:<code>: message`` and
exit nonzero (2 usage, 3 split violation, 4 empty support mask, 1 other).
The APL_SEED environment variable supplies --seed wherever the flag is
accepted but absent.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .config import RunConfig, parse_config
from .data import (SyntheticConfig, default_class_params, load_dataset,
                   parse_split, read_image, read_mask, write_mask,
                   write_synthetic_dataset)
from .errors import ConfigError, EmptySupportMask, SplitViolation
from .model import SegModel
from .prompts import cluster, compute_n_centroids, masked_features
from .tensor import no_grad
from .training import evaluate, evaluate_predictor, train


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems in the error:<code>: format."""

    def error(self, message):
        print(f"error:usage: {message}", file=sys.stderr)
        raise SystemExit(2)


def _seed_default(value: int | None, fallback: int = 0) -> int:
    if value is not None:
        return value
    env = os.environ.get("APL_SEED")
    return int(env) if env is not None else fallback


def _build_parser() -> _Parser:
    p = _Parser(prog="aplseg", description="Few-shot segmentation toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[], help="write a synthetic dataset",
                       description="Generate a synthetic image/mask corpus.")
    g.add_argument("--out", required=True, help="dataset root directory")
    g.add_argument("--classes", type=int, default=5,
                   help="number of built-in classes to emit (1-5, default 5)")
    g.add_argument("--per-class", type=int, required=True,
                   help="image/mask pairs per class")
    g.add_argument("--size", type=int, default=64,
                   help="square image size, power of two (default 64)")
    g.add_argument("--seed", type=int, default=None,
                   help="generator seed (default APL_SEED or 0)")

    t = sub.add_parser("train", help="train a model on the train split",
                       description="Episodic training; writes checkpoint and CSV log.")
    t.add_argument("--data", required=True, help="dataset root")
    t.add_argument("--split", required=True, help="split file (train:/test: lines)")
    t.add_argument("--config", default=None,
                   help="run config file (key = value lines; default: built-ins)")
    t.add_argument("--out", required=True, help="checkpoint output path")

    e = sub.add_parser("eval", help="score a checkpoint on the test split",
                       description="Evaluate over deterministic held-out episodes.")
    e.add_argument("--ckpt", required=True,
                   help="checkpoint path, or 'oracle' for a ground-truth echo")
    e.add_argument("--data", required=True, help="dataset root")
    e.add_argument("--split", required=True, help="split file")
    e.add_argument("--episodes", type=int, default=50,
                   help="evaluation episode count (default 50)")
    e.add_argument("--seed", type=int, default=None,
                   help="episode stream seed (default APL_SEED or 0)")
    e.add_argument("--csv", default=None,
                   help="report CSV path (default <ckpt>.eval.csv)")

    s = sub.add_parser("segment", help="segment one query image",
                       description="One-shot segmentation; writes mask and overlay PNGs.")
    s.add_argument("--ckpt", required=True, help="checkpoint path")
    s.add_argument("--support-image", required=True)
    s.add_argument("--support-mask", required=True)
    s.add_argument("--query", required=True)
    s.add_argument("--out", required=True,
                   help="output prefix; writes <out>_mask.png and <out>_overlay.png")

    i = sub.add_parser("inspect-prompts", help="report prompt clustering internals",
                       description="Print centroid count, seeds, and iteration trace.")
    i.add_argument("--ckpt", required=True, help="checkpoint path")
    i.add_argument("--support-image", required=True)
    i.add_argument("--support-mask", required=True)
    return p


def _cmd_gen_data(args, parser: _Parser) -> int:
    if args.per_class < 1:
        parser.error("--per-class must be >= 1")
    all_params = list(default_class_params().values())
    if not 1 <= args.classes <= len(all_params):
        parser.error(f"--classes must be in 1..{len(all_params)}")
    try:
        cfg = SyntheticConfig(image_size=args.size)
    except ConfigError as exc:
        parser.error(str(exc))
    seed = _seed_default(args.seed)
    counts = write_synthetic_dataset(args.out, all_params[:args.classes],
                                     args.per_class, cfg, seed)
    for name in sorted(counts):
        print(f"{name}: {counts[name]}")
    print(f"total: {sum(counts.values())}")
    return 0


def _cmd_train(args) -> int:
    if args.config is not None:
        cfg = parse_config(Path(args.config).read_text())
    else:
        cfg = RunConfig()
    ds = load_dataset(args.data)
    split = parse_split(Path(args.split).read_text())
    train(cfg, ds, split, out_path=args.out, log_path=str(args.out) + ".log.csv")
    print(f"checkpoint: {args.out}")
    print(f"log: {args.out}.log.csv")
    return 0


def _cmd_eval(args, parser: _Parser) -> int:
    if args.episodes < 1:
        parser.error("--episodes must be >= 1")
    ds = load_dataset(args.data)
    split = parse_split(Path(args.split).read_text())
    seed = _seed_default(args.seed)
    if args.ckpt == "oracle":
        report = evaluate_predictor(lambda ep: ep.query_gt, ds,
                                    split.test_classes, args.episodes, seed)
        csv_path = Path(args.csv) if args.csv else Path("oracle.eval.csv")
    else:
        report = evaluate(args.ckpt, ds, split.test_classes, args.episodes, seed)
        csv_path = Path(args.csv) if args.csv else Path(str(args.ckpt) + ".eval.csv")
    print(report.table())
    csv_path.write_text(report.to_csv())
    print(f"csv: {csv_path}")
    return 0


def _write_overlay(path: Path, image: np.ndarray, mask: np.ndarray) -> None:
    # Red-tinted overlay: predicted foreground blended 50/50 with pure red.
    rgb = np.stack([image, image, image], axis=-1)
    red = np.array([1.0, 0.0, 0.0])
    fg = mask.astype(bool)
    rgb[fg] = 0.5 * rgb[fg] + 0.5 * red
    Image.fromarray(np.rint(rgb * 255.0).astype(np.uint8), mode="RGB").save(path)


def _cmd_segment(args) -> int:
    model, _ = SegModel.load(args.ckpt)
    support = read_image(args.support_image)
    mask = read_mask(args.support_mask)
    query = read_image(args.query)
    with no_grad():
        pred = model.predict(support, mask, query)
    prefix = str(args.out)
    if prefix.endswith(".png"):
        prefix = prefix[:-4]
    write_mask(Path(prefix + "_mask.png"), pred)
    _write_overlay(Path(prefix + "_overlay.png"), query, pred)
    print(f"mask: {prefix}_mask.png")
    print(f"overlay: {prefix}_overlay.png")
    return 0


def _cmd_inspect_prompts(args) -> int:
    model, _ = SegModel.load(args.ckpt)
    support = read_image(args.support_image)
    mask = read_mask(args.support_mask)
    apl_cfg = model.cfg.apl_config()
    with no_grad():
        feats = model.encode_image(support)
        mask_small = model.support_grid_mask(mask)
        msf = masked_features(feats.levels[3], mask_small)
        trace: list = []
        prompts = cluster(msf, apl_cfg, trace=trace)
    print(f"n_m: {msf.n_m}")
    print(f"a_sp: {apl_cfg.a_sp}")
    print(f"n_max: {apl_cfg.n_max}")
    print(f"n_c: {compute_n_centroids(msf.n_m, apl_cfg.a_sp, apl_cfg.n_max)}")
    print(f"prompts: {prompts.n_c}")
    for i in range(prompts.seed_coords.shape[1]):
        row, col = prompts.seed_coords[:, i]
        print(f"seed,{i},{int(row)},{int(col)}")
    print("trace: iter,i,dim,value")
    for it, centroids in trace:
        for i in range(centroids.shape[1]):
            for dim in range(centroids.shape[0]):
                print(f"{it},{i},{dim},{float(centroids[dim, i])!r}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "gen-data":
            return _cmd_gen_data(args, parser)
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "eval":
            return _cmd_eval(args, parser)
        if args.command == "segment":
            return _cmd_segment(args)
        if args.command == "inspect-prompts":
            return _cmd_inspect_prompts(args)
        parser.error(f"unknown command {args.command}")
    except SystemExit:
        raise
    except SplitViolation as exc:
        print(f"error:split: {exc}", file=sys.stderr)
        return 3
    except EmptySupportMask as exc:
        print(f"error:empty-mask: {exc}", file=sys.stderr)
        return 4
    except Exception as exc:  # noqa: BLE001 - single reporting funnel
        print(f"error:{type(exc).__name__.lower()}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

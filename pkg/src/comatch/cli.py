"""Command line entry point: ``comatch <command> ...``.

Exit codes: 0 success, 1 usage / configuration error, 2 data error,
3 numeric abort (training diverged).
"""

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import time

from .data import DataConfig, eval_corpus, gen_corpus, load_corpus, save_corpus
from .errors import DataError, NumericAbort, ParameterError
from .harness import (SWEEP_PARAMS, THRESHOLDS, TrainConfig, ablate, bench_group, emit_masks,
                      eval_seed_miou, model_cfg_from_meta, sweep, train, write_csv)
from .network import load_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("comatch")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- config

_TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}
_DATA_FIELDS = {f.name for f in dataclasses.fields(DataConfig)}


def load_config(path):
    """Split one flat JSON object into ``(TrainConfig, DataConfig)``.

    Keys are the field names of either dataclass (``seed`` feeds both);
    anything else is rejected.
    """
    if path is None:
        return TrainConfig(), DataConfig()
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    unknown = sorted(set(raw) - _TRAIN_FIELDS - _DATA_FIELDS)
    if unknown:
        raise UsageError(f"{path}: unknown config keys {unknown}")
    try:
        tcfg = TrainConfig(**{k: v for k, v in raw.items() if k in _TRAIN_FIELDS})
        dcfg = DataConfig(**{k: v for k, v in raw.items() if k in _DATA_FIELDS})
    except (TypeError, ParameterError) as exc:
        raise UsageError(f"{path}: {exc}") from None
    return tcfg, dcfg


def _corpus_dir(path, split):
    """A directory written by ``gen`` holds ``train/`` and ``eval/``; accept either level."""
    if os.path.exists(os.path.join(path, "labels.csv")):
        return path
    sub = os.path.join(path, split)
    if os.path.exists(os.path.join(sub, "labels.csv")):
        return sub
    raise DataError(f"{path}: no labels.csv (nor {split}/labels.csv)")


def _parse_range(text):
    """``"2..5"`` -> [2, 3, 4, 5]; also accepts ``"2,3,5"``."""
    try:
        if ".." in text:
            lo, hi = text.split("..")
            return list(range(int(lo), int(hi) + 1))
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"bad group-size range {text!r}") from None


# ---------------------------------------------------------------- commands

def cmd_gen(args):
    _, dcfg = load_config(args.config)
    save_corpus(gen_corpus(dcfg), os.path.join(args.out, "train"))
    save_corpus(eval_corpus(dcfg), os.path.join(args.out, "eval"))
    print(f"wrote {dcfg.scenes} train and {dcfg.eval_scenes} eval scenes to {args.out}")


def cmd_train(args):
    tcfg, dcfg = load_config(args.config)
    corpus = load_corpus(_corpus_dir(args.data, "train")) if args.data else gen_corpus(dcfg)
    t0 = time.perf_counter()
    try:
        _, report = train(corpus, tcfg, checkpoint_path=args.out)
    except NumericAbort as exc:
        if exc.report is not None:
            with open(args.out + ".report.json", "w") as fh:
                fh.write(exc.report.to_json())
        raise
    with open(args.out + ".report.json", "w") as fh:
        fh.write(report.to_json())
    with open(args.out + ".timing.json", "w") as fh:
        json.dump({"train_seconds": time.perf_counter() - t0}, fh)
    print(f"checkpoint {args.out}  final loss {report.losses[-1] if report.losses else float('nan'):.4f}")


def cmd_eval(args):
    params, meta = load_checkpoint(args.ckpt)
    cfg = model_cfg_from_meta(meta)
    corpus = load_corpus(_corpus_dir(args.data, "eval"))
    scores, best = eval_seed_miou(params, corpus, cfg, THRESHOLDS)
    with open(args.report, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "miou", "best"])
        for t in THRESHOLDS:
            writer.writerow([f"{t:.2f}", f"{scores[t]:.6f}", int(t == best)])
    if args.masks:
        emit_masks(params, corpus, cfg, args.masks, threshold=best)
    print(f"seed mIoU {scores[best]:.4f} at threshold {best:.2f}")


def cmd_ablate(args):
    tcfg, dcfg = load_config(args.config)
    rows = ablate(gen_corpus(dcfg), eval_corpus(dcfg), tcfg, args.out)
    for r in rows:
        print(f"{r['variant']:>8}  mIoU {r['miou']:.4f}  (threshold {r['best_threshold']:.2f})")


def cmd_sweep(args):
    tcfg, dcfg = load_config(args.config)
    rows = sweep(gen_corpus(dcfg), eval_corpus(dcfg), tcfg, args.param, args.values, args.out)
    for r in rows:
        print(f"{args.param}={r['value']}  mIoU {r['miou']:.4f}")


def cmd_bench_group(args):
    sizes = _parse_range(args.n)
    if not sizes or min(sizes) < 2 or max(sizes) > 5:
        raise UsageError("group sizes must lie in 2..5")
    rows = bench_group(sizes, rows=args.rows, cols=args.cols, c=args.channels, trials=args.trials)
    write_csv(args.out, rows)
    for r in rows:
        print(f"N={r['group_n']}  median {1e3 * r['seconds']:.3f} ms")


def build_parser():
    parser = _Parser(prog="comatch", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="write a synthetic train/eval corpus")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train one model and write a checkpoint")
    p.add_argument("--config")
    p.add_argument("--data", help="corpus directory (default: generate from the config)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="seed mIoU of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="per-threshold CSV")
    p.add_argument("--masks", help="also write seed/CAM PGMs to this directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="baseline / +inter / +intra / both")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="one run per value of alpha, k or group_n")
    p.add_argument("--config")
    p.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    p.add_argument("--values", required=True, nargs="+", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench-group", help="inter-matching wall time per group size")
    p.add_argument("--n", default="2..5", help="sizes, e.g. 2..5 or 2,3")
    p.add_argument("--rows", type=int, default=8)
    p.add_argument("--cols", type=int, default=8)
    p.add_argument("--channels", type=int, default=32)
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench_group)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"comatch: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ParameterError as exc:
        print(f"comatch: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericAbort as exc:
        print(f"comatch: numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"comatch: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end.

Subcommands: prepare | train | eval | longgen | mask-dump | dep.
Experiment configuration is a JSON file (see README for the schema); the
output root can be overridden with GISTKV_OUT.
"""
from __future__ import annotations

import argparse
import json
import sys

from . import bench
from .corpus import build_layout, task_vocab
from .masks import MaskMode, build_mask, dump_mask
from .metrics import dep_h2o_closed, dep_vanilla_closed


def _add_config_arg(p):
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--out", default="results", help="output directory")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="gistkv")
    sub = parser.add_subparsers(dest="command", required=True)

    _add_config_arg(sub.add_parser("prepare", help="generate corpus + split"))
    ptrain = sub.add_parser("train", help="train one checkpoint per sweep cell")
    _add_config_arg(ptrain)
    ptrain.add_argument("--log-every", type=int, default=0)
    _add_config_arg(sub.add_parser("eval", help="evaluate checkpoints"))

    plong = sub.add_parser("longgen", help="long-generation mechanics study")
    plong.add_argument("--out", default="results")
    plong.add_argument("--prompt-len", type=int, default=125)
    plong.add_argument("--chunk-len", type=int, default=56)
    plong.add_argument("--cache-size", type=int, default=7)
    plong.add_argument(
        "--lengths",
        default="1024,2048,4096,8192,16384,32768",
        help="comma-separated output lengths",
    )
    plong.add_argument("--measure-time", action="store_true")

    pmask = sub.add_parser("mask-dump", help="print a mask raster")
    pmask.add_argument("--mode", default="thought_cache", choices=[m.value for m in MaskMode])
    pmask.add_argument("--question-len", type=int, default=2)
    pmask.add_argument("--thought-lens", default="2,2", help="comma-separated")
    pmask.add_argument("--cache-size", type=int, default=1)

    pdep = sub.add_parser("dep", help="closed-form dependency calculator")
    pdep.add_argument("--prompt-len", type=int, required=True)
    pdep.add_argument("--output-len", type=int, required=True)
    pdep.add_argument("--budget", type=int, default=None, help="eviction budget (omit for vanilla)")

    args = parser.parse_args(argv)

    if args.command == "prepare":
        cfg = bench.ExperimentConfig.from_file(args.config)
        train_set, hold_set = bench.cmd_prepare(cfg, args.out)
        print(f"wrote {len(train_set)} train / {len(hold_set)} holdout samples")
    elif args.command == "train":
        cfg = bench.ExperimentConfig.from_file(args.config)
        for path in bench.cmd_train(cfg, args.out, log_every=args.log_every):
            print(f"checkpoint: {path}")
    elif args.command == "eval":
        cfg = bench.ExperimentConfig.from_file(args.config)
        summary = bench.cmd_eval(cfg, args.out)
        for run in summary["runs"]:
            acc = run.get("accuracy", 0.0)
            print(
                f"{run['name']:32s} acc={acc:5.1%} dep={run.get('dep_total', 0):>9d} "
                f"peak={run.get('peak_mean', 0.0):7.1f} "
                f"time={run.get('time_median_s', 0.0):6.3f}s"
            )
        print(summary["sweep_note"])
    elif args.command == "longgen":
        lengths = tuple(int(x) for x in args.lengths.split(","))
        rows = bench.cmd_longgen(
            out_lengths=lengths,
            prompt_len=args.prompt_len,
            chunk_len=args.chunk_len,
            cache_size=args.cache_size,
            measure_time=args.measure_time,
            outdir=args.out,
        )
        for row in rows:
            line = (
                f"L_O={row['n_output']:>6d}  peak {row['peak_vanilla']:>6d} -> "
                f"{row['peak_compressed']:>5d} ({row['peak_reduction']:5.1%} reduction)"
            )
            if "time_vanilla_s" in row:
                line += (
                    f"  time {row['time_vanilla_s']:.3f}s -> {row['time_compressed_s']:.3f}s"
                )
            print(line)
    elif args.command == "mask-dump":
        vocab = task_vocab(args.cache_size)
        thought_lens = [int(x) for x in args.thought_lens.split(",")]
        question = list(range(args.question_len))
        segments = [[0] * n for n in thought_lens]
        layout = build_layout(question, segments, vocab)
        print(dump_mask(build_mask(layout, MaskMode(args.mode))))
    elif args.command == "dep":
        if args.budget is None:
            value = dep_vanilla_closed(args.prompt_len, args.output_len)
        else:
            value = dep_h2o_closed(args.prompt_len, args.output_len, args.budget)
        print(json.dumps({"dep_closed": value}))
    return 0


if __name__ == "__main__":
    sys.exit(main())

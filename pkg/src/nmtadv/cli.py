"""Command-line entry point: ``nmtadv <subcommand> [--seed N] [--config FILE] [--out DIR]``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .campaign import METHODS
from .errors import NmtAdvError


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="campaign seed (eval-set sampling, attack rngs)")
    common.add_argument("--config", type=Path, help="plain-text key=value overrides, e.g. nmt.steps=500")
    common.add_argument("--out", type=Path, default=Path("runs/default"), help="working directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="nmtadv", description="Targeted-word attacks on toy NMT models.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate the toyspeak corpora and lexicons")
    sub.add_parser("train-nmt", parents=[common], help="train the victim translation model")
    lm = sub.add_parser("train-lm", parents=[common], help="train the fluency language models")
    lm.add_argument("--direction", choices=["l2r", "r2l", "both"], default="both")
    ev = sub.add_parser("build-evalset", parents=[common], help="sample targeted words and calibrate delta")
    ev.add_argument("--corpus", choices=["test", "para"], help="overrides eval.corpus")
    at = sub.add_parser("attack", parents=[common], help="attack every evaluation sample")
    at.add_argument("--method", choices=METHODS, required=True)
    at.add_argument("--name", help="result file stem (default: the method name)")
    q = sub.add_parser("quantify-invalid", parents=[common], help="invalid-attack rates for legacy records")
    q.add_argument("--legacy", type=Path, required=True, help="legacy attack records (JSON lines)")
    q.add_argument("--dict", type=Path, help="dictionary file (default: OUT/data/dict.tsv)")
    rp = sub.add_parser("report", parents=[common], help="aggregate results into report.jsonl/report.txt")
    rp.add_argument("--legacy", type=Path, help="also include an invalidity table")
    return p


def run(argv=None) -> None:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    cfg = pipeline.PipelineConfig()
    if args.config is not None:
        cfg = cfg.with_overrides(pipeline.read_config_file(args.config))
    out = args.out
    cmd = args.command
    if cmd == "gen-data":
        print(pipeline.gen_data(out, cfg))
    elif cmd == "train-nmt":
        pipeline.train_nmt_stage(out, cfg)
        print((out / "models" / "nmt_accuracy.txt").read_text().strip())
    elif cmd == "train-lm":
        for d in (["l2r", "r2l"] if args.direction == "both" else [args.direction]):
            m = pipeline.train_lm_stage(out, cfg, d)
            print(f"{d} held-out perplexity {m.heldout_perplexity:.3f}")
    elif cmd == "build-evalset":
        if args.corpus:
            cfg = cfg.with_overrides({"eval.corpus": args.corpus})
        print(f"{len(pipeline.build_evalset_stage(out, cfg, args.seed))} samples")
    elif cmd == "attack":
        res = pipeline.attack_stage(out, cfg, args.method, args.seed, name=args.name)
        print(f"{args.method}: {sum(r.success for r in res)}/{len(res)} successes")
    elif cmd == "quantify-invalid":
        print(pipeline.quantify_stage(args.legacy, args.dict or out / "data" / "dict.tsv", out), end="")
    elif cmd == "report":
        print(pipeline.report_stage(out, cfg, args.seed, args.legacy).table(), end="")


def main(argv=None) -> int:
    try:
        run(argv)
    except (NmtAdvError, OSError, ValueError, KeyError) as exc:
        print(f"nmtadv: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

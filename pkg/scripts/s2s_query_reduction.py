"""Projected embedding attack: 200 iterations vs 50 iterations with early stop on the same 100 samples."""
import argparse
import dataclasses
import json
import logging

from common import RUN, Timer, load_config, seed_dir
from nmtadv import pipeline
from nmtadv.campaign import aggregate, run_attack
from nmtadv.victim import Victim


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n", type=int, default=100)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = load_config()
    out = seed_dir(args.seed)
    samples, delta = pipeline.load_eval(out)
    samples = samples[: args.n]
    model, lms = pipeline.load_models(out)
    timer = Timer()
    rows = {}
    for name, bcfg in (("full", cfg.baseline), ("reduced", cfg.baseline.query_reduced())):
        res = timer.lap(name, run_attack, "seq2sick", samples, Victim(model, cfg.attack.beam_size), lms, delta,
                        cfg.attack, bcfg, args.seed)
        rows[name] = dataclasses.asdict(aggregate(name, res))
        print(rows[name])
    (RUN / "s2s_reduction.json").write_text(json.dumps({"seed": args.seed, "n": len(samples), **rows,
                                                        "seconds": timer.laps}, indent=1) + "\n")


if __name__ == "__main__":
    main()

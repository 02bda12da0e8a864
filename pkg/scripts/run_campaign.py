"""Full five-attack campaign for one or more seeds; writes runs/toy/seed<N>/{eval,results,report.*,timing.json}."""
import argparse
import logging

from common import SEEDS, Timer, load_config, seed_dir
from nmtadv import pipeline
from nmtadv.victim import Victim


def campaign(seed: int, cfg) -> None:
    out = seed_dir(seed)
    timer = Timer()
    timer.lap("build-evalset", pipeline.build_evalset_stage, out, cfg, seed)
    models = pipeline.load_models(out)
    for method in pipeline.METHODS:
        # a fresh victim per method: the decode memo must not leak work between attacks
        victim = Victim(models[0], cfg.attack.beam_size)
        res = timer.lap(method, pipeline.attack_stage, out, cfg, method, seed, victim=victim, models=models)
        print(f"seed {seed} {method}: {sum(r.success for r in res)}/{len(res)} in {timer.laps[method]}s")
    print(pipeline.report_stage(out, cfg, seed).table())
    timer.dump(out / "timing.json")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=list(SEEDS))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = load_config()
    for s in args.seeds:
        campaign(s, cfg)


if __name__ == "__main__":
    main()

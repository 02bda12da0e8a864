"""Generate toyspeak, train the victim and both fluency LMs under runs/toy (skips finished stages)."""
import argparse
import logging

from common import RUN, load_config
from nmtadv import pipeline


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--force", action="store_true", help="rebuild even if outputs exist")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = load_config()
    if args.force or not (RUN / "data" / "train.tsv").exists():
        pipeline.gen_data(RUN, cfg)
    if args.force or not (RUN / "models" / "nmt.ckpt").exists():
        pipeline.train_nmt_stage(RUN, cfg)
    print("held-out token accuracy", (RUN / "models" / "nmt_accuracy.txt").read_text().strip())
    for d in ("l2r", "r2l"):
        if args.force or not (RUN / "models" / f"lm_{d}.ckpt").exists():
            m = pipeline.train_lm_stage(RUN, cfg, d)
            print(d, "held-out perplexity", round(m.heldout_perplexity, 3))


if __name__ == "__main__":
    main()

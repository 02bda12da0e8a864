"""Shared helpers for the experiment runners: artifact locations and per-seed work dirs."""
from __future__ import annotations

import json
import os
import time
from pathlib import Path

from nmtadv import pipeline

ROOT = Path(__file__).resolve().parent.parent
RUN = ROOT / "runs" / "toy"
CONFIG = ROOT / "runs" / "toy.cfg"
SEEDS = (0, 1, 2)


def load_config() -> pipeline.PipelineConfig:
    cfg = pipeline.PipelineConfig()
    if CONFIG.exists():
        cfg = cfg.with_overrides(pipeline.read_config_file(CONFIG))
    return cfg


def seed_dir(seed: int) -> Path:
    """runs/toy/seed<N>, sharing data/ and models/ with runs/toy through symlinks."""
    d = RUN / f"seed{seed}"
    d.mkdir(parents=True, exist_ok=True)
    for name in ("data", "models"):
        link = d / name
        if not link.exists():
            os.symlink(Path("..") / name, link)
    return d


class Timer:
    def __init__(self):
        self.laps: dict[str, float] = {}

    def lap(self, name: str, fn, *args, **kw):
        t = time.perf_counter()
        out = fn(*args, **kw)
        self.laps[name] = round(time.perf_counter() - t, 3)
        return out

    def dump(self, path: Path) -> None:
        path.write_text(json.dumps({**self.laps, "total": round(sum(self.laps.values()), 3)}, indent=1) + "\n")

"""Evaluation-set construction, attack campaigns, reports and the legacy
invalidity quantification table."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .baselines import ATTACKS, BaselineConfig
from .errors import MetricError, NmtAdvError, RecordError
from .nmt import beam_decode
from .twga import AttackConfig, AttackResult, twga_attack
from .validity import (BilingualDictionary, EvaluationSample, LegacyPair, classify_invalid,
                       contains_translation, edit_score, make_sample, mean_query, succ_rate)
from .victim import Victim
from . import autodiff as ad

log = logging.getLogger(__name__)

CONTENT_TAGS = ("noun", "verb", "adjective", "adverb")
METHODS = ("twga", "rr", "wtextfooler", "targeted-flips", "seq2sick")


# -- evaluation set -------------------------------------------------------------------

def candidate_positions(words: Sequence[str], dictionary: BilingualDictionary, pos: dict[str, str],
                        stopwords: Iterable[str]) -> list[int]:
    stop = set(stopwords)
    return [i for i, w in enumerate(words)
            if pos.get(w) in CONTENT_TAGS and w not in stop and w in dictionary]


def build_eval_set(sources: Sequence[str], dictionary: BilingualDictionary, pos: dict[str, str],
                   stopwords: Iterable[str], model, seed: int = 0, max_targets: int = 3,
                   beam_size: int | None = None) -> list[EvaluationSample]:
    """Up to ``max_targets`` targeted words per sentence, kept only where the
    model's clean translation already contains a translation of the word."""
    stopwords = list(stopwords)
    rng = np.random.default_rng([seed, 101])
    samples = []
    for sent_id, src in enumerate(sources):
        words = src.split()
        cands = candidate_positions(words, dictionary, pos, stopwords)
        if not cands:
            continue
        if len(cands) > max_targets:
            cands = sorted(int(c) for c in rng.choice(cands, size=max_targets, replace=False))
        ids = model.src_vocab.encode(src)
        with ad.no_grad():
            y = beam_decode(model, ids, beam_size)
        for wi in cands:
            s = make_sample(src, wi, dictionary, model.src_vocab, model.tgt_vocab, y.text, sent_id)
            if contains_translation(y, s.Z):
                samples.append(s)
    return samples


def write_eval_set(path: str | Path, samples: Sequence[EvaluationSample]) -> None:
    Path(path).write_text("".join(json.dumps(s.to_json(), sort_keys=True) + "\n" for s in samples),
                          encoding="utf-8")


def read_eval_set(path: str | Path) -> list[EvaluationSample]:
    return [EvaluationSample.from_json(json.loads(ln))
            for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]


# -- campaigns --------------------------------------------------------------------------

@dataclass
class CampaignRow:
    method: str
    n_samples: int
    succ: float
    edit: float | None
    query: float


def aggregate(method: str, records: Sequence[AttackResult]) -> CampaignRow:
    """Succ/Edit/Query from per-sample records; repeated runs of a sample are averaged first."""
    if not records:
        raise MetricError(f"no results to aggregate for {method}")
    by_sample: dict[tuple, list[AttackResult]] = {}
    for r in records:
        by_sample.setdefault((r.sample, r.sent_id, r.z), []).append(r)
    succ = [np.mean([r.success for r in rs]) for rs in by_sample.values()]
    query = [np.mean([r.query_count for r in rs]) for rs in by_sample.values()]
    edits = [r.edit for r in records if r.success]
    return CampaignRow(method, len(by_sample), round(succ_rate(succ), 6),
                       round(float(np.mean(edits)), 6) if edits else None, round(mean_query(query), 6))


@dataclass
class CampaignReport:
    rows: list[CampaignRow]
    records: dict[str, list[AttackResult]]
    config: dict = field(default_factory=dict)
    seed: int = 0
    invalidity: list[dict] = field(default_factory=list)

    def to_jsonl(self) -> str:
        lines = [json.dumps({"kind": "config", "seed": self.seed, "config": self.config}, sort_keys=True)]
        lines += [json.dumps({"kind": "row", **asdict(r)}, sort_keys=True) for r in self.rows]
        lines += [json.dumps({"kind": "invalidity", **r}, sort_keys=True) for r in self.invalidity]
        return "\n".join(lines) + "\n"

    def table(self) -> str:
        out = [f"{'method':<16}{'n':>6}{'Succ':>10}{'Edit':>10}{'Query':>10}"]
        for r in self.rows:
            edit = f"{r.edit:.2f}" if r.edit is not None else "-"
            out.append(f"{r.method:<16}{r.n_samples:>6}{r.succ:>10.2f}{edit:>10}{r.query:>10.2f}")
        if self.invalidity:
            out.append("")
            out.append(format_invalidity(self.invalidity))
        return "\n".join(out) + "\n"


def _attack_fn(method: str, attack_config: AttackConfig, baseline_config: BaselineConfig) -> Callable:
    if method == "twga":
        return lambda v, lms, d, s, rng: twga_attack(v, lms, d, s, attack_config, rng)
    if method not in ATTACKS:
        raise RecordError(f"unknown attack method {method!r}")
    fn = ATTACKS[method]
    return lambda v, lms, d, s, rng: fn(v, lms, d, s, baseline_config, rng)


def run_attack(method: str, eval_set: Sequence[EvaluationSample], victim: Victim, lms, delta: float,
               attack_config: AttackConfig | None = None, baseline_config: BaselineConfig | None = None,
               seed: int = 0, progress_every: int = 0) -> list[AttackResult]:
    """Attack every sample with an rng stream derived from (seed, sample index, run)."""
    attack_config = attack_config or AttackConfig()
    baseline_config = baseline_config or BaselineConfig()
    fn = _attack_fn(method, attack_config, baseline_config)
    runs = baseline_config.rr_runs if method == "rr" else 1
    vocab = victim.src_vocab
    out = []
    for idx, sample in enumerate(eval_set):
        for run in range(runs):
            rng = np.random.default_rng([seed, idx, run])
            before = victim.queries
            try:
                res = fn(victim, lms, delta, sample, rng)
            except NmtAdvError as exc:
                res = AttackResult(method, sample.sent_id, sample.z, False, list(sample.x_ids),
                                   list(sample.x_ids), vocab.decode(sample.x_ids), [], "",
                                   0.0, victim.queries - before, error=f"{type(exc).__name__}: {exc}")
            res.method, res.run, res.sample = method, run, idx
            if res.query_count != victim.queries - before:
                raise RecordError(f"{method}: reported {res.query_count} queries but the victim "
                                  f"counted {victim.queries - before} on sample {idx}")
            out.append(res)
        if progress_every and (idx + 1) % progress_every == 0:
            log.info("%s: %d/%d samples", method, idx + 1, len(eval_set))
    return out


def run_campaign(methods: Sequence[str], eval_set, victim: Victim, lms, delta: float,
                 attack_config: AttackConfig | None = None, baseline_config: BaselineConfig | None = None,
                 seed: int = 0, extra_config: dict | None = None) -> CampaignReport:
    if not eval_set:
        raise MetricError("empty evaluation set")
    attack_config = attack_config or AttackConfig()
    baseline_config = baseline_config or BaselineConfig()
    records = {m: run_attack(m, eval_set, victim, lms, delta, attack_config, baseline_config, seed)
               for m in methods}
    config = {"attack": asdict(attack_config), "baseline": asdict(baseline_config), "delta": delta,
              **(extra_config or {})}
    return CampaignReport([aggregate(m, rs) for m, rs in records.items()], records, config, seed)


def write_results(path: str | Path, results: Sequence[AttackResult]) -> None:
    Path(path).write_text("".join(r.to_json() + "\n" for r in results), encoding="utf-8")


def read_results(path: str | Path) -> list[AttackResult]:
    return [AttackResult.from_json(ln) for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]


# -- legacy-setting quantification ------------------------------------------------------

def read_legacy(path: str | Path) -> list[dict]:
    return [json.loads(ln) for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]


def legacy_pair(rec: dict) -> LegacyPair:
    if rec.get("setting") not in (1, 2):
        raise RecordError(f"legacy record without a valid setting label: {rec!r}")
    return LegacyPair(rec["x"], rec["x_adv"], rec["r"], rec["w"], int(rec["setting"]), rec.get("label"))


def quantify_invalid(records: Sequence[dict], dictionary: BilingualDictionary) -> list[dict]:
    """Per (attack, setting): Succ over all attempts and Invalid over the successful ones."""
    groups: dict[tuple, list[tuple[bool, bool]]] = {}
    for rec in records:
        pair = legacy_pair(rec)
        ok = bool(rec.get("success", True))
        groups.setdefault((rec.get("attack", "-"), pair.setting), []).append(
            (ok, ok and classify_invalid(pair, dictionary)))
    rows = []
    for (attack, setting), vals in sorted(groups.items()):
        n_succ = sum(ok for ok, _ in vals)
        n_bad = sum(bad for _, bad in vals)
        rows.append({"attack": attack, "setting": setting, "n": len(vals),
                     "succ": 100.0 * n_succ / len(vals),
                     "invalid": 100.0 * n_bad / n_succ if n_succ else None})
    return rows


def format_invalidity(rows: Sequence[dict]) -> str:
    out = [f"{'attack':<16}{'setting':>8}{'n':>6}{'Succ':>10}{'Invalid':>10}"]
    for r in rows:
        inv = f"{r['invalid']:.2f}" if r["invalid"] is not None else "-"
        out.append(f"{r['attack']:<16}{r['setting']:>8}{r['n']:>6}{r['succ']:>10.2f}{inv:>10}")
    return "\n".join(out)

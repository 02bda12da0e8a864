"""End-to-end stages shared by the CLI, the experiment scripts and the tests.

Directory layout under ``out``::

    data/      generated corpora, dictionary, POS lexicon, stopwords
    models/    nmt.ckpt, lm_l2r.ckpt, lm_r2l.ckpt (+ vocabulary files)
    eval/      evalset.jsonl, delta.txt
    results/   <method>.jsonl
    report.jsonl, report.txt
"""
from __future__ import annotations

import dataclasses
import json
import logging
import typing
from dataclasses import dataclass, field
from pathlib import Path

from . import lm as lmmod
from . import nmt
from .baselines import BaselineConfig
from .campaign import (METHODS, CampaignReport, aggregate, build_eval_set, format_invalidity, quantify_invalid,
                       read_eval_set, read_legacy, read_results, run_attack, write_eval_set, write_results)
from .errors import DataError, ParameterError
from .toyspeak import ToyspeakSpec, generate_toyspeak, read_corpus, read_lines, read_pos
from .twga import AttackConfig
from .validity import BilingualDictionary
from .victim import Victim
from .vocab import Vocabulary

log = logging.getLogger(__name__)


@dataclass
class EvalConfig:
    corpus: str = "test"         # "test" or "para"
    max_targets: int = 3
    max_samples: int = 300       # 0 keeps every sample
    delta_quantile: float = 95.0


def toy_attack_config() -> AttackConfig:
    """TWGA settings for the toy vocabulary (see README: epsilon and lr are rescaled)."""
    return AttackConfig(epsilon=6.5, lr=0.1)


@dataclass
class PipelineConfig:
    data: ToyspeakSpec = field(default_factory=ToyspeakSpec)
    nmt: nmt.NmtConfig = field(default_factory=lambda: nmt.NmtConfig(arch="transformer", dropout=0.1, steps=5000))
    lm: lmmod.LmConfig = field(default_factory=lambda: lmmod.LmConfig(steps=800))
    attack: AttackConfig = field(default_factory=toy_attack_config)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def with_overrides(self, pairs: dict[str, str]) -> "PipelineConfig":
        cfg = self
        for key, raw in pairs.items():
            section, _, name = key.partition(".")
            sub = getattr(cfg, section, None)
            if sub is None or not dataclasses.is_dataclass(sub) or name not in {f.name for f in dataclasses.fields(sub)}:
                raise ParameterError(f"unknown config key {key!r}")
            hints = typing.get_type_hints(type(sub))
            sub = dataclasses.replace(sub, **{name: _cast(raw, hints[name], key)})
            cfg = dataclasses.replace(cfg, **{section: sub})
        return cfg


def _cast(raw: str, typ, key: str):
    try:
        if typ is bool:
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if typ in (int, float, str):
            return typ(raw)
    except ValueError as exc:
        raise ParameterError(f"config key {key!r}: cannot parse {raw!r}") from exc
    raise ParameterError(f"config key {key!r} has unsupported type {typ}")


def read_config_file(path: str | Path) -> dict[str, str]:
    pairs = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParameterError(f"{path}:{n}: expected key=value")
        k, v = line.split("=", 1)
        pairs[k.strip()] = v.strip()
    return pairs


# -- stages ----------------------------------------------------------------------------

def gen_data(out: Path, cfg: PipelineConfig) -> Path:
    d = Path(out) / "data"
    generate_toyspeak(cfg.data).write(d)
    return d


def _src_vocab(out: Path) -> Vocabulary:
    pairs = read_corpus(Path(out) / "data" / "train.tsv")
    return Vocabulary.build([s for s, _ in pairs])


def train_nmt_stage(out: Path, cfg: PipelineConfig) -> nmt.NmtModel:
    pairs = read_corpus(Path(out) / "data" / "train.tsv")
    sv = Vocabulary.build([s for s, _ in pairs])
    tv = Vocabulary.build([t for _, t in pairs])
    model = nmt.train(pairs, sv, tv, cfg.nmt, progress_every=200)
    (Path(out) / "models").mkdir(parents=True, exist_ok=True)
    nmt.save_model(model, Path(out) / "models" / "nmt.ckpt")
    test = read_corpus(Path(out) / "data" / "test.tsv")
    acc = nmt.token_accuracy(model, test)
    (Path(out) / "models" / "nmt_accuracy.txt").write_text(f"{acc:.6f}\n", encoding="utf-8")
    log.info("held-out token accuracy %.4f", acc)
    return model


def train_lm_stage(out: Path, cfg: PipelineConfig, direction: str) -> lmmod.CausalLm:
    sv = _src_vocab(out)
    mono = read_lines(Path(out) / "data" / "mono.txt")
    cut = max(1, len(mono) // 20)
    model = lmmod.train_lm(mono[cut:], sv, direction, cfg.lm, heldout=mono[:cut], progress_every=200)
    (Path(out) / "models").mkdir(parents=True, exist_ok=True)
    model.save(Path(out) / "models" / f"lm_{direction}.ckpt")
    return model


def load_models(out: Path):
    m = Path(out) / "models"
    try:
        model = nmt.load_model(m / "nmt.ckpt")
        lms = [lmmod.load_lm(m / "lm_l2r.ckpt").freeze(), lmmod.load_lm(m / "lm_r2l.ckpt").freeze()]
    except FileNotFoundError as exc:
        raise DataError(f"missing model file {exc.filename}; run train-nmt and train-lm first") from exc
    return model, lms


def build_evalset_stage(out: Path, cfg: PipelineConfig, seed: int) -> list:
    out = Path(out)
    model, lms = load_models(out)
    data = out / "data"
    corpus = read_corpus(data / f"{cfg.eval.corpus}.tsv")
    sources = [s for s, _ in corpus]
    d = BilingualDictionary.load(data / "dict.tsv")
    pos = read_pos(data / "pos.tsv")
    stop = read_lines(data / "stopwords.txt")
    samples = build_eval_set(sources, d, pos, stop, model, seed, cfg.eval.max_targets, cfg.attack.beam_size)
    if cfg.eval.max_samples:
        samples = samples[: cfg.eval.max_samples]
    clean = [model.src_vocab.encode(s) for s in sources]
    delta = lmmod.calibrate_threshold(lms, clean, cfg.eval.delta_quantile)
    (out / "eval").mkdir(parents=True, exist_ok=True)
    write_eval_set(out / "eval" / "evalset.jsonl", samples)
    (out / "eval" / "delta.txt").write_text(f"{delta!r}\n", encoding="utf-8")
    return samples


def load_eval(out: Path):
    e = Path(out) / "eval"
    try:
        return read_eval_set(e / "evalset.jsonl"), float((e / "delta.txt").read_text().strip())
    except FileNotFoundError as exc:
        raise DataError(f"missing {exc.filename}; run build-evalset first") from exc


def attack_stage(out: Path, cfg: PipelineConfig, method: str, seed: int, victim: Victim | None = None,
                 models=None, name: str | None = None) -> list:
    if method not in METHODS:
        raise ParameterError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    out = Path(out)
    model, lms = models or load_models(out)
    samples, delta = load_eval(out)
    victim = victim or Victim(model, cfg.attack.beam_size)
    results = run_attack(method, samples, victim, lms, delta, cfg.attack, cfg.baseline, seed, progress_every=50)
    (out / "results").mkdir(parents=True, exist_ok=True)
    write_results(out / "results" / f"{name or method}.jsonl", results)
    return results


def report_stage(out: Path, cfg: PipelineConfig, seed: int, legacy: Path | None = None) -> CampaignReport:
    out = Path(out)
    res_dir = out / "results"
    files = sorted(res_dir.glob("*.jsonl")) if res_dir.exists() else []
    if not files:
        raise DataError(f"no attack results under {res_dir}")
    order = {m: i for i, m in enumerate(METHODS)}
    files.sort(key=lambda p: (order.get(p.stem, len(order)), p.stem))
    records = {p.stem: read_results(p) for p in files}
    rows = [aggregate(name, recs) for name, recs in records.items()]
    inval = []
    if legacy is not None:
        inval = quantify_invalid(read_legacy(legacy), BilingualDictionary.load(out / "data" / "dict.tsv"))
    report = CampaignReport(rows, records, cfg.to_dict(), seed, inval)
    (out / "report.jsonl").write_text(report.to_jsonl(), encoding="utf-8")
    (out / "report.txt").write_text(report.table(), encoding="utf-8")
    return report


def quantify_stage(legacy: Path, dictionary: Path, out: Path | None = None) -> str:
    rows = quantify_invalid(read_legacy(legacy), BilingualDictionary.load(dictionary))
    text = format_invalidity(rows) + "\n"
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "invalidity.jsonl").write_text(
            "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows), encoding="utf-8")
        (Path(out) / "invalidity.txt").write_text(text, encoding="utf-8")
    return text

"""Bilingual dictionary, translation presence, the validity oracle, legacy
invalidity classifiers and the Succ/Edit/Query metrics."""
from __future__ import annotations

import enum
from fractions import Fraction
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import MetricError, SampleError
from .vocab import Vocabulary, tokenize


class BilingualDictionary:
    """source word -> ordered, de-duplicated target translations.  Lookups are total."""

    def __init__(self, entries: Mapping[str, Iterable[str]] | None = None):
        self._fwd: dict[str, tuple[str, ...]] = {}
        for word, trans in (entries or {}).items():
            cleaned = tuple(dict.fromkeys(t.strip() for t in trans if t.strip()))
            if cleaned:
                self._fwd[word] = cleaned
        self._rev: dict[str, list[str]] = {}
        for word, trans in self._fwd.items():
            for t in trans:
                self._rev.setdefault(t, []).append(word)

    def __getitem__(self, word: str) -> tuple[str, ...]:
        return self._fwd.get(word, ())

    def __contains__(self, word: str) -> bool:
        return word in self._fwd

    def __len__(self) -> int:
        return len(self._fwd)

    def items(self):
        return self._fwd.items()

    def sources_of(self, target: str) -> tuple[str, ...]:
        """Reverse lookup: every source word listing ``target`` as a translation."""
        return tuple(self._rev.get(target, ()))

    @classmethod
    def load(cls, path: str | Path) -> "BilingualDictionary":
        entries: dict[str, list[str]] = {}
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                word, trans = line.split("\t")
                entries.setdefault(word, []).extend(trans.split(","))
        return cls(entries)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(f"{w}\t{','.join(ts)}\n" for w, ts in sorted(self._fwd.items())),
                              encoding="utf-8")


@dataclass(frozen=True)
class EvaluationSample:
    x_ids: tuple[int, ...]
    x_text: str
    z: str
    z_span: tuple[int, int]          # [start, end) token range of z in x
    Z: tuple[str, ...]
    h_p: frozenset
    y_text: str = ""                 # the victim's clean translation
    sent_id: int = -1

    @property
    def k(self) -> int:
        return len(self.Z)

    @property
    def perturbable(self) -> list[int]:
        s, e = self.z_span
        return [i for i in range(len(self.x_ids)) if not s <= i < e]

    def to_json(self) -> dict:
        return {"sent_id": self.sent_id, "x_ids": list(self.x_ids), "x_text": self.x_text, "z": self.z,
                "z_span": list(self.z_span), "Z": list(self.Z), "h_p": sorted(self.h_p), "y_text": self.y_text}

    @classmethod
    def from_json(cls, d: dict) -> "EvaluationSample":
        return cls(tuple(d["x_ids"]), d["x_text"], d["z"], tuple(d["z_span"]), tuple(d["Z"]),
                   frozenset(d["h_p"]), d.get("y_text", ""), d.get("sent_id", -1))


def expand_translations(z: str, dictionary: BilingualDictionary, tgt_vocab: Vocabulary) -> tuple[tuple[str, ...], frozenset]:
    Z = dictionary[z]
    if not Z:
        raise SampleError(f"targeted word {z!r} has no dictionary translation")
    h_p = frozenset(t for tr in Z for t in tgt_vocab.encode(tr))
    return Z, h_p


def word_span(tokens: Sequence[str], word_index: int) -> tuple[int, int]:
    """Token range of the ``word_index``-th word in a subword token list."""
    start, w = 0, 0
    for i, tok in enumerate(tokens):
        if not tok.endswith("@@"):
            if w == word_index:
                return start, i + 1
            w += 1
            start = i + 1
    raise IndexError(f"sentence has fewer than {word_index + 1} words")


def make_sample(x_text: str, word_index: int, dictionary: BilingualDictionary, src_vocab: Vocabulary,
                tgt_vocab: Vocabulary, y_text: str = "", sent_id: int = -1) -> EvaluationSample:
    words = x_text.split()
    z = words[word_index]
    Z, h_p = expand_translations(z, dictionary, tgt_vocab)
    toks = tokenize(x_text)
    return EvaluationSample(tuple(src_vocab.encode(x_text)), x_text, z, word_span(toks, word_index),
                            Z, h_p, y_text, sent_id)


def _words(y) -> list[str]:
    if isinstance(y, str):
        return y.replace("@@ ", "").split()
    if hasattr(y, "text"):
        return y.text.split()
    return " ".join(y).replace("@@ ", "").split()


def contains_translation(y, Z: Iterable[str]) -> bool:
    """True iff some translation in Z occurs as a contiguous word run in y.

    ``y`` may be a Translation, a detokenised string or a list of subword tokens.
    """
    words = _words(y)
    for tr in Z:
        pat = tr.split()
        n = len(pat)
        if n and any(words[i:i + n] == pat for i in range(len(words) - n + 1)):
            return True
    return False


class Status(str, enum.Enum):
    VALID = "Valid"
    TARGET_STILL_TRANSLATED = "TargetStillTranslated"
    TARGETED_SPAN_MODIFIED = "TargetedSpanModified"
    NOT_FLUENT = "NotFluent"


@dataclass(frozen=True)
class ValidityVerdict:
    status: Status
    fluency_nll: float = math.nan    # NaN when an earlier condition already failed

    @property
    def valid(self) -> bool:
        return self.status is Status.VALID


def span_intact(x: Sequence[int], x_adv: Sequence[int], span: tuple[int, int]) -> bool:
    s, e = span
    return len(x) == len(x_adv) and list(x[s:e]) == list(x_adv[s:e])


def check_validity(x: Sequence[int], x_adv: Sequence[int], y_adv, sample: EvaluationSample,
                   lms, delta: float) -> ValidityVerdict:
    """Span integrity first, then absence of every translation of z, then fluency."""
    from .lm import fluency

    if not span_intact(x, x_adv, sample.z_span):
        return ValidityVerdict(Status.TARGETED_SPAN_MODIFIED)
    if contains_translation(y_adv, sample.Z):
        return ValidityVerdict(Status.TARGET_STILL_TRANSLATED)
    score = fluency(lms, x_adv)
    if score > delta:
        return ValidityVerdict(Status.NOT_FLUENT, score)
    return ValidityVerdict(Status.VALID, score)


# -- legacy settings ---------------------------------------------------------

@dataclass(frozen=True)
class LegacyPair:
    x: str
    x_adv: str
    r: str
    w: str
    setting: int
    label: bool | None = None        # hand label: True = invalid

    def __post_init__(self):
        if self.setting not in (1, 2):
            raise ValueError("setting must be 1 or 2")
        present = self.w in self.r.split()
        if (self.setting == 1) == present:
            raise ValueError(f"setting {self.setting} pair violates the w/r membership rule for {self.w!r}")


def _mentions(text: str, words: Iterable[str]) -> bool:
    return any(re.search(rf"(?<!\w){re.escape(w)}(?!\w)", text) for w in words)


def classify_invalid_setting1(pair: LegacyPair, dictionary: BilingualDictionary) -> bool:
    """Invalid iff x' contains a source translation of w that x lacks entirely."""
    sources = dictionary.sources_of(pair.w)
    return _mentions(pair.x_adv, sources) and not _mentions(pair.x, sources)


def classify_invalid_setting2(pair: LegacyPair, dictionary: BilingualDictionary) -> bool:
    """Invalid iff x contained a source translation of w and x' keeps none."""
    sources = dictionary.sources_of(pair.w)
    return _mentions(pair.x, sources) and not _mentions(pair.x_adv, sources)


def classify_invalid(pair: LegacyPair, dictionary: BilingualDictionary) -> bool:
    rule = classify_invalid_setting1 if pair.setting == 1 else classify_invalid_setting2
    return rule(pair, dictionary)


# -- metrics -----------------------------------------------------------------

def levenshtein(a: Sequence, b: Sequence) -> int:
    prev = list(range(len(b) + 1))
    for i, ta in enumerate(a, 1):
        cur = [i]
        for j, tb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ta != tb)))
        prev = cur
    return prev[-1]


def edit_score(x: Sequence, x_adv: Sequence) -> float:
    if not len(x):
        raise MetricError("edit score of an empty source sentence")
    return 100 * levenshtein(list(x), list(x_adv)) / len(x)   # integer numerator: a single rounding


def succ_rate(successes: Sequence) -> float:
    """Percentage of successes; entries may be bools or per-sample success fractions."""
    if not len(successes):
        raise MetricError("success rate over zero results")
    return _mean(successes, 100)


def mean_query(queries: Sequence[float]) -> float:
    if not len(queries):
        raise MetricError("mean query over zero results")
    return _mean(queries)


def _mean(values: Sequence, scale: int = 1) -> float:
    """Correctly rounded scale * mean(values): exact for integers, Fraction-exact for floats."""
    if all(isinstance(v, (bool, int, np.integer, np.bool_)) for v in values):
        return scale * sum(int(v) for v in values) / len(values)
    return float(scale * sum(Fraction(float(v)) for v in values) / len(values))

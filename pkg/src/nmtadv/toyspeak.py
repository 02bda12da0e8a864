"""Synthetic bilingual language pair ("toyspeak") with an exact POS lexicon.

Source sentences follow  NP [ADV] VERB NP [PREP NP] [ADV]  where an NP is a
capitalised name or  [DET] ADJ* NOUN .  The target side translates word by
word, moves adjectives after their noun, and resolves every ambiguous word
through a context rule:

* noun      -> translation index chosen by the main verb
* verb      -> chosen by the head of its object NP
* adjective -> chosen by the head noun it modifies
* adverb    -> chosen by the main verb
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import SpecError

CONSONANTS = "bdfgklmnprstvz"
VOWELS = "aeiou"
TARGET_CONSONANTS = "chjklmnpqrstwx"
TARGET_VOWELS = "aeiouy"

CONTENT_TAGS = ("noun", "verb", "adjective", "adverb")


@dataclass
class ToyspeakSpec:
    n_nouns: int = 80
    n_verbs: int = 45
    n_adjectives: int = 30
    n_adverbs: int = 16
    n_names: int = 10
    n_determiners: int = 4
    n_prepositions: int = 6
    ambiguous_rate: float = 0.3
    max_translations: int = 3
    min_len: int = 5
    max_len: int = 15
    n_train: int = 5000
    n_test: int = 400
    n_mono: int = 10000
    n_para: int = 2000
    seed: int = 7

    def validate(self) -> None:
        if min(self.n_nouns, self.n_verbs, self.n_adjectives, self.n_adverbs, self.n_determiners,
               self.n_prepositions) < 1 or self.n_names < 0:
            raise SpecError("every word class needs at least one member")
        if self.n_nouns < 3 or self.n_verbs < 3:
            raise SpecError("vocab too small for the grammar: need >= 3 nouns and verbs")
        if not 5 <= self.min_len <= self.max_len:
            raise SpecError(f"sentence length range [{self.min_len}, {self.max_len}] is not producible")
        if not 1 <= self.max_translations <= 3:
            raise SpecError("max_translations must be in [1, 3]")


@dataclass
class Lexicon:
    words: dict[str, list[str]] = field(default_factory=dict)   # tag -> words
    translations: dict[str, list[str]] = field(default_factory=dict)
    tags: dict[str, str] = field(default_factory=dict)

    def index(self, word: str) -> int:
        """Position of a word within its own class; drives the context rule."""
        return self.words[self.tags[word]].index(word)


@dataclass
class Toyspeak:
    spec: ToyspeakSpec
    lexicon: Lexicon
    train: list[tuple[str, str]]
    test: list[tuple[str, str]]
    mono: list[str]
    para: list[tuple[str, str]]

    @property
    def dictionary(self) -> dict[str, list[str]]:
        return self.lexicon.translations

    @property
    def pos(self) -> dict[str, str]:
        """POS lexicon with names folded into nouns and function words tagged stopword."""
        return {w: ("noun" if t == "name" else "stopword" if t in ("det", "prep") else t)
                for w, t in self.lexicon.tags.items()}

    @property
    def stopwords(self) -> list[str]:
        return sorted(w for w, t in self.lexicon.tags.items() if t in ("det", "prep"))

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, pairs in (("train", self.train), ("test", self.test), ("para", self.para)):
            write_corpus(out / f"{name}.tsv", pairs)
        (out / "mono.txt").write_text("".join(s + "\n" for s in self.mono), encoding="utf-8")
        write_dictionary(out / "dict.tsv", self.dictionary)
        (out / "pos.tsv").write_text("".join(f"{w}\t{t}\n" for w, t in sorted(self.pos.items())),
                                     encoding="utf-8")
        (out / "stopwords.txt").write_text("".join(w + "\n" for w in self.stopwords), encoding="utf-8")
        (out / "spec.txt").write_text(
            "".join(f"{k}={v}\n" for k, v in dataclasses.asdict(self.spec).items()), encoding="utf-8")


def write_corpus(path: str | Path, pairs) -> None:
    Path(path).write_text("".join(f"{s}\t{t}\n" for s, t in pairs), encoding="utf-8")


def read_corpus(path: str | Path) -> list[tuple[str, str]]:
    pairs = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            src, tgt = line.split("\t")
            pairs.append((src, tgt))
    return pairs


def write_dictionary(path: str | Path, dictionary: dict[str, list[str]]) -> None:
    Path(path).write_text("".join(f"{w}\t{','.join(ts)}\n" for w, ts in sorted(dictionary.items())),
                          encoding="utf-8")


def read_pos(path: str | Path) -> dict[str, str]:
    pos = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line:
            w, t = line.split("\t")
            pos[w] = t
    return pos


def read_lines(path: str | Path) -> list[str]:
    return [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]


class _WordMaker:
    def __init__(self, rng: np.random.Generator, consonants: str, vowels: str):
        self.rng = rng
        self.cons = consonants
        self.vow = vowels
        self.used: set[str] = set()

    def make(self, syllables: int) -> str:
        while True:
            w = "".join(self.rng.choice(list(self.cons)) + self.rng.choice(list(self.vow))
                        for _ in range(syllables))
            if self.rng.random() < 0.3:
                w += self.rng.choice(list(self.cons))
            if w not in self.used:
                self.used.add(w)
                return w

    def batch(self, n: int, probs=(0.15, 0.45, 0.25, 0.15)) -> list[str]:
        sizes = self.rng.choice(np.arange(1, len(probs) + 1), size=n, p=probs)
        return [self.make(int(s)) for s in sizes]


def _build_lexicon(spec: ToyspeakSpec, rng: np.random.Generator) -> Lexicon:
    src = _WordMaker(rng, CONSONANTS, VOWELS)
    tgt = _WordMaker(rng, TARGET_CONSONANTS, TARGET_VOWELS)
    lex = Lexicon()
    short = (0.5, 0.5, 0.0, 0.0)
    lex.words["det"] = src.batch(spec.n_determiners, short)
    lex.words["prep"] = src.batch(spec.n_prepositions, short)
    for tag, n in (("noun", spec.n_nouns), ("verb", spec.n_verbs),
                   ("adjective", spec.n_adjectives), ("adverb", spec.n_adverbs)):
        lex.words[tag] = src.batch(n)
    lex.words["name"] = [w.capitalize() for w in src.batch(spec.n_names)]
    for tag, words in lex.words.items():
        for w in words:
            lex.tags[w] = tag
            if tag in CONTENT_TAGS and rng.random() < spec.ambiguous_rate and spec.max_translations > 1:
                k = int(rng.integers(2, spec.max_translations + 1))
            else:
                k = 1
            if tag == "name":
                lex.translations[w] = [tgt.make(2).capitalize()]
            elif tag in ("det", "prep"):
                lex.translations[w] = [tgt.make(1)]
            else:
                lex.translations[w] = tgt.batch(k)
    return lex


def _translation(lex: Lexicon, word: str, context: str) -> str:
    options = lex.translations[word]
    if len(options) == 1:
        return options[0]
    return options[lex.index(context) % len(options)]


def context_choice(lex: Lexicon, word: str, context: str) -> str:
    """Public form of the context rule, used to re-check generated references."""
    return _translation(lex, word, context)


class _SentenceMaker:
    def __init__(self, spec: ToyspeakSpec, lex: Lexicon, rng: np.random.Generator):
        self.spec, self.lex, self.rng = spec, lex, rng

    def _pick(self, tag: str) -> str:
        words = self.lex.words[tag]
        return words[int(self.rng.integers(len(words)))]

    def _np(self, max_adj: int) -> dict:
        if self.lex.words["name"] and self.rng.random() < 0.12:
            return {"det": None, "adjs": [], "head": self._pick("name")}
        det = self._pick("det") if self.rng.random() < 0.7 else None
        n_adj = int(self.rng.integers(0, max_adj + 1))
        adjs = [self._pick("adjective") for _ in range(n_adj)]
        return {"det": det, "adjs": adjs, "head": self._pick("noun")}

    def _src_np(self, np_: dict) -> list[str]:
        return ([np_["det"]] if np_["det"] else []) + np_["adjs"] + [np_["head"]]

    def _tgt_np(self, np_: dict, verb: str) -> list[str]:
        lex = self.lex
        out = [_translation(lex, np_["det"], verb)] if np_["det"] else []
        out.append(_translation(lex, np_["head"], verb))
        out += [_translation(lex, a, np_["head"]) for a in np_["adjs"]]
        return out

    def sentence(self) -> tuple[str, str]:
        while True:
            subj = self._np(2)
            obj = self._np(2)
            verb = self._pick("verb")
            pre_adv = self._pick("adverb") if self.rng.random() < 0.25 else None
            pp = (self._pick("prep"), self._np(1)) if self.rng.random() < 0.4 else None
            post_adv = self._pick("adverb") if self.rng.random() < 0.25 else None

            src = self._src_np(subj) + ([pre_adv] if pre_adv else []) + [verb] + self._src_np(obj)
            if pp:
                src += [pp[0]] + self._src_np(pp[1])
            if post_adv:
                src.append(post_adv)
            if not self.spec.min_len <= len(src) <= self.spec.max_len:
                continue

            lex = self.lex
            tgt = self._tgt_np(subj, verb)
            if pre_adv:
                tgt.append(_translation(lex, pre_adv, verb))
            tgt.append(_translation(lex, verb, obj["head"]))
            tgt += self._tgt_np(obj, verb)
            if pp:
                tgt.append(_translation(lex, pp[0], verb))
                tgt += self._tgt_np(pp[1], verb)
            if post_adv:
                tgt.append(_translation(lex, post_adv, verb))
            return " ".join(src), " ".join(tgt)


def generate_toyspeak(spec: ToyspeakSpec | None = None) -> Toyspeak:
    """Deterministically generate lexicon, parallel/monolingual corpora and a disjoint second corpus."""
    spec = spec or ToyspeakSpec()
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    lex = _build_lexicon(spec, rng)

    def draw(maker, n, exclude):
        out, seen = [], set(exclude)
        while len(out) < n:
            pair = maker.sentence()
            if pair[0] not in seen:
                seen.add(pair[0])
                out.append(pair)
        return out

    main = _SentenceMaker(spec, lex, np.random.default_rng([spec.seed, 1]))
    train = draw(main, spec.n_train, ())
    test = draw(main, spec.n_test, [s for s, _ in train])
    mono_maker = _SentenceMaker(spec, lex, np.random.default_rng([spec.seed, 2]))
    mono = [s for s, _ in draw(mono_maker, spec.n_mono, [s for s, _ in test])]
    para_maker = _SentenceMaker(spec, lex, np.random.default_rng([spec.seed, 3]))
    para = draw(para_maker, spec.n_para, [s for s, _ in train + test])
    return Toyspeak(spec, lex, train, test, mono, para)

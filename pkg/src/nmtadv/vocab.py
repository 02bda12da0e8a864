"""Vocabulary and the rule-based subword tokenizer.

Words longer than ``SPLIT_OVER`` characters are cut into 4-character pieces;
every piece except the last carries the continuation marker ``@@``.
"""
from __future__ import annotations

import hashlib
from collections import Counter
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)
BPE_MARK = "@@"
SPLIT_OVER = 6
PIECE = 4


def split_word(word: str) -> list[str]:
    if len(word) <= SPLIT_OVER:
        return [word]
    pieces = [word[i:i + PIECE] for i in range(0, len(word), PIECE)]
    return [p + BPE_MARK for p in pieces[:-1]] + [pieces[-1]]


def tokenize(text: str | Sequence[str]) -> list[str]:
    words = text.split() if isinstance(text, str) else list(text)
    return [piece for w in words for piece in split_word(w)]


def detokenize(tokens: Iterable[str]) -> str:
    out = []
    glue = False
    for tok in tokens:
        if tok in SPECIALS:
            continue
        cont = tok.endswith(BPE_MARK)
        piece = tok[: -len(BPE_MARK)] if cont else tok
        if glue and out:
            out[-1] += piece
        else:
            out.append(piece)
        glue = cont
    return " ".join(out)


class Vocabulary:
    """Bijective token <-> id map with per-token subword and case flags."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tokens[: len(SPECIALS)] != list(SPECIALS):
            tokens = list(SPECIALS) + [t for t in tokens if t not in SPECIALS]
        if len(set(tokens)) != len(tokens):
            raise DataError("vocabulary tokens must be unique")
        self.itos = tokens
        self.stoi = {t: i for i, t in enumerate(tokens)}
        self.pad, self.bos, self.eos, self.unk = (self.stoi[s] for s in SPECIALS)
        self.bpe_flags = np.array([t.endswith(BPE_MARK) for t in tokens], dtype=bool)
        self.case_flags = np.array([t[:1].isupper() for t in tokens], dtype=bool)
        self.special_flags = np.array([t in SPECIALS for t in tokens], dtype=bool)

    @classmethod
    def build(cls, sentences: Iterable[str | Sequence[str]]) -> "Vocabulary":
        counts: Counter[str] = Counter()
        for s in sentences:
            counts.update(tokenize(s))
        ordered = sorted(counts, key=lambda t: (-counts[t], t))
        return cls(list(SPECIALS) + ordered)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, self.unk)

    def encode(self, text: str | Sequence[str], add_eos: bool = False) -> list[int]:
        ids = [self.id(t) for t in tokenize(text)]
        return ids + [self.eos] if add_eos else ids

    def decode_tokens(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def decode(self, ids: Iterable[int]) -> str:
        return detokenize(self.decode_tokens(ids))

    def is_bpe(self, idx: int) -> bool:
        return bool(self.bpe_flags[idx])

    def is_cased(self, idx: int) -> bool:
        return bool(self.case_flags[idx])

    def is_special(self, idx: int) -> bool:
        return bool(self.special_flags[idx])

    def compatible(self, a: int, b: int) -> bool:
        """True when ``b`` may substitute ``a``: same @@ flag, same case, neither special."""
        return bool(not self.special_flags[a] and not self.special_flags[b]
                    and self.bpe_flags[a] == self.bpe_flags[b]
                    and self.case_flags[a] == self.case_flags[b])

    def fingerprint(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()[:16]

    def save(self, path: str | Path) -> None:
        lines = [f"{t}\t{int(b)}\t{int(c)}" for t, b, c in zip(self.itos, self.bpe_flags, self.case_flags)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        tokens = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line:
                tokens.append(line.split("\t")[0])
        return cls(tokens)

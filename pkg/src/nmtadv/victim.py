"""Query-counted access to the victim translation model."""
from __future__ import annotations

import dataclasses
from collections import OrderedDict
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nmt import NmtModel, Translation, beam_decode, decode_embedded, forward_relaxed


class QueryCounter:
    """Monotone count of victim decodes."""

    def __init__(self):
        self._n = 0

    def tick(self) -> None:
        self._n += 1

    @property
    def count(self) -> int:
        return self._n


class Victim:
    """Wraps an NMT model so that every decode (hard or relaxed) is one query.

    Hard decodes are memoised by source ids: the model is deterministic, so a
    repeated query returns the stored translation while still being counted.
    """

    def __init__(self, model: NmtModel, beam_size: int | None = None, max_len: int | None = None,
                 cache_size: int = 50_000):
        self.model = model.freeze()
        self.beam_size = model.config.beam_size if beam_size is None else beam_size
        self.max_len = max_len
        self.counter = QueryCounter()
        self._cache: OrderedDict[tuple, Translation] = OrderedDict()
        self._grad_cache: OrderedDict[tuple, tuple] = OrderedDict()
        self._loss_cache: OrderedDict[tuple, tuple] = OrderedDict()
        self._cache_size = cache_size

    @property
    def src_vocab(self):
        return self.model.src_vocab

    @property
    def tgt_vocab(self):
        return self.model.tgt_vocab

    @property
    def queries(self) -> int:
        return self.counter.count

    def translate(self, source_ids: Sequence[int]) -> Translation:
        self.counter.tick()
        key = tuple(int(i) for i in source_ids)
        hit = self._cache.get(key)
        if hit is not None:
            self._cache.move_to_end(key)
            return hit
        with ad.no_grad():
            out = beam_decode(self.model, key, self.beam_size, self.max_len)
        self._cache[key] = out
        if len(self._cache) > self._cache_size:
            self._cache.popitem(last=False)
        return out

    def adv_gradient(self, source_ids: Sequence[int], h_set, mu: float) -> tuple[Translation, float, np.ndarray]:
        """White-box query: decode, then return L_adv of the decode trace and its
        gradient w.r.t. the (n, E) source embeddings.  Memoised like ``translate``."""
        from .twga import adversarial_loss

        self.counter.tick()
        key = (tuple(int(i) for i in source_ids), frozenset(h_set), float(mu))
        hit = self._grad_cache.get(key)
        if hit is not None:
            return hit
        ids = np.asarray(key[0], dtype=np.int64)[None, :]
        emb = Tensor(self.model.embed_source(ids).data, requires_grad=True)
        out = decode_embedded(self.model, emb, self.beam_size, self.max_len)
        loss = adversarial_loss(out.trace, h_set, mu)
        loss.backward()
        hit = (dataclasses.replace(out, trace=None), loss.item(), emb.grad[0].copy())
        self._grad_cache[key] = hit
        if len(self._grad_cache) > self._cache_size:
            self._grad_cache.popitem(last=False)
        return hit

    def adv_loss(self, source_ids: Sequence[int], h_set, mu: float) -> tuple[Translation, float]:
        """Black-box query: one hard decode and L_adv of its trace, no gradient."""
        from .twga import adversarial_loss

        self.counter.tick()
        key = (tuple(int(i) for i in source_ids), frozenset(h_set), float(mu))
        hit = self._grad_cache.get(key) or self._loss_cache.get(key)
        if hit is not None:
            return hit[0], hit[1]
        with ad.no_grad():
            out = beam_decode(self.model, key[0], self.beam_size, self.max_len, record=True)
            hit = (dataclasses.replace(out, trace=None), adversarial_loss(out.trace, h_set, mu).item())
        self._loss_cache[key] = hit
        if len(self._loss_cache) > self._cache_size:
            self._loss_cache.popitem(last=False)
        return hit

    def translate_traced(self, source_ids: Sequence[int]) -> Translation:
        """Hard decode with a recorded (off-tape) logit trace."""
        self.counter.tick()
        with ad.no_grad():
            return beam_decode(self.model, source_ids, self.beam_size, self.max_len, record=True)

    def translate_relaxed(self, dist: Tensor) -> Translation:
        self.counter.tick()
        return forward_relaxed(self.model, dist, self.beam_size, self.max_len)

    def translate_embedded(self, emb: Tensor) -> Translation:
        self.counter.tick()
        return decode_embedded(self.model, emb, self.beam_size, self.max_len)

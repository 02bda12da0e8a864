"""Left-to-right and right-to-left causal language models over the source vocabulary.

A right-to-left model is an ordinary causal model that reverses every
sequence before training or scoring, so R2L(x) equals an L2R model trained on
reversed data scoring reverse(x).
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_into, read_checkpoint, write_checkpoint
from .errors import CheckpointError, ContractError, DataError, TrainingError
from .nmt import check_row_stochastic, clip_gradients, lr_at, pad_batch
from .nn import LayerNorm, Linear, Params, TransformerBlock, causal_mask, sinusoid, NEG_INF
from .vocab import Vocabulary

log = logging.getLogger(__name__)

L2R, R2L = "l2r", "r2l"


@dataclass
class LmConfig:
    direction: str = L2R
    dim: int = 128
    layers: int = 2
    heads: int = 4
    ff_dim: int = 256
    dropout: float = 0.1
    lr: float = 3e-3
    warmup: int = 100
    steps: int = 1500
    batch_size: int = 32
    clip: float = 5.0
    max_len: int = 64
    seed: int = 3

    def __post_init__(self):
        if self.direction not in (L2R, R2L):
            raise ValueError(f"direction must be {L2R!r} or {R2L!r}")


class Nll(float):
    """Per-token NLL in nats; ``unknown`` lists input positions mapped to <unk>."""

    unknown: tuple[int, ...] = ()

    def __new__(cls, value: float, unknown: Sequence[int] = ()):
        obj = super().__new__(cls, value)
        obj.unknown = tuple(unknown)
        return obj


class CausalLm:
    def __init__(self, config: LmConfig, vocab: Vocabulary):
        self.config, self.vocab = config, vocab
        c = config
        p = self.params = Params(np.random.default_rng([c.seed, 0]))
        self.emb = p.uniform("emb", (len(vocab), c.dim), 0.1)
        self.blocks = [TransformerBlock(p, f"blk.{i}", c.dim, c.heads, c.ff_dim, False) for i in range(c.layers)]
        self.ln = LayerNorm(p, "ln", c.dim)
        self.out = Linear(p, "out", c.dim, len(vocab))
        self._pos = sinusoid(c.max_len + 2, c.dim)
        self.heldout_perplexity: float | None = None

    @property
    def direction(self) -> str:
        return self.config.direction

    def parameters(self) -> dict[str, Tensor]:
        return self.params.tensors

    def freeze(self) -> "CausalLm":
        """Stop gradients into the weights; hard-token NLLs are memoised from here on."""
        self.params.freeze()
        self._memo = {}
        return self

    def hard_nll(self, token_ids: Sequence[int]) -> float:
        memo = getattr(self, "_memo", None)
        if memo is None:
            return float(nll(self, token_ids))
        key = tuple(int(t) for t in token_ids)
        if key not in memo:
            memo[key] = float(nll(self, key))
        return memo[key]

    def orient(self, seq):
        return seq[::-1] if self.direction == R2L else seq

    def logits(self, emb: Tensor, mask: np.ndarray | None = None, rng=None) -> Tensor:
        """Next-token logits for a (B, S, d) input embedding sequence."""
        c = self.config
        steps = emb.shape[1]
        if steps > self._pos.shape[0]:
            raise ContractError(f"sequence of {steps} exceeds the model's max_len")
        drop = c.dropout if rng is not None else 0.0
        x = ad.dropout(emb * math.sqrt(c.dim) + Tensor(self._pos[:steps]), drop, rng)
        bias = causal_mask(steps)
        if mask is not None and not mask.all():
            bias = bias[None, None] + np.where(mask, 0.0, NEG_INF)[:, None, None, :]
        for block in self.blocks:
            x = block(x, bias, dropout=drop, rng=rng)
        return self.out(self.ln(x))

    def save(self, path: str | Path) -> None:
        save_lm(self, path)


def _io(lm: CausalLm, ids: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    seq = list(lm.orient(list(ids)))
    inputs = np.array([lm.vocab.bos] + seq, dtype=np.int64)
    targets = np.array(seq + [lm.vocab.eos], dtype=np.int64)
    return inputs, targets


def _sanitise(lm: CausalLm, token_ids) -> tuple[list[int], list[int]]:
    ids, unknown = [], []
    for pos, t in enumerate(token_ids):
        if isinstance(t, str):
            t = lm.vocab.stoi.get(t, -1)
        t = int(t)
        if not 0 <= t < len(lm.vocab) or t == lm.vocab.unk:
            unknown.append(pos)
            t = lm.vocab.unk
        ids.append(t)
    return ids, unknown


def nll(lm: CausalLm, token_ids: Sequence[int]) -> Nll:
    """Mean negative log likelihood per predicted token, end-of-sentence included."""
    ids, unknown = _sanitise(lm, token_ids)
    if not ids:
        raise ContractError("nll needs a sequence of length >= 1")
    inputs, targets = _io(lm, ids)
    with ad.no_grad():
        logits = lm.logits(ad.embedding(lm.emb, inputs[None]))
        value = ad.cross_entropy(ad.reshape(logits, logits.shape[1:]), targets).item()
    return Nll(value, unknown)


def nll_batch(lm: CausalLm, sequences: Sequence[Sequence[int]], batch_size: int = 64) -> np.ndarray:
    """Per-sequence mean NLL for many sequences; agrees with :func:`nll` on each."""
    out = np.zeros(len(sequences))
    for start in range(0, len(sequences), batch_size):
        chunk = [_io(lm, _sanitise(lm, s)[0]) for s in sequences[start:start + batch_size]]
        inputs, mask = pad_batch([i for i, _ in chunk], lm.vocab.pad)
        targets, _ = pad_batch([t for _, t in chunk], lm.vocab.pad)
        with ad.no_grad():
            logits = lm.logits(ad.embedding(lm.emb, inputs), mask).data
        z = logits - logits.max(axis=-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
        out[start:start + len(chunk)] = -(picked * mask).sum(axis=1) / mask.sum(axis=1)
    return out


def nll_relaxed(lm: CausalLm, dist: Tensor) -> Tensor:
    """Differentiable NLL of a relaxed sequence.

    Inputs are the expected embeddings dist_i @ E; targets are argmax(dist_i)
    (straight-through: soft inputs, hard targets).
    """
    check_row_stochastic(dist.data)
    if dist.shape[-1] != len(lm.vocab):
        raise ContractError(f"distribution width {dist.shape[-1]} != vocabulary {len(lm.vocab)}")
    n = dist.shape[0]
    order = np.arange(n)[::-1] if lm.direction == R2L else np.arange(n)
    rows = dist[order] if lm.direction == R2L else dist
    mixed = ad.embedding_mix(rows, lm.emb)
    bos = ad.embedding(lm.emb, np.array([lm.vocab.bos]))
    emb = ad.concat([bos, mixed], axis=0)
    targets = np.append(np.argmax(rows.data, axis=1), lm.vocab.eos)
    logits = lm.logits(ad.reshape(emb, (1,) + emb.shape))
    return ad.cross_entropy(ad.reshape(logits, logits.shape[1:]), targets)


def train_lm(sentences: Sequence[str | Sequence[int]], vocab: Vocabulary, direction: str | None = None,
             config: LmConfig | None = None, heldout: Sequence[str | Sequence[int]] = (),
             progress_every: int = 0) -> CausalLm:
    """Train one causal LM; ``direction`` overrides ``config.direction`` when given.

    With ``heldout`` sentences the held-out perplexity is logged and stored on
    ``lm.heldout_perplexity``.
    """
    config = config or LmConfig()
    if direction is not None:
        config = dataclasses.replace(config, direction=direction)
    data = [vocab.encode(s) if isinstance(s, str) else list(s) for s in sentences]
    data = [s for s in data if s]
    if not data:
        raise DataError("monolingual corpus is empty")
    lm = CausalLm(config, vocab)
    data = [_io(lm, s) for s in data]
    params = list(lm.parameters().values())
    opt = ad.Adam(params, config.lr, betas=(0.9, 0.98))
    order_rng = np.random.default_rng([config.seed, 1])
    drop_rng = np.random.default_rng([config.seed, 2])
    order: list[int] = []
    for step in range(config.steps):
        if len(order) < config.batch_size:
            order += list(order_rng.permutation(len(data)))
        idx, order = order[: config.batch_size], order[config.batch_size:]
        inputs, mask = pad_batch([data[i][0] for i in idx], vocab.pad)
        targets, _ = pad_batch([data[i][1] for i in idx], vocab.pad)
        logits = lm.logits(ad.embedding(lm.emb, inputs), mask, drop_rng)
        b, t, v = logits.shape
        loss = ad.cross_entropy(ad.reshape(logits, (b * t, v)), targets.reshape(-1), 0.0, mask.reshape(-1))
        if not math.isfinite(loss.item()):
            raise TrainingError(f"language-model loss became non-finite at step {step}")
        opt.zero_grad()
        loss.backward()
        clip_gradients(params, config.clip)
        opt.step(lr_at(step, config))
        if progress_every and step % progress_every == 0:
            log.info("lm[%s] step %d loss %.4f", config.direction, step, loss.item())
    for p in params:
        p.grad = None
    if heldout:
        lm.heldout_perplexity = perplexity(lm, heldout)
        log.info("lm[%s] held-out perplexity %.3f", config.direction, lm.heldout_perplexity)
    return lm


def perplexity(lm: CausalLm, sentences: Sequence[str | Sequence[int]]) -> float:
    """Token-weighted corpus perplexity (eos predictions included)."""
    seqs = [lm.vocab.encode(s) if isinstance(s, str) else list(s) for s in sentences]
    per_seq = nll_batch(lm, seqs)
    counts = np.array([len(s) + 1 for s in seqs])
    return float(np.exp((per_seq * counts).sum() / counts.sum()))


# -- dual-LM fluency ---------------------------------------------------------

def fluency(lms: Sequence[CausalLm], token_ids: Sequence[int]) -> float:
    """Average of the per-token NLLs under each model (normally one L2R, one R2L)."""
    return float(np.mean([lm.hard_nll(token_ids) for lm in lms]))


def fluency_batch(lms: Sequence[CausalLm], sequences: Sequence[Sequence[int]]) -> np.ndarray:
    return np.mean([nll_batch(lm, sequences) for lm in lms], axis=0)


def calibrate_threshold(lms: Sequence[CausalLm], sequences: Sequence[Sequence[int]], quantile: float = 95.0) -> float:
    """Fluency threshold: the given percentile of clean-corpus dual-LM NLL."""
    if not sequences:
        raise DataError("cannot calibrate a fluency threshold on an empty corpus")
    return float(np.percentile(fluency_batch(lms, sequences), quantile))


# -- checkpoints -------------------------------------------------------------

def save_lm(lm: CausalLm, path: str | Path) -> None:
    path = Path(path)
    lm.vocab.save(path.with_name(path.name + ".vocab"))
    write_checkpoint(path, "lm", dataclasses.asdict(lm.config), lm.parameters(), {"src": lm.vocab.fingerprint()})


def load_lm(path: str | Path) -> CausalLm:
    path = Path(path)
    header, arrays = read_checkpoint(path, "lm")
    try:
        vocab = Vocabulary.load(path.with_name(path.name + ".vocab"))
    except FileNotFoundError as exc:
        raise CheckpointError(f"{path}: missing vocabulary file {exc.filename}") from exc
    if header["vocab"] != {"src": vocab.fingerprint()}:
        raise CheckpointError(f"{path}: vocabulary file does not match the checkpoint")
    lm = CausalLm(LmConfig(**header["config"]), vocab)
    load_into(lm.parameters(), arrays, path)
    return lm

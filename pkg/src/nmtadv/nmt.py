"""Toy encoder-decoder translation model, training, and traced beam search."""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import fastpath
from .autodiff import Tensor
from .checkpoint import load_into, read_checkpoint, write_checkpoint
from .errors import CheckpointError, ContractError, DataError, ParameterError, TrainingError
from .nn import (LayerNorm, Linear, LstmStack, Params, TransformerBlock, causal_mask,
                 padding_bias, sinusoid, NEG_INF)
from .vocab import Vocabulary

log = logging.getLogger(__name__)


@dataclass
class NmtConfig:
    arch: str = "lstm"          # "lstm" or "transformer"
    emb_dim: int = 128
    hidden: int = 128
    layers: int = 2
    heads: int = 4
    ff_dim: int = 256
    dropout: float = 0.3
    label_smoothing: float = 0.2
    lr: float = 3e-3
    warmup: int = 100
    steps: int = 2000
    batch_size: int = 32
    clip: float = 5.0
    beam_size: int = 4
    max_len: int = 64
    seed: int = 1

    def __post_init__(self):
        if self.arch not in ("lstm", "transformer"):
            raise ParameterError(f"unknown arch {self.arch!r}")


@dataclass
class DecodeTrace:
    """Per-step output logits of the winning hypothesis.

    ``logits`` is (T, |V_tgt|).  For relaxed decodes it is attached to the tape
    and differentiable w.r.t. the input distribution.
    """
    logits: Tensor
    tokens: list[int]
    beams: list[int]

    def __len__(self) -> int:
        return len(self.tokens)

    def step(self, t: int) -> Tensor:
        return self.logits[t]


@dataclass
class Translation:
    ids: list[int]
    text: str
    truncated: bool = False
    score: float = 0.0
    trace: DecodeTrace | None = None


# -- decoder state containers ------------------------------------------------

@dataclass
class _Memory:
    states: Tensor          # (B, S, D)
    keys: Tensor | None     # (B, S, H), lstm only
    bias: np.ndarray        # lstm: (B, S, 1); transformer: (B, 1, 1, S)
    cross: list | None = None   # transformer search: per-layer cross-attention (k, v)

    def take(self, idx: np.ndarray) -> "_Memory":
        return _Memory(Tensor(self.states.data[idx]),
                       None if self.keys is None else Tensor(self.keys.data[idx]),
                       self.bias[idx],
                       None if self.cross is None else [(Tensor(k.data[idx]), Tensor(v.data[idx]))
                                                        for k, v in self.cross])


@dataclass
class _State:
    lstm: list = field(default_factory=list)   # [(h, c)] per layer
    feed: Tensor | None = None                 # input-feeding attentional vector
    prefix: np.ndarray | None = None           # transformer: (B, t) ids so far
    cache: list | None = None                  # transformer: per-layer self-attention (k, v)

    def take(self, idx: np.ndarray) -> "_State":
        return _State([(Tensor(h.data[idx]), Tensor(c.data[idx])) for h, c in self.lstm],
                      None if self.feed is None else Tensor(self.feed.data[idx]),
                      None if self.prefix is None else self.prefix[idx],
                      None if self.cache is None else [(Tensor(k.data[idx]), Tensor(v.data[idx]))
                                                       for k, v in self.cache])


class NmtModel:
    def __init__(self, config: NmtConfig, src_vocab: Vocabulary, tgt_vocab: Vocabulary):
        self.config = config
        self.src_vocab, self.tgt_vocab = src_vocab, tgt_vocab
        c = config
        p = self.params = Params(np.random.default_rng([c.seed, 0]))
        self.src_emb = p.uniform("src_emb", (len(src_vocab), c.emb_dim), 0.1)
        self.tgt_emb = p.uniform("tgt_emb", (len(tgt_vocab), c.emb_dim), 0.1)
        if c.arch == "lstm":
            self.encoder = LstmStack(p, "enc", c.emb_dim, c.hidden, c.layers)
            self.decoder = LstmStack(p, "dec", c.emb_dim + c.hidden, c.hidden, c.layers)
            self.att_w = p.uniform("att.w", (c.hidden, c.hidden))
            self.combine = Linear(p, "combine", 2 * c.hidden, c.hidden)
            self.out = Linear(p, "out", c.hidden, len(tgt_vocab))
        else:
            self.enc_blocks = [TransformerBlock(p, f"enc.{i}", c.emb_dim, c.heads, c.ff_dim, False)
                               for i in range(c.layers)]
            self.enc_ln = LayerNorm(p, "enc.ln", c.emb_dim)
            self.dec_blocks = [TransformerBlock(p, f"dec.{i}", c.emb_dim, c.heads, c.ff_dim, True)
                               for i in range(c.layers)]
            self.dec_ln = LayerNorm(p, "dec.ln", c.emb_dim)
            self.out = Linear(p, "out", c.emb_dim, len(tgt_vocab))
            self._pos = sinusoid(max(c.max_len, 64) + 2, c.emb_dim)

    # -- parameters ------------------------------------------------------------
    def parameters(self) -> dict[str, Tensor]:
        return self.params.tensors

    def freeze(self) -> "NmtModel":
        self.params.freeze()
        return self

    # -- encoder -----------------------------------------------------------------
    def embed_source(self, ids: np.ndarray) -> Tensor:
        return ad.embedding(self.src_emb, ids)

    def mix_source(self, dist: Tensor) -> Tensor:
        """(n, |V_src|) distribution -> (1, n, E) expected embeddings."""
        mixed = ad.embedding_mix(dist, self.src_emb)
        return ad.reshape(mixed, (1,) + mixed.shape)

    def encode(self, emb: Tensor, mask: np.ndarray, rng=None) -> _Memory:
        c = self.config
        drop = c.dropout if rng is not None else 0.0
        if c.arch == "lstm":
            states = self.encoder.run(ad.dropout(emb, drop, rng), mask, drop, rng)
            keys = ad.matmul(states, self.att_w)
            bias = np.where(mask, 0.0, NEG_INF)[:, :, None]
            return _Memory(states, keys, bias)
        steps = emb.shape[1]
        x = emb * math.sqrt(c.emb_dim) + Tensor(self._pos[:steps])
        x = ad.dropout(x, drop, rng)
        bias = padding_bias(mask)
        for block in self.enc_blocks:
            x = block(x, bias, dropout=drop, rng=rng)
        return _Memory(self.enc_ln(x), None, bias)

    # -- decoder -----------------------------------------------------------------
    def init_state(self, memory: _Memory) -> _State:
        batch = memory.states.shape[0]
        if self.config.arch == "lstm":
            return _State(self.decoder.zero_state(batch), Tensor(np.zeros((batch, self.config.hidden))))
        return _State(prefix=np.zeros((batch, 0), dtype=np.int64))

    def _lstm_step(self, memory: _Memory, state: _State, prev: np.ndarray, drop: float, rng):
        x = ad.concat([ad.embedding(self.tgt_emb, prev), state.feed], axis=-1)
        x = ad.dropout(x, drop, rng) if drop else x
        h, lstm_state = self.decoder.step(x, state.lstm, drop, rng)
        batch, hid = h.shape
        scores = ad.matmul(memory.keys, ad.reshape(h, (batch, hid, 1))) + Tensor(memory.bias)
        alpha = ad.softmax(scores, axis=1)
        ctx = ad.reshape(ad.matmul(ad.transpose(alpha, (0, 2, 1)), memory.states), (batch, hid))
        feed = ad.tanh(self.combine(ad.concat([ctx, h], axis=-1)))
        return feed, _State(lstm_state, feed)

    def _transformer_decode(self, memory: _Memory, tgt_in: np.ndarray, drop: float, rng) -> Tensor:
        c = self.config
        steps = tgt_in.shape[1]
        x = ad.embedding(self.tgt_emb, tgt_in) * math.sqrt(c.emb_dim) + Tensor(self._pos[:steps])
        x = ad.dropout(x, drop, rng)
        bias = causal_mask(steps)
        for block in self.dec_blocks:
            x = block(x, bias, memory.states, memory.bias, drop, rng)
        return self.dec_ln(x)

    def step(self, memory: _Memory, state: _State, prev: np.ndarray) -> tuple[Tensor, _State]:
        """One decoding step for a batch of hypotheses; returns (B, |V_tgt|) logits."""
        if self.config.arch == "lstm":
            feed, new_state = self._lstm_step(memory, state, prev, 0.0, None)
            return self.out(feed), new_state
        return self._transformer_step(memory, state, prev)

    def _transformer_step(self, memory: _Memory, state: _State, prev: np.ndarray) -> tuple[Tensor, _State]:
        """Incremental decoding with cached keys/values; matches ``_transformer_decode``
        on the full prefix up to float rounding."""
        c = self.config
        t = state.prefix.shape[1]
        if memory.cross is None:
            memory.cross = [blk.cross.project_kv(memory.states) for blk in self.dec_blocks]
        x = ad.embedding(self.tgt_emb, prev[:, None]) * math.sqrt(c.emb_dim) + Tensor(self._pos[t:t + 1])
        cache = []
        for i, blk in enumerate(self.dec_blocks):
            h = blk.ln1(x)
            k, v = blk.att.project_kv(h)
            if state.cache is not None:
                k = ad.concat([state.cache[i][0], k], axis=2)
                v = ad.concat([state.cache[i][1], v], axis=2)
            cache.append((k, v))
            x = x + blk.att.attend(h, k, v, None)
            ck, cv = memory.cross[i]
            x = x + blk.cross.attend(blk.ln_c(x), ck, cv, memory.bias)
            x = x + blk.ff(blk.ln2(x), 0.0, None)
        hidden = self.dec_ln(x)
        prefix = np.concatenate([state.prefix, prev[:, None]], axis=1)
        return self.out(hidden[:, 0, :]), _State(prefix=prefix, cache=cache)

    def teacher_forced(self, memory: _Memory, tgt_in: np.ndarray, rng=None) -> Tensor:
        """Logits (B, T, |V_tgt|) for every position of the given target prefix."""
        drop = self.config.dropout if rng is not None else 0.0
        if self.config.arch == "transformer":
            return self.out(ad.dropout(self._transformer_decode(memory, tgt_in, drop, rng), drop, rng))
        state = self.init_state(memory)
        feeds = []
        for t in range(tgt_in.shape[1]):
            feed, state = self._lstm_step(memory, state, tgt_in[:, t], drop, rng)
            feeds.append(feed)
        hidden = ad.dropout(ad.stack(feeds, axis=1), drop, rng)
        return self.out(hidden)

    # -- persistence ---------------------------------------------------------------
    def save(self, path: str | Path) -> None:
        save_model(self, path)


# -- beam search ------------------------------------------------------------------

def _log_softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class _Hyp:
    tokens: list[int]
    score: float
    logits: list[np.ndarray]
    beams: list[int]


class _TapeStepper:
    """Step interface over ``NmtModel.step`` (used for the LSTM decoder)."""

    def __init__(self, model: NmtModel, memory: _Memory):
        self.model, self.memory = model, memory
        self.state = model.init_state(memory)

    def step(self, prev: np.ndarray) -> np.ndarray:
        mem = self.memory
        if mem.states.shape[0] != len(prev):
            mem = mem.take(np.zeros(len(prev), dtype=np.int64))
            if self.state.lstm[0][0].shape[0] != len(prev):
                self.state = self.model.init_state(mem)
        with ad.no_grad():
            logits, self.state = self.model.step(mem, self.state, prev)
        return logits.data

    def reorder(self, idx: np.ndarray) -> None:
        self.state = self.state.take(idx)


def _stepper(model: NmtModel, memory: _Memory):
    if model.config.arch == "transformer":
        return fastpath.Stepper(model, memory.states.data, memory.bias)
    return _TapeStepper(model, memory)


def _beam_search(model: NmtModel, memory: _Memory, beam_size: int, max_len: int):
    """Length-normalised beam search over a single encoded sentence.

    Returns (best hypothesis, truncated).  Each hypothesis carries the logit
    vectors of its own prefix, so backtracking the winner is a lookup.
    """
    if beam_size < 1:
        raise ContractError("beam_size must be >= 1")
    eos = model.tgt_vocab.eos
    live = [_Hyp([], 0.0, [], [])]
    stepper = _stepper(model, memory)
    prev = np.array([model.tgt_vocab.bos])
    finished: list[tuple[float, _Hyp]] = []
    for _ in range(max_len):
        raw = stepper.step(prev)
        cand = np.array([h.score for h in live])[:, None] + _log_softmax_np(raw)
        vocab = cand.shape[1]
        flat_cand = -cand.ravel()
        top = 2 * beam_size
        if flat_cand.size > top:
            # only the top 2k entries matter; a stable sort of that slice keeps the tie order
            cut = np.partition(flat_cand, top - 1)[top - 1]
            pool = np.flatnonzero(flat_cand <= cut)
            order = pool[np.argsort(flat_cand[pool], kind="stable")][:top]
        else:
            order = np.argsort(flat_cand, kind="stable")[:top]
        keep: list[tuple[int, int]] = []
        for rank, flat in enumerate(order):
            b, tok = divmod(int(flat), vocab)
            if tok == eos:
                if rank < beam_size:
                    h = live[b]
                    done = _Hyp(h.tokens + [tok], float(cand[b, tok]), h.logits + [raw[b]], h.beams + [b])
                    finished.append((done.score / len(done.tokens), done))
            elif len(keep) < beam_size:
                keep.append((b, tok))
        if len(finished) >= beam_size or not keep:
            break
        idx = np.array([b for b, _ in keep])
        live = [_Hyp(live[b].tokens + [tok], float(cand[b, tok]), live[b].logits + [raw[b]],
                     live[b].beams + [b]) for b, tok in keep]
        stepper.reorder(idx)
        prev = np.array([tok for _, tok in keep])
    if finished:
        best = max(finished, key=lambda sh: sh[0])[1]  # max keeps the first among ties
        return best, False
    best = max(live, key=lambda h: h.score / max(len(h.tokens), 1))
    return best, True


def _translation(model: NmtModel, hyp: _Hyp, truncated: bool, trace: DecodeTrace | None) -> Translation:
    body = [t for t in hyp.tokens if t != model.tgt_vocab.eos]
    return Translation(hyp.tokens, model.tgt_vocab.decode(body), truncated,
                       hyp.score / max(len(hyp.tokens), 1), trace)


def _source_array(model: NmtModel, source_ids: Sequence[int]) -> np.ndarray:
    ids = np.asarray(list(source_ids), dtype=np.int64)
    if ids.size == 0:
        raise ContractError("source sentence is empty")
    if ids.min() < 0 or ids.max() >= len(model.src_vocab):
        raise IndexError("source id out of vocabulary range")
    return ids[None, :]


def _encode_hard(model: NmtModel, ids: np.ndarray, mask: np.ndarray) -> _Memory:
    if model.config.arch == "transformer":
        bias = padding_bias(mask)
        return _Memory(Tensor(fastpath.encode(model, ids, bias)), None, bias)
    with ad.no_grad():
        return model.encode(model.embed_source(ids), mask)


def beam_decode(model: NmtModel, source_ids: Sequence[int], beam_size: int | None = None,
                max_len: int | None = None, record: bool = False) -> Translation:
    beam_size = model.config.beam_size if beam_size is None else beam_size
    max_len = model.config.max_len if max_len is None else max_len
    ids = _source_array(model, source_ids)
    memory = _encode_hard(model, ids, np.ones(ids.shape, dtype=bool))
    hyp, truncated = _beam_search(model, memory, beam_size, max_len)
    trace = None
    if record:
        trace = DecodeTrace(Tensor(np.stack(hyp.logits)) if hyp.logits else Tensor(np.zeros((0, len(model.tgt_vocab)))),
                            list(hyp.tokens), list(hyp.beams))
    return _translation(model, hyp, truncated, trace)


def decode_embedded(model: NmtModel, emb: Tensor, beam_size: int | None = None,
                    max_len: int | None = None) -> Translation:
    """Beam-decode from (1, n, E) input embeddings with a differentiable trace.

    The search runs off-tape; the winner's per-step logits are then recomputed
    on the tape by teacher forcing its own prefix, which reproduces the logits
    stored during search and lets gradients reach ``emb``.
    """
    beam_size = model.config.beam_size if beam_size is None else beam_size
    max_len = model.config.max_len if max_len is None else max_len
    mask = np.ones(emb.shape[:2], dtype=bool)
    memory = model.encode(emb, mask)
    hyp, truncated = _beam_search(model, memory, beam_size, max_len)
    tgt_in = np.array([[model.tgt_vocab.bos] + hyp.tokens[:-1]], dtype=np.int64)
    logits = model.teacher_forced(memory, tgt_in)
    trace = DecodeTrace(ad.reshape(logits, logits.shape[1:]), list(hyp.tokens), list(hyp.beams))
    return _translation(model, hyp, truncated, trace)


def check_row_stochastic(dist: np.ndarray, tol: float = 1e-9) -> None:
    sums = dist.sum(axis=-1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > tol)
    if bad.size:
        raise ContractError(f"row {int(bad[0])} of the distribution sums to {sums[bad[0]]:.12g}, not 1")


def forward_relaxed(model: NmtModel, dist: Tensor, beam_size: int | None = None,
                    max_len: int | None = None) -> Translation:
    """Decode with every source position fed the expected embedding under ``dist``."""
    check_row_stochastic(dist.data)
    if dist.shape[-1] != len(model.src_vocab):
        raise ContractError(f"distribution width {dist.shape[-1]} != source vocabulary {len(model.src_vocab)}")
    return decode_embedded(model, model.mix_source(dist), beam_size, max_len)


def greedy_decode(model: NmtModel, batch_ids: Sequence[Sequence[int]], max_len: int | None = None) -> list[list[int]]:
    """Batched argmax decoding; each output ends at (and includes) eos when produced."""
    max_len = model.config.max_len if max_len is None else max_len
    src, mask = pad_batch(batch_ids, model.src_vocab.pad)
    eos = model.tgt_vocab.eos
    stepper = _stepper(model, _encode_hard(model, src, mask))
    prev = np.full(len(batch_ids), model.tgt_vocab.bos)
    outs = [[] for _ in batch_ids]
    done = np.zeros(len(batch_ids), dtype=bool)
    for _ in range(max_len):
        prev = np.argmax(stepper.step(prev), axis=-1)
        for i, tok in enumerate(prev):
            if not done[i]:
                outs[i].append(int(tok))
                done[i] = tok == eos
        if done.all():
            break
    return outs


# -- training ------------------------------------------------------------------------

def pad_batch(seqs: Sequence[Sequence[int]], pad: int) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    arr = np.full((len(seqs), width), pad, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        arr[i, : len(s)] = s
        mask[i, : len(s)] = True
    return arr, mask


def lr_at(step: int, cfg) -> float:
    """Linear warmup followed by cosine decay to 10% of the peak rate."""
    if step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    progress = (step - cfg.warmup) / max(1, cfg.steps - cfg.warmup)
    return cfg.lr * (0.1 + 0.9 * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0))))


def clip_gradients(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm


def encode_pairs(pairs, src_vocab: Vocabulary, tgt_vocab: Vocabulary):
    return [(src_vocab.encode(s), tgt_vocab.encode(t, add_eos=True)) for s, t in pairs]


def train(pairs: Sequence[tuple[str, str]], src_vocab: Vocabulary, tgt_vocab: Vocabulary,
          config: NmtConfig | None = None, progress_every: int = 0) -> NmtModel:
    """Teacher-forced training with label smoothing, dropout and Adam."""
    config = config or NmtConfig()
    if not pairs:
        raise DataError("parallel corpus is empty")
    data = [p for p in encode_pairs(pairs, src_vocab, tgt_vocab) if p[0]]
    if not data:
        raise DataError("parallel corpus has no non-empty source sentences")
    model = NmtModel(config, src_vocab, tgt_vocab)
    params = list(model.parameters().values())
    opt = ad.Adam(params, config.lr, betas=(0.9, 0.98))
    order_rng = np.random.default_rng([config.seed, 1])
    drop_rng = np.random.default_rng([config.seed, 2])
    order: list[int] = []
    bos = tgt_vocab.bos
    for step in range(config.steps):
        if len(order) < config.batch_size:
            order += list(order_rng.permutation(len(data)))
        idx, order = order[: config.batch_size], order[config.batch_size:]
        batch = [data[i] for i in idx]
        src, src_mask = pad_batch([s for s, _ in batch], src_vocab.pad)
        tgt_out, tgt_mask = pad_batch([t for _, t in batch], tgt_vocab.pad)
        tgt_in = np.concatenate([np.full((len(batch), 1), bos), tgt_out[:, :-1]], axis=1)
        tgt_in = np.where(tgt_mask, tgt_in, tgt_vocab.pad)

        memory = model.encode(model.embed_source(src), src_mask, drop_rng)
        logits = model.teacher_forced(memory, tgt_in, drop_rng)
        b, t, v = logits.shape
        loss = ad.cross_entropy(ad.reshape(logits, (b * t, v)), tgt_out.reshape(-1),
                                config.label_smoothing, tgt_mask.reshape(-1))
        if not math.isfinite(loss.item()):
            raise TrainingError(f"loss became non-finite at step {step}")
        opt.zero_grad()
        loss.backward()
        clip_gradients(params, config.clip)
        opt.step(lr_at(step, config))
        if progress_every and step % progress_every == 0:
            log.info("nmt step %d loss %.4f", step, loss.item())
    for p in params:
        p.grad = None
        if not np.all(np.isfinite(p.data)):
            raise TrainingError("non-finite parameter after training")
    return model


def token_accuracy(model: NmtModel, pairs: Sequence[tuple[str, str]], batch_size: int = 64) -> float:
    """Position-wise agreement of greedy output with the reference, eos included.

    Length mismatches count against accuracy: the denominator per sentence is
    the longer of hypothesis and reference.
    """
    data = encode_pairs(pairs, model.src_vocab, model.tgt_vocab)
    hits = total = 0
    for start in range(0, len(data), batch_size):
        chunk = data[start:start + batch_size]
        hyps = greedy_decode(model, [s for s, _ in chunk], max_len=max(len(t) for _, t in chunk) + 5)
        for hyp, (_, ref) in zip(hyps, chunk):
            hits += sum(a == b for a, b in zip(hyp, ref))
            total += max(len(hyp), len(ref))
    return hits / total


# -- checkpoints ------------------------------------------------------------------------

def _vocab_paths(path: Path) -> tuple[Path, Path]:
    return path.with_name(path.name + ".src.vocab"), path.with_name(path.name + ".tgt.vocab")


def save_model(model: NmtModel, path: str | Path) -> None:
    path = Path(path)
    sv, tv = _vocab_paths(path)
    model.src_vocab.save(sv)
    model.tgt_vocab.save(tv)
    write_checkpoint(path, "nmt", dataclasses.asdict(model.config), model.parameters(),
                     {"src": model.src_vocab.fingerprint(), "tgt": model.tgt_vocab.fingerprint()})


def load_model(path: str | Path) -> NmtModel:
    path = Path(path)
    header, arrays = read_checkpoint(path, "nmt")
    sv_path, tv_path = _vocab_paths(path)
    try:
        sv, tv = Vocabulary.load(sv_path), Vocabulary.load(tv_path)
    except FileNotFoundError as exc:
        raise CheckpointError(f"{path}: missing vocabulary file {exc.filename}") from exc
    if header["vocab"] != {"src": sv.fingerprint(), "tgt": tv.fingerprint()}:
        raise CheckpointError(f"{path}: vocabulary files do not match the checkpoint")
    model = NmtModel(NmtConfig(**header["config"]), sv, tv)
    load_into(model.parameters(), arrays, path)
    return model

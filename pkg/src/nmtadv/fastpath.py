"""Tape-free numpy inference for the transformer victim.

Hard decoding dominates attack cost, and at toy sizes the autodiff wrapper
overhead outweighs the arithmetic.  These functions read the very same
parameter arrays as the tape modules and reproduce their forward pass
(differences are float rounding only), without recording anything.
"""
from __future__ import annotations

import math

import numpy as np


def _ln(x, ln, eps: float = 1e-5):
    inv = 1.0 / x.shape[-1]
    xc = x - x.sum(axis=-1, keepdims=True) * inv
    var = (xc * xc).sum(axis=-1, keepdims=True) * inv
    return xc / np.sqrt(var + eps) * ln.g.data + ln.b.data


def _lin(x, lin):
    w = lin.w.data
    y = (x.reshape(-1, x.shape[-1]) @ w).reshape(x.shape[:-1] + (w.shape[1],))   # one BLAS call
    return y + lin.b.data if lin.b is not None else y


def _fused(att):
    """q, k and v projections as one weight/bias pair, with 1/sqrt(d_k) folded into q."""
    scale = 1.0 / math.sqrt(att.q.w.shape[1] // att.heads)
    lins, factors = (att.q, att.k, att.v), (scale, 1.0, 1.0)
    w = np.concatenate([l.w.data * f for l, f in zip(lins, factors)], axis=1)
    b = np.concatenate([(l.b.data if l.b is not None else np.zeros(l.w.shape[1])) * f
                        for l, f in zip(lins, factors)])
    return w, b


def _qkv(h, wb, heads):
    """Scaled queries (B,H,S,dk), transposed keys (B,H,dk,S) and values (B,H,S,dk)."""
    w, b = wb
    y = (h.reshape(-1, h.shape[-1]) @ w + b).reshape(h.shape[:-1] + (w.shape[1],))
    q, k, v = np.split(y, 3, axis=-1)
    return _split(q, heads), _split(k, heads).transpose(0, 1, 3, 2), _split(v, heads)


def _split(x, heads):
    b, s, d = x.shape
    return x.reshape(b, s, heads, d // heads).transpose(0, 2, 1, 3)


def _attend(q, kt, v, bias, att):
    """Softmax attention for pre-scaled q and pre-transposed keys."""
    b, h, sq, dk = q.shape
    scores = q @ kt
    if bias is not None:
        scores += bias
    scores -= scores.max(axis=-1, keepdims=True)
    w = np.exp(scores, out=scores)
    w /= w.sum(axis=-1, keepdims=True)
    ctx = (w @ v).transpose(0, 2, 1, 3).reshape(b, sq, h * dk)
    return _lin(ctx, att.o)


def _ff(x, ff):
    return _lin(np.maximum(_lin(x, ff.l1), 0.0), ff.l2)


def encode(model, ids: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """(B, S) ids with additive (B, 1, 1, S) padding bias -> (B, S, D) encoder states."""
    c = model.config
    x = model.src_emb.data[ids] * math.sqrt(c.emb_dim) + model._pos[: ids.shape[1]]
    for blk in model.enc_blocks:
        h = _ln(x, blk.ln1)
        a = blk.att
        q, k, v = _qkv(h, _fused(a), a.heads)
        x = x + _attend(q, k, v, bias, a)
        x = x + _ff(_ln(x, blk.ln2), blk.ff)
    return _ln(x, model.enc_ln)


class Stepper:
    """Incremental decoder over fixed encoder states with a growing key/value cache.

    ``states`` may have batch 1 while the live hypotheses number more: the cross
    attention broadcasts over the batch axis.
    """

    def __init__(self, model, states: np.ndarray, bias: np.ndarray):
        self.model = model
        self.bias = bias
        self.cross = []
        self.self_qkv = [_fused(blk.att) for blk in model.dec_blocks]
        self.cross_q = []
        for blk in model.dec_blocks:
            a = blk.cross
            scale = 1.0 / math.sqrt(a.q.w.shape[1] // a.heads)
            self.cross_q.append((a.q.w.data * scale, a.q.b.data * scale if a.q.b is not None else 0.0))
            self.cross.append((np.ascontiguousarray(_split(_lin(states, a.k), a.heads).transpose(0, 1, 3, 2)),
                               _split(_lin(states, a.v), a.heads)))
        self.cache: list | None = None
        self.t = 0

    def step(self, prev: np.ndarray) -> np.ndarray:
        m = self.model
        x = m.tgt_emb.data[prev][:, None, :] * math.sqrt(m.config.emb_dim) + m._pos[self.t:self.t + 1]
        cache = []
        for i, blk in enumerate(m.dec_blocks):
            a = blk.att
            h = _ln(x, blk.ln1)
            q, k, v = _qkv(h, self.self_qkv[i], a.heads)
            if self.cache is not None:
                k = np.concatenate([self.cache[i][0], k], axis=3)
                v = np.concatenate([self.cache[i][1], v], axis=2)
            cache.append((k, v))
            x = x + _attend(q, k, v, None, a)
            c = blk.cross
            ck, cv = self.cross[i]
            wq, bq = self.cross_q[i]
            hc = _ln(x, blk.ln_c)
            cq = (hc.reshape(-1, hc.shape[-1]) @ wq + bq).reshape(hc.shape[:-1] + (wq.shape[1],))
            x = x + _attend(_split(cq, c.heads), ck, cv, self.bias, c)
            x = x + _ff(_ln(x, blk.ln2), blk.ff)
        self.cache = cache
        self.t += 1
        return _lin(_ln(x, m.dec_ln)[:, 0, :], m.out)

    def reorder(self, idx: np.ndarray) -> None:
        if self.cache is not None:
            self.cache = [(k[idx], v[idx]) for k, v in self.cache]

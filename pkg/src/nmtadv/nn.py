"""Layers shared by the translation model and the language models."""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

NEG_INF = -1e9


class Params:
    """Ordered registry of named parameter tensors with seeded initialisation."""

    def __init__(self, rng: np.random.Generator | None = None):
        self.rng = rng or np.random.default_rng(0)
        self.tensors: dict[str, Tensor] = {}

    def _add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter {name}")
        t = Tensor(value, requires_grad=True)
        self.tensors[name] = t
        return t

    def uniform(self, name: str, shape, scale: float | None = None) -> Tensor:
        if scale is None:
            scale = math.sqrt(6.0 / (shape[0] + shape[-1]))
        return self._add(name, self.rng.uniform(-scale, scale, size=shape))

    def normal(self, name: str, shape, std: float) -> Tensor:
        return self._add(name, self.rng.normal(0.0, std, size=shape))

    def zeros(self, name: str, shape) -> Tensor:
        return self._add(name, np.zeros(shape))

    def ones(self, name: str, shape) -> Tensor:
        return self._add(name, np.ones(shape))

    def __iter__(self):
        return iter(self.tensors.values())

    def items(self):
        return self.tensors.items()

    def freeze(self) -> None:
        for t in self.tensors.values():
            t.requires_grad = False

    def unfreeze(self) -> None:
        for t in self.tensors.values():
            t.requires_grad = True


class Linear:
    def __init__(self, params: Params, name: str, din: int, dout: int, bias: bool = True):
        self.w = params.uniform(f"{name}.w", (din, dout))
        self.b = params.zeros(f"{name}.b", (dout,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.w)
        return y + self.b if self.b is not None else y


class LayerNorm:
    def __init__(self, params: Params, name: str, dim: int):
        self.g = params.ones(f"{name}.g", (dim,))
        self.b = params.zeros(f"{name}.b", (dim,))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.g, self.b)


class LstmStack:
    """Stacked unidirectional LSTM.

    ``run`` consumes a whole (B, S, din) sequence, freezing the state of a row
    once its mask turns 0.  ``step`` advances one position for incremental
    decoding.
    """

    def __init__(self, params: Params, name: str, din: int, hidden: int, layers: int):
        self.hidden = hidden
        self.wx, self.wh, self.b = [], [], []
        for layer in range(layers):
            d = din if layer == 0 else hidden
            self.wx.append(params.uniform(f"{name}.{layer}.wx", (d, 4 * hidden)))
            self.wh.append(params.uniform(f"{name}.{layer}.wh", (hidden, 4 * hidden)))
            b = np.zeros(4 * hidden)
            b[hidden:2 * hidden] = 1.0  # forget-gate bias
            self.b.append(params._add(f"{name}.{layer}.b", b))

    @property
    def layers(self) -> int:
        return len(self.wx)

    def zero_state(self, batch: int) -> list[tuple[Tensor, Tensor]]:
        z = np.zeros((batch, self.hidden))
        return [(Tensor(z), Tensor(z)) for _ in range(self.layers)]

    def _cell(self, gates: Tensor, h: Tensor, c: Tensor, layer: int) -> tuple[Tensor, Tensor]:
        hc = ad.lstm_cell(gates + ad.matmul(h, self.wh[layer]), c)
        return hc[:, : self.hidden], hc[:, self.hidden:]

    def run(self, x: Tensor, mask: np.ndarray | None = None, dropout: float = 0.0,
            rng: np.random.Generator | None = None) -> Tensor:
        batch, steps, _ = x.shape
        inp = x
        for layer in range(self.layers):
            proj = ad.matmul(inp, self.wx[layer]) + self.b[layer]
            h, c = self.zero_state(batch)[0]
            outs = []
            for t in range(steps):
                h_new, c_new = self._cell(proj[:, t, :], h, c, layer)
                if mask is not None and not mask[:, t].all():
                    m = Tensor(mask[:, t:t + 1].astype(np.float64))
                    h = h_new * m + h * (1.0 - m)
                    c = c_new * m + c * (1.0 - m)
                else:
                    h, c = h_new, c_new
                outs.append(h)
            inp = ad.stack(outs, axis=1)
            if layer < self.layers - 1:
                inp = ad.dropout(inp, dropout, rng)
        return inp

    def step(self, x: Tensor, state, dropout: float = 0.0, rng=None):
        new_state = []
        inp = x
        for layer, (h, c) in enumerate(state):
            h, c = self._cell(ad.matmul(inp, self.wx[layer]) + self.b[layer], h, c, layer)
            new_state.append((h, c))
            inp = h if layer == self.layers - 1 else ad.dropout(h, dropout, rng)
        return inp, new_state


def sinusoid(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def causal_mask(steps: int) -> np.ndarray:
    return np.triu(np.full((steps, steps), NEG_INF), k=1)


def padding_bias(mask: np.ndarray) -> np.ndarray:
    """(B, S) 1/0 mask -> additive (B, 1, 1, S) attention bias."""
    return np.where(mask, 0.0, NEG_INF)[:, None, None, :]


class MultiHeadAttention:
    def __init__(self, params: Params, name: str, dim: int, heads: int):
        if dim % heads:
            raise ValueError("model dim must divide evenly into heads")
        self.heads, self.dk = heads, dim // heads
        self.q = Linear(params, f"{name}.q", dim, dim)
        self.k = Linear(params, f"{name}.k", dim, dim)
        self.v = Linear(params, f"{name}.v", dim, dim)
        self.o = Linear(params, f"{name}.o", dim, dim)

    def _split(self, x: Tensor) -> Tensor:
        b, s, _ = x.shape
        return ad.transpose(ad.reshape(x, (b, s, self.heads, self.dk)), (0, 2, 1, 3))

    def project_kv(self, memory: Tensor) -> tuple[Tensor, Tensor]:
        """Split-head keys and values, (B, heads, S, dk) each."""
        return self._split(self.k(memory)), self._split(self.v(memory))

    def __call__(self, query: Tensor, memory: Tensor, bias: np.ndarray | None) -> Tensor:
        k, v = self.project_kv(memory)
        return self.attend(query, k, v, bias)

    def attend(self, query: Tensor, k: Tensor, v: Tensor, bias: np.ndarray | None) -> Tensor:
        b, sq, d = query.shape
        q = self._split(self.q(query))
        scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(self.dk))
        if bias is not None:
            scores = scores + Tensor(bias)
        att = ad.softmax(scores, axis=-1)
        ctx = ad.transpose(ad.matmul(att, v), (0, 2, 1, 3))
        return self.o(ad.reshape(ctx, (b, sq, d)))


class FeedForward:
    def __init__(self, params: Params, name: str, dim: int, hidden: int):
        self.l1 = Linear(params, f"{name}.l1", dim, hidden)
        self.l2 = Linear(params, f"{name}.l2", hidden, dim)

    def __call__(self, x: Tensor, dropout: float, rng) -> Tensor:
        return self.l2(ad.dropout(ad.relu(self.l1(x)), dropout, rng))


class TransformerBlock:
    """Pre-norm block: self-attention, optional cross-attention, feed-forward."""

    def __init__(self, params: Params, name: str, dim: int, heads: int, ff: int, cross: bool):
        self.ln1 = LayerNorm(params, f"{name}.ln1", dim)
        self.att = MultiHeadAttention(params, f"{name}.att", dim, heads)
        self.cross = None
        if cross:
            self.ln_c = LayerNorm(params, f"{name}.lnc", dim)
            self.cross = MultiHeadAttention(params, f"{name}.cross", dim, heads)
        self.ln2 = LayerNorm(params, f"{name}.ln2", dim)
        self.ff = FeedForward(params, f"{name}.ff", dim, ff)

    def __call__(self, x: Tensor, self_bias, memory: Tensor | None = None, mem_bias=None,
                 dropout: float = 0.0, rng=None) -> Tensor:
        h = self.ln1(x)
        x = x + ad.dropout(self.att(h, h, self_bias), dropout, rng)
        if self.cross is not None:
            x = x + ad.dropout(self.cross(self.ln_c(x), memory, mem_bias), dropout, rng)
        return x + ad.dropout(self.ff(self.ln2(x), dropout, rng), dropout, rng)

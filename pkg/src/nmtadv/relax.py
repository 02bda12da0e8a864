"""The attack's optimisation variable P and its Gumbel-softmax relaxation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ParameterError

U_CLAMP = 1e-12


@dataclass
class ProbabilityMatrix:
    """P (n x |V|) plus the rows pinned to the targeted word."""

    P: Tensor
    source_ids: np.ndarray
    epsilon: float
    frozen_rows: frozenset = field(default_factory=frozenset)

    @property
    def free_mask(self) -> np.ndarray:
        m = np.ones((self.P.shape[0], 1))
        for r in self.frozen_rows:
            m[r] = 0.0
        return m

    def zero_frozen_grad(self) -> None:
        """Zero gradient rows of the targeted span so Adam moments never see them."""
        if self.P.grad is not None and self.frozen_rows:
            self.P.grad[sorted(self.frozen_rows)] = 0.0


def init_prob_matrix(source_ids: Sequence[int], vocab_size: int, epsilon: float,
                     frozen: Sequence[int] = ()) -> ProbabilityMatrix:
    ids = np.asarray(source_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise IndexError(f"source id out of range for vocabulary of {vocab_size}")
    P = np.zeros((len(ids), vocab_size))
    P[np.arange(len(ids)), ids] = epsilon
    return ProbabilityMatrix(Tensor(P, requires_grad=True), ids, float(epsilon), frozenset(int(r) for r in frozen))


def sample_gumbel(shape, rng: np.random.Generator) -> np.ndarray:
    u = np.clip(rng.random(shape), U_CLAMP, 1.0 - U_CLAMP)
    return -np.log(-np.log(u))


def gumbel_softmax(P: Tensor | np.ndarray, g: np.ndarray, tau: float = 1.0) -> Tensor:
    """Row-wise softmax((P + g) / tau); differentiable in P."""
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    if not isinstance(P, Tensor):
        P = Tensor(P)
    if P.shape != np.shape(g):
        raise ParameterError(f"P {P.shape} and noise {np.shape(g)} differ in shape")
    return ad.softmax((P + Tensor(g)) * (1.0 / tau), axis=-1)


def argmax_tokens(gamma: Tensor | np.ndarray) -> np.ndarray:
    """Per-row argmax; numpy already breaks ties toward the lowest id."""
    data = gamma.data if isinstance(gamma, Tensor) else np.asarray(gamma)
    return np.argmax(data, axis=-1)

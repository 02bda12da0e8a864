"""Targeted-word gradient attack: margin loss over the decode trace, the
relaxed objective on P, and the sample-perturb-verify loop."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import AttackError, ContractError, ParameterError, SampleError
from .lm import nll_relaxed
from .nmt import DecodeTrace
from .relax import ProbabilityMatrix, argmax_tokens, gumbel_softmax, init_prob_matrix, sample_gumbel
from .validity import EvaluationSample, Status, check_validity, edit_score
from .victim import Victim
from .vocab import Vocabulary


@dataclass
class AttackConfig:
    mu: float = 3.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    epsilon: float = 12.0
    lr: float = 3e-3
    opt_iters: int = 50
    max_retries: int = 100
    tau: float = 1.0
    beam_size: int = 4
    seed: int = 0

    def __post_init__(self):
        if not self.mu > 0:
            raise ParameterError("margin mu must be positive")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ParameterError("fluency weights must be non-negative")
        if self.opt_iters < 1 or self.max_retries < 1:
            raise ParameterError("opt_iters and max_retries must be >= 1")
        if not self.tau > 0:
            raise ParameterError("temperature must be positive")


@dataclass
class AttackResult:
    method: str
    sent_id: int
    z: str
    success: bool
    x_ids: list[int]
    x_adv_ids: list[int]
    x_adv_text: str
    y_adv_ids: list[int]
    y_adv_text: str
    edit: float
    query_count: int
    retries_used: int = 0
    opt_queries: int = 0
    final_adv_loss: float = math.nan
    status: str = ""
    fluency_nll: float = math.nan
    error: str | None = None
    run: int = 0
    sample: int = -1

    def to_json(self) -> str:
        d = asdict(self)
        for k in ("final_adv_loss", "fluency_nll"):
            if isinstance(d[k], float) and not math.isfinite(d[k]):
                d[k] = None
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "AttackResult":
        d = json.loads(line)
        for k in ("final_adv_loss", "fluency_nll"):
            if d[k] is None:
                d[k] = math.nan
        return cls(**d)


def result_from(method: str, sample: EvaluationSample, x_adv: Sequence[int], translation, verdict,
                queries: int, vocab: Vocabulary, **extra) -> AttackResult:
    x_adv = [int(i) for i in x_adv]
    return AttackResult(
        method=method, sent_id=sample.sent_id, z=sample.z,
        success=bool(verdict is not None and verdict.valid),
        x_ids=list(sample.x_ids), x_adv_ids=x_adv, x_adv_text=vocab.decode(x_adv),
        y_adv_ids=list(translation.ids) if translation is not None else [],
        y_adv_text=translation.text if translation is not None else "",
        edit=edit_score(sample.x_ids, x_adv), query_count=queries,
        status=verdict.status.value if verdict is not None else "",
        fluency_nll=verdict.fluency_nll if verdict is not None else math.nan, **extra)


# -- losses --------------------------------------------------------------------

def _hinge_rows(theta: Tensor, h_set: Sequence[int], mu: float) -> Tensor:
    vocab = theta.shape[-1]
    h = np.array(sorted(set(int(i) for i in h_set)), dtype=np.int64)
    if h.size == 0:
        raise ContractError("h_set is empty")
    if h.min() < 0 or h.max() >= vocab:
        raise ContractError("h_set id outside the target vocabulary")
    rest = np.setdiff1d(np.arange(vocab), h)
    if rest.size == 0:
        raise ContractError("h_set covers the whole target vocabulary; no competing token")
    best_other = ad.tmax(theta[:, rest], axis=1)
    gap = theta[:, h] - ad.reshape(best_other, (theta.shape[0], 1))
    return ad.relu_hinge(gap, mu)


def margin_loss(theta, h_set: Sequence[int], mu: float) -> Tensor:
    """Sum over h of max(theta_h - max_{t not in h_set} theta_t + mu, 0) for one logit vector."""
    theta = ad.as_tensor(theta)
    return ad.tsum(_hinge_rows(ad.reshape(theta, (1, theta.shape[-1])), h_set, mu))


def adversarial_loss(trace: DecodeTrace | Tensor, h_set: Sequence[int], mu: float) -> Tensor:
    """Margin loss summed over every decoding step of the trace."""
    logits = trace.logits if isinstance(trace, DecodeTrace) else ad.as_tensor(trace)
    if logits.shape[0] == 0:
        raise ContractError("adversarial loss of an empty decode trace")
    return ad.tsum(_hinge_rows(logits, h_set, mu))


@dataclass
class ObjectiveValue:
    loss: float
    adv: float
    nll_l2r: float
    nll_r2l: float
    grad: np.ndarray
    translation: object = field(repr=False, default=None)


def objective(victim: Victim, lms, pm: ProbabilityMatrix, sample: EvaluationSample, config: AttackConfig,
              rng: np.random.Generator) -> ObjectiveValue:
    """One-draw estimate of (1/k) L_adv + l1 NLL_l2r + l2 NLL_r2l and its gradient in P.

    Costs exactly one relaxed decode.  Frozen rows of the returned gradient are zero.
    """
    if sample.k == 0:
        raise SampleError("sample has no reference translation of the targeted word")
    g = sample_gumbel(pm.P.shape, rng)
    gamma = gumbel_softmax(pm.P, g, config.tau)
    translation = victim.translate_relaxed(gamma)
    adv = adversarial_loss(translation.trace, sample.h_p, config.mu)
    loss = adv * (1.0 / sample.k)
    parts = [math.nan, math.nan]
    for i, (lm, lam) in enumerate(zip(lms, (config.lambda1, config.lambda2))):
        if lam:
            term = nll_relaxed(lm, gamma)
            parts[i] = term.item()
            loss = loss + term * lam
    pm.P.grad = None
    loss.backward()
    pm.zero_frozen_grad()
    grad = pm.P.grad.copy() if pm.P.grad is not None else np.zeros(pm.P.shape)
    return ObjectiveValue(loss.item(), adv.item(), parts[0], parts[1], grad, translation)


def optimize_P(victim: Victim, lms, pm: ProbabilityMatrix, sample: EvaluationSample, config: AttackConfig,
               rng: np.random.Generator) -> tuple[ProbabilityMatrix, int, list[float]]:
    """Adam on P for at most opt_iters relaxed decodes; stops once L_adv hits 0.

    Returns (P, queries used, L_adv history).
    """
    opt = ad.Adam([pm.P], config.lr)
    history: list[float] = []
    queries = 0
    last_good = pm.P.data.copy()
    for _ in range(config.opt_iters):
        val = objective(victim, lms, pm, sample, config, rng)
        queries += 1
        if not math.isfinite(val.loss):
            pm.P.data = last_good
            pm.P.grad = None
            raise AttackError(f"objective became non-finite after {queries} queries")
        history.append(val.adv)
        if val.adv == 0.0:
            break
        last_good = pm.P.data.copy()
        opt.step()
    pm.P.grad = None
    return pm, queries, history


def craft_candidate(gamma, sample: EvaluationSample, vocab: Vocabulary) -> list[int]:
    """Per-row argmax, kept only where it agrees with the original token's @@ and case flags."""
    best = argmax_tokens(gamma)
    s, e = sample.z_span
    out = list(sample.x_ids)
    for i, orig in enumerate(sample.x_ids):
        if s <= i < e:
            continue
        cand = int(best[i])
        if cand != orig and vocab.compatible(orig, cand):
            out[i] = cand
    return out


def twga_attack(victim: Victim, lms, delta: float, sample: EvaluationSample, config: AttackConfig,
                rng: np.random.Generator | None = None) -> AttackResult:
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    vocab = victim.src_vocab
    start = victim.queries
    x = list(sample.x_ids)
    if not sample.perturbable:
        y = victim.translate(x)
        verdict = check_validity(x, x, y, sample, lms, delta)
        return result_from("twga", sample, x, y, verdict, victim.queries - start, vocab, retries_used=0)

    pm = init_prob_matrix(x, len(vocab), config.epsilon, range(*sample.z_span))
    pm, queries, history = optimize_P(victim, lms, pm, sample, config, rng)
    final_adv = history[-1] if history else math.nan

    cand, y, verdict = x, None, None
    retries = 0
    with ad.no_grad():
        for retries in range(1, config.max_retries + 1):
            gamma = gumbel_softmax(pm.P.data, sample_gumbel(pm.P.shape, rng), config.tau)
            cand = craft_candidate(gamma, sample, vocab)
            y = victim.translate(cand)
            queries += 1
            verdict = check_validity(x, cand, y, sample, lms, delta)
            if verdict.status is Status.VALID:
                break
    return result_from("twga", sample, cand, y, verdict, queries, vocab,
                       retries_used=retries, opt_queries=len(history), final_adv_loss=final_adv)

"""Comparison attacks restricted to non-targeted tokens: random replacement,
gradient-ranked neighbour substitution, first-order flips and a projected
embedding-space attack with a negated hinge objective."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .errors import AttackError, ParameterError
from .twga import AttackResult, result_from
from .validity import EvaluationSample, check_validity
from .victim import Victim
from .vocab import Vocabulary


@dataclass
class BaselineConfig:
    rr_ratio: float = 0.30
    rr_runs: int = 3
    s2s_iters: int = 200
    s2s_early_stop: bool = False
    s2s_lr: float = 0.05
    s2s_lasso: float = 0.1
    textfooler_k: int = 8
    flip_k: int = 0             # 0 = score every compatible token
    mu: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.rr_ratio <= 1:
            raise ParameterError("rr_ratio must lie in (0, 1]")
        if self.s2s_iters < 1 or self.rr_runs < 1 or self.textfooler_k < 1:
            raise ParameterError("iteration and run counts must be >= 1")

    def query_reduced(self, iters: int = 50) -> "BaselineConfig":
        return dataclasses.replace(self, s2s_iters=iters, s2s_early_stop=True)


def compatible_ids(vocab: Vocabulary, token: int) -> np.ndarray:
    """Every id that may replace ``token`` (same @@ and case flags, not special, not itself)."""
    mask = ((vocab.bpe_flags == vocab.bpe_flags[token]) & (vocab.case_flags == vocab.case_flags[token])
            & ~vocab.special_flags)
    mask[token] = False
    return np.flatnonzero(mask)


def rr_count(n_perturbable: int, ratio: float) -> int:
    """round-half-up(ratio * n)."""
    return int(math.floor(ratio * n_perturbable + 0.5))


# -- random replacement -----------------------------------------------------------

def random_replace_attack(victim: Victim, lms, delta: float, sample: EvaluationSample, config: BaselineConfig,
                          rng: np.random.Generator) -> AttackResult:
    vocab = victim.src_vocab
    start = victim.queries
    positions = sample.perturbable
    m = rr_count(len(positions), config.rr_ratio)
    x_adv = list(sample.x_ids)
    if m:
        for p in sorted(rng.choice(positions, size=m, replace=False)):
            pool = compatible_ids(vocab, x_adv[p])
            if pool.size:
                x_adv[p] = int(pool[rng.integers(pool.size)])
    y = victim.translate(x_adv)
    verdict = check_validity(sample.x_ids, x_adv, y, sample, lms, delta)
    return result_from("rr", sample, x_adv, y, verdict, victim.queries - start, vocab)


# -- gradient-ranked neighbour substitution -----------------------------------------

def cosine_neighbours(table: np.ndarray, vocab: Vocabulary, token: int, k: int) -> list[int]:
    pool = compatible_ids(vocab, token)
    if not pool.size:
        return []
    unit = table / np.maximum(np.linalg.norm(table, axis=1, keepdims=True), 1e-12)
    sims = unit[pool] @ unit[token]
    order = np.lexsort((pool, -sims))      # highest similarity, then lowest id
    return [int(pool[i]) for i in order[:k]]


def rank_positions(grad: np.ndarray, positions) -> list[int]:
    """Positions by descending gradient norm; equal norms keep index order."""
    positions = list(positions)
    norms = np.linalg.norm(grad[positions], axis=1)
    return [positions[i] for i in np.argsort(-norms, kind="stable")]


def wtextfooler_attack(victim: Victim, lms, delta: float, sample: EvaluationSample, config: BaselineConfig,
                       rng: np.random.Generator | None = None) -> AttackResult:
    vocab = victim.src_vocab
    table = victim.model.src_emb.data
    start = victim.queries
    x = list(sample.x_ids)
    cur = list(x)
    y, cur_loss, grad = victim.adv_gradient(cur, sample.h_p, config.mu)
    verdict = check_validity(x, cur, y, sample, lms, delta)
    for pos in rank_positions(grad, sample.perturbable):
        if verdict.valid:
            break
        for cand_tok in cosine_neighbours(table, vocab, x[pos], config.textfooler_k):
            cand = list(cur)
            cand[pos] = cand_tok
            y_c, loss_c = victim.adv_loss(cand, sample.h_p, config.mu)
            v_c = check_validity(x, cand, y_c, sample, lms, delta)
            if v_c.valid:
                cur, y, verdict = cand, y_c, v_c
                break
            if loss_c < cur_loss:
                cur, y, verdict, cur_loss = cand, y_c, v_c, loss_c
                break
    return result_from("wtextfooler", sample, cur, y, verdict, victim.queries - start, vocab,
                       final_adv_loss=cur_loss)


# -- first-order flips ---------------------------------------------------------------

def flip_scores(table: np.ndarray, tokens, grad: np.ndarray, positions, vocab: Vocabulary, k: int = 0):
    """Best (score, position, token) by first-order change (e_new - e_old) . grad; lower is better."""
    best = None
    for p in positions:
        pool = compatible_ids(vocab, tokens[p])
        if not pool.size:
            continue
        scores = (table[pool] - table[tokens[p]]) @ grad[p]
        if k:
            keep = np.argsort(scores, kind="stable")[:k]
            pool, scores = pool[keep], scores[keep]
        i = int(np.argmin(scores))
        cand = (float(scores[i]), p, int(pool[i]))
        if best is None or cand[0] < best[0]:
            best = cand
    return best


def targeted_flips_attack(victim: Victim, lms, delta: float, sample: EvaluationSample, config: BaselineConfig,
                          rng: np.random.Generator | None = None) -> AttackResult:
    vocab = victim.src_vocab
    table = victim.model.src_emb.data
    start = victim.queries
    x = list(sample.x_ids)
    cur = list(x)
    free = list(sample.perturbable)
    while True:
        y, loss, grad = victim.adv_gradient(cur, sample.h_p, config.mu)
        verdict = check_validity(x, cur, y, sample, lms, delta)
        if verdict.valid:
            break
        best = flip_scores(table, cur, grad, free, vocab, config.flip_k)
        if best is None:
            break
        _, pos, tok = best
        cur[pos] = tok
        free.remove(pos)
    return result_from("targeted-flips", sample, cur, y, verdict, victim.queries - start, vocab,
                       final_adv_loss=loss)


# -- projected embedding-space attack --------------------------------------------------

def project(table: np.ndarray, e: np.ndarray, original, positions, vocab: Vocabulary) -> list[int]:
    """Nearest (Euclidean) admissible token for every free row; other rows keep the original."""
    out = list(original)
    for p in positions:
        pool = np.append(compatible_ids(vocab, original[p]), original[p])
        d = ((table[pool] - e[p]) ** 2).sum(axis=1)
        out[p] = int(pool[np.lexsort((pool, d))[0]])
    return out


def seq2sick_attack(victim: Victim, lms, delta: float, sample: EvaluationSample, config: BaselineConfig,
                    rng: np.random.Generator | None = None) -> AttackResult:
    """Projected gradient descent on source embeddings, minimising the hinge loss that
    pushes every translation of z out of the output plus a group-lasso pull to x."""
    vocab = victim.src_vocab
    table = victim.model.src_emb.data
    start = victim.queries
    x = list(sample.x_ids)
    free = sample.perturbable
    mask = np.zeros((len(x), 1))
    mask[free] = 1.0
    e0 = table[x].copy()
    e = e0.copy()
    m = np.zeros_like(e)
    v = np.zeros_like(e)
    b1, b2, eps = 0.9, 0.999, 1e-8
    best = None                      # (edit, ids, y, verdict)
    last = None
    loss = math.nan
    for it in range(1, config.s2s_iters + 1):
        cur = project(table, e, x, free, vocab)
        y, loss, grad = victim.adv_gradient(cur, sample.h_p, config.mu)
        if not math.isfinite(loss):
            raise AttackError(f"non-finite hinge loss at iteration {it}")
        verdict = check_validity(x, cur, y, sample, lms, delta)
        last = (cur, y, verdict)
        if verdict.valid:
            key = sum(a != b for a, b in zip(x, cur))
            if best is None or key < best[0]:
                best = (key, cur, y, verdict)
        if config.s2s_early_stop and loss == 0.0:
            break
        diff = e - e0
        norms = np.linalg.norm(diff, axis=1, keepdims=True)
        g = (grad + config.s2s_lasso * np.where(norms > 0, diff / np.maximum(norms, 1e-12), 0.0)) * mask
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        e = e - config.s2s_lr * (m / (1 - b1 ** it)) / (np.sqrt(v / (1 - b2 ** it)) + eps)
    ids, y, verdict = (best[1], best[2], best[3]) if best is not None else last
    return result_from("seq2sick", sample, ids, y, verdict, victim.queries - start, vocab, final_adv_loss=loss)


ATTACKS = {
    "rr": random_replace_attack,
    "wtextfooler": wtextfooler_attack,
    "targeted-flips": targeted_flips_attack,
    "seq2sick": seq2sick_attack,
}

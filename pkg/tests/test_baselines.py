import copy

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nmtadv.baselines import (ATTACKS, BaselineConfig, compatible_ids, cosine_neighbours, flip_scores, project,
                              random_replace_attack, rank_positions, rr_count, seq2sick_attack,
                              targeted_flips_attack, wtextfooler_attack)
from nmtadv.errors import ParameterError
from nmtadv.validity import make_sample
from nmtadv.victim import Victim

DELTA = 50.0


@pytest.mark.parametrize("n, ratio, want", [(10, 0.3, 3), (5, 0.3, 2), (1, 0.3, 0), (0, 0.3, 0), (7, 1.0, 7),
                                            (8, 0.3, 2), (2, 0.25, 1)])
def test_rr_count_rounds_half_up(n, ratio, want):
    assert rr_count(n, ratio) == want


@pytest.mark.parametrize("kw", [dict(rr_ratio=0), dict(rr_ratio=1.5), dict(s2s_iters=0), dict(textfooler_k=0)])
def test_config_validation(kw):
    with pytest.raises(ParameterError):
        BaselineConfig(**kw)


def test_query_reduced_variant():
    q = BaselineConfig().query_reduced()
    assert (q.s2s_iters, q.s2s_early_stop) == (50, True)


def test_compatible_ids_share_flags(small_toy):
    sv = small_toy[1]
    for tok in range(4, len(sv), 7):
        pool = compatible_ids(sv, tok)
        assert tok not in pool
        for j in pool:
            assert (sv.is_bpe(j), sv.is_cased(j), sv.is_special(j)) == (sv.is_bpe(tok), sv.is_cased(tok), False)


def test_rr_never_touches_span_and_changes_expected_count(tiny_models, tiny_sample):
    v = Victim(tiny_models[0]["transformer"])
    a, b = tiny_sample.z_span
    m = rr_count(len(tiny_sample.perturbable), 0.3)
    rng = np.random.default_rng(0)
    for _ in range(100):
        res = random_replace_attack(v, tiny_models[1], DELTA, tiny_sample, BaselineConfig(), rng)
        assert res.x_adv_ids[a:b] == list(tiny_sample.x_ids[a:b])
        assert sum(p != q for p, q in zip(res.x_ids, res.x_adv_ids)) == m
        assert res.query_count == 1


def test_rr_full_ratio_replaces_every_free_token(tiny_models, tiny_sample):
    v = Victim(tiny_models[0]["transformer"])
    res = random_replace_attack(v, tiny_models[1], DELTA, tiny_sample, BaselineConfig(rr_ratio=1.0),
                                np.random.default_rng(1))
    changed = [i for i, (p, q) in enumerate(zip(res.x_ids, res.x_adv_ids)) if p != q]
    assert changed == list(tiny_sample.perturbable)


def test_rank_positions_zero_gradient_keeps_order():
    assert rank_positions(np.zeros((6, 4)), [5, 1, 3]) == [5, 1, 3]


def test_rank_positions_by_norm():
    g = np.zeros((4, 2))
    g[1] = [3, 4]
    g[3] = [0, 1]
    assert rank_positions(g, [0, 1, 3]) == [1, 3, 0]


def test_cosine_neighbours_oracle(small_toy):
    sv = small_toy[1]
    table = np.random.default_rng(3).normal(size=(len(sv), 5))
    tok = next(i for i in range(4, len(sv)) if not sv.is_bpe(i))

    def cos(a, b):
        return a @ b / (np.linalg.norm(a) * np.linalg.norm(b))

    want = sorted(compatible_ids(sv, tok), key=lambda j: (-cos(table[j], table[tok]), j))[:8]
    assert cosine_neighbours(table, sv, tok, 8) == [int(j) for j in want]


def test_wtextfooler_query_bound(tiny_models, small_toy):
    ts, sv, tv, d = small_toy
    v = Victim(tiny_models[0]["transformer"])
    cfg = BaselineConfig(textfooler_k=3)
    for sid, (src, _) in enumerate(ts.test[:5]):
        i = next(i for i, w in enumerate(src.split()) if w in d)
        s = make_sample(src, i, d, sv, tv, sent_id=sid)
        before = v.queries
        res = wtextfooler_attack(v, tiny_models[1], DELTA, s, cfg)
        assert res.query_count == v.queries - before <= cfg.textfooler_k * len(s.x_ids) + 1
        a, b = s.z_span
        assert res.x_adv_ids[a:b] == list(s.x_ids[a:b])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_flip_scores_match_exhaustive_search(small_toy, seed):
    sv = small_toy[1]
    rng = np.random.default_rng(seed)
    table = rng.normal(size=(len(sv), 4))
    tokens = [int(t) for t in rng.integers(4, len(sv), size=5)]
    grad = rng.normal(size=(5, 4))
    positions = [0, 2, 3]
    best = None
    for p in positions:
        for j in compatible_ids(sv, tokens[p]):
            s = float((table[j] - table[tokens[p]]) @ grad[p])
            if best is None or s < best[0]:
                best = (s, p, int(j))
    got = flip_scores(table, tokens, grad, positions, sv)
    assert got[1:] == best[1:] and got[0] == pytest.approx(best[0], abs=1e-12)


def test_flips_one_query_per_iteration(tiny_models, tiny_sample):
    v = Victim(tiny_models[0]["transformer"])
    res = targeted_flips_attack(v, tiny_models[1], DELTA, tiny_sample, BaselineConfig())
    changed = sum(p != q for p, q in zip(res.x_ids, res.x_adv_ids))
    a, b = tiny_sample.z_span
    assert res.x_adv_ids[a:b] == list(tiny_sample.x_ids[a:b])
    # every iteration flips one new position, then the next query checks it
    assert res.query_count == v.queries == changed + 1


def test_project_oracle(small_toy):
    sv = small_toy[1]
    rng = np.random.default_rng(7)
    table = rng.normal(size=(len(sv), 3))
    x = [int(t) for t in rng.integers(4, len(sv), size=4)]
    e = rng.normal(size=(4, 3))
    out = project(table, e, x, [1, 3], sv)
    assert out[0] == x[0] and out[2] == x[2]
    for p in (1, 3):
        pool = list(compatible_ids(sv, x[p])) + [x[p]]
        assert out[p] == min(pool, key=lambda j: (((table[j] - e[p]) ** 2).sum(), j))


def test_project_at_original_embeddings_is_identity(small_toy):
    sv = small_toy[1]
    table = np.random.default_rng(8).normal(size=(len(sv), 3))
    x = [5, 9, 12]
    assert project(table, table[x], x, [0, 1, 2], sv) == x


def test_seq2sick_early_stop(tiny_models, tiny_sample):
    model = copy.deepcopy(tiny_models[0]["transformer"])
    model.out.b.data[sorted(tiny_sample.h_p)] = -1e3
    v = Victim(model)
    res = seq2sick_attack(v, tiny_models[1], DELTA, tiny_sample, BaselineConfig().query_reduced())
    assert res.query_count == 1 and res.final_adv_loss == 0.0


def test_seq2sick_runs_full_budget_without_early_stop(tiny_models, tiny_sample):
    v = Victim(tiny_models[0]["transformer"])
    res = seq2sick_attack(v, tiny_models[1], DELTA, tiny_sample, BaselineConfig(s2s_iters=7))
    assert res.query_count == v.queries == 7
    a, b = tiny_sample.z_span
    assert res.x_adv_ids[a:b] == list(tiny_sample.x_ids[a:b])


@pytest.mark.parametrize("name", sorted(ATTACKS))
def test_success_implies_valid(name, tiny_models, small_toy):
    from nmtadv.validity import check_validity
    ts, sv, tv, d = small_toy
    v = Victim(tiny_models[0]["transformer"])
    cfg = BaselineConfig(s2s_iters=5)
    for sid, (src, _) in enumerate(ts.test[:4]):
        i = next(i for i, w in enumerate(src.split()) if w in d)
        s = make_sample(src, i, d, sv, tv, sent_id=sid)
        res = ATTACKS[name](v, tiny_models[1], DELTA, s, cfg, np.random.default_rng(sid))
        assert res.method == name
        if res.success:
            assert check_validity(s.x_ids, res.x_adv_ids, v.translate(res.x_adv_ids), s, tiny_models[1],
                                  DELTA).valid

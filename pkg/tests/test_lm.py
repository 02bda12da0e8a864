import math

import numpy as np
import pytest

from nmtadv import autodiff as ad
from nmtadv.autodiff import Tensor
from nmtadv.errors import CheckpointError, ContractError, DataError
from nmtadv.lm import CausalLm, LmConfig, load_lm, nll, nll_batch, nll_relaxed, train_lm
from nmtadv.vocab import Vocabulary

from gradcheck import fd_grad, max_rel_err

SENT = "bo kali mora tes vu lapineko"
TINY = dict(dim=32, heads=2, ff_dim=64, layers=2, dropout=0.0, warmup=10)


@pytest.fixture(scope="module")
def vocab():
    return Vocabulary.build([SENT, "kali bo tes mora vu", "Nuro lapineko tes"])


@pytest.fixture(scope="module")
def memorised(vocab):
    return train_lm([SENT] * 8, vocab, config=LmConfig(steps=120, batch_size=8, lr=1e-2, seed=5, **TINY))


def test_memorised_sentence_has_near_zero_nll(memorised, vocab):
    assert nll(memorised, vocab.encode(SENT)) <= 0.05


def test_uniform_logits_give_log_vocab(vocab):
    lm = CausalLm(LmConfig(**TINY), vocab)
    lm.out.w.data[:] = 0.0
    lm.out.b.data[:] = 0.0
    assert nll(lm, vocab.encode("kali tes")) == pytest.approx(math.log(len(vocab)), abs=1e-12)


def test_reversal_changes_score(memorised, vocab):
    ids = vocab.encode(SENT)
    assert nll(memorised, ids[::-1]) > nll(memorised, ids) + 1.0


def test_r2l_equals_l2r_on_reversed_corpus(vocab):
    corpus = [SENT, "kali bo tes mora vu", "Nuro lapineko tes"]
    cfg = LmConfig(steps=15, batch_size=2, seed=9, **TINY)
    r2l = train_lm(corpus, vocab, "r2l", cfg)
    l2r = train_lm([vocab.encode(s)[::-1] for s in corpus], vocab, "l2r", cfg)
    for name, p in r2l.parameters().items():
        assert np.array_equal(p.data, l2r.parameters()[name].data), name
    ids = vocab.encode(SENT)
    assert float(nll(r2l, ids)) == float(nll(l2r, ids[::-1]))


def test_unknown_ids_are_flagged(memorised, vocab):
    ids = vocab.encode(SENT)
    out = nll(memorised, [ids[0], 10_000] + ids[2:])
    assert out.unknown == (1,)
    assert out == nll(memorised, [ids[0], vocab.unk] + ids[2:])
    assert math.isfinite(out) and out >= 0


def test_empty_sequence_rejected(memorised):
    with pytest.raises(ContractError):
        nll(memorised, [])


def test_empty_corpus_rejected(vocab):
    with pytest.raises(DataError):
        train_lm([], vocab, config=LmConfig(steps=1, **TINY))


def test_batch_scoring_agrees_with_single(memorised, vocab):
    seqs = [vocab.encode(SENT), vocab.encode("kali tes"), vocab.encode("Nuro lapineko tes bo")]
    batch = nll_batch(memorised, seqs)
    assert np.allclose(batch, [float(nll(memorised, s)) for s in seqs], rtol=0, atol=1e-12)


@pytest.mark.parametrize("direction", ["l2r", "r2l"])
def test_relaxed_one_hot_equals_hard(vocab, direction):
    lm = CausalLm(LmConfig(direction=direction, seed=3, **TINY), vocab)
    ids = vocab.encode(SENT)
    one_hot = np.eye(len(vocab))[ids]
    assert abs(nll_relaxed(lm, Tensor(one_hot)).item() - float(nll(lm, ids))) <= 1e-9


@pytest.mark.parametrize("direction", ["l2r", "r2l"])
def test_relaxed_gradient_matches_finite_differences(vocab, direction):
    lm = CausalLm(LmConfig(direction=direction, seed=4, **TINY), vocab)
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(4, len(vocab)))
    logits[np.arange(4), vocab.encode("kali tes mora vu")] += 6.0

    def f(z):
        return nll_relaxed(lm, ad.softmax(Tensor(z), axis=-1)).item()

    z = Tensor(logits, requires_grad=True)
    nll_relaxed(lm, ad.softmax(z, axis=-1)).backward()
    entries = [int(i) for i in rng.choice(logits.size, size=6, replace=False)]
    num = fd_grad(f, logits, entries=entries)
    assert max_rel_err(z.grad, num) <= 1e-5


def test_relaxed_rejects_non_stochastic_rows(vocab):
    lm = CausalLm(LmConfig(**TINY), vocab)
    bad = np.full((2, len(vocab)), 1.0 / len(vocab))
    bad[1, 0] += 1e-6
    with pytest.raises(ContractError, match="row 1"):
        nll_relaxed(lm, Tensor(bad))


def test_checkpoint_roundtrip(memorised, vocab, tmp_path):
    path = tmp_path / "lm.ckpt"
    memorised.save(path)
    back = load_lm(path)
    ids = vocab.encode(SENT)
    assert float(nll(back, ids)) == float(nll(memorised, ids))
    (tmp_path / "lm.ckpt.vocab").write_text("<pad>\n<bos>\n<eos>\n<unk>\nzz\n")
    with pytest.raises(CheckpointError):
        load_lm(path)

import dataclasses

import numpy as np
import pytest

from nmtadv import autodiff as ad
from nmtadv.autodiff import Tensor
from nmtadv.errors import CheckpointError, ContractError, DataError, ParameterError
from nmtadv.nmt import (NmtConfig, NmtModel, beam_decode, forward_relaxed, greedy_decode, load_model, save_model,
                        token_accuracy, train)
from nmtadv.vocab import Vocabulary

from conftest import TINY_NMT
from gradcheck import fd_grad, rel_err_scaled

COPY_WORDS = "ka lo mi nu pe"


@pytest.fixture(scope="module")
def copy_model():
    rng = np.random.default_rng(0)
    words = COPY_WORDS.split()
    sents = [" ".join(rng.choice(words, size=rng.integers(2, 5))) for _ in range(200)]
    v = Vocabulary.build(sents)
    cfg = NmtConfig(arch="transformer", emb_dim=32, hidden=32, heads=2, ff_dim=64, layers=1, dropout=0.0,
                    label_smoothing=0.0, lr=1e-2, warmup=20, steps=250, batch_size=16, seed=2)
    return train(list(zip(sents, sents)), v, v, cfg), v


def test_copy_task_is_learned(copy_model):
    model, v = copy_model
    pairs = [("ka mi pe", "ka mi pe"), ("nu nu lo", "nu nu lo"), ("pe ka", "pe ka")]
    assert token_accuracy(model, pairs) == 1.0
    assert beam_decode(model, v.encode("lo pe mi nu")).text == "lo pe mi nu"


@pytest.mark.parametrize("arch", ["lstm", "transformer"])
def test_beam_one_equals_greedy(tiny_models, small_toy, arch):
    model = tiny_models[0][arch]
    ts, sv = small_toy[0], small_toy[1]
    for src, _ in ts.test[:5]:
        ids = sv.encode(src)
        assert beam_decode(model, ids, beam_size=1).ids == greedy_decode(model, [ids])[0]


@pytest.mark.parametrize("arch", ["lstm", "transformer"])
def test_batched_greedy_matches_single(tiny_models, small_toy, arch):
    model = tiny_models[0][arch]
    ids = [small_toy[1].encode(s) for s, _ in small_toy[0].test[:6]]
    assert greedy_decode(model, ids) == [greedy_decode(model, [i])[0] for i in ids]


@pytest.mark.parametrize("arch", ["lstm", "transformer"])
def test_trace_shape_and_tokens(tiny_models, tiny_sample, arch):
    model = tiny_models[0][arch]
    out = beam_decode(model, tiny_sample.x_ids, beam_size=1, record=True)
    assert out.trace.logits.shape == (len(out.ids), len(model.tgt_vocab))
    assert list(np.argmax(out.trace.logits.data, axis=1)) == out.ids


@pytest.mark.parametrize("arch", ["lstm", "transformer"])
def test_relaxed_one_hot_matches_hard(tiny_models, tiny_sample, arch):
    model = tiny_models[0][arch]
    hard = beam_decode(model, tiny_sample.x_ids, record=True)
    soft = forward_relaxed(model, Tensor(np.eye(len(model.src_vocab))[list(tiny_sample.x_ids)]))
    assert soft.ids == hard.ids
    assert np.max(np.abs(soft.trace.logits.data - hard.trace.logits.data)) <= 1e-9


@pytest.mark.parametrize("arch", ["lstm", "transformer"])
def test_relaxed_trace_gradient(tiny_models, tiny_sample, arch):
    model = tiny_models[0][arch]
    n, V = len(tiny_sample.x_ids), len(model.src_vocab)
    base = np.random.default_rng(1).normal(size=(n, V))
    base[np.arange(n), list(tiny_sample.x_ids)] += 4.0
    tokens = forward_relaxed(model, ad.softmax(Tensor(base), axis=-1)).ids

    def score(z):
        out = forward_relaxed(model, ad.softmax(z, axis=-1))
        assert out.ids == tokens            # fixed path keeps the objective smooth
        logits = out.trace.logits
        return (logits * Tensor(np.eye(logits.shape[1])[tokens])).sum()

    z = Tensor(base, requires_grad=True)
    score(z).backward()
    rng = np.random.default_rng(2)
    top = np.argsort(-np.abs(z.grad).reshape(-1))[:30]
    entries = [int(i) for i in rng.choice(top, size=5, replace=False)]
    num = fd_grad(lambda a: score(Tensor(a)).item(), base, step=1e-5, entries=entries)
    assert rel_err_scaled(z.grad, num) <= 1e-5


def test_relaxed_rejects_bad_distribution(tiny_models):
    model = tiny_models[0]["transformer"]
    with pytest.raises(ContractError):
        forward_relaxed(model, Tensor(np.full((3, len(model.src_vocab)), 0.5)))
    with pytest.raises(ContractError):
        forward_relaxed(model, Tensor(np.full((3, 4), 0.25)))


def test_empty_and_out_of_range_sources(tiny_models):
    model = tiny_models[0]["lstm"]
    with pytest.raises(ContractError):
        beam_decode(model, [])
    with pytest.raises(IndexError):
        beam_decode(model, [len(model.src_vocab)])


def test_beam_respects_max_len(tiny_models, tiny_sample):
    out = beam_decode(tiny_models[0]["transformer"], tiny_sample.x_ids, max_len=2)
    assert len(out.ids) <= 2
    if out.ids[-1] != tiny_models[0]["transformer"].tgt_vocab.eos:
        assert out.truncated


@pytest.mark.parametrize("arch", ["lstm", "transformer"])
def test_checkpoint_roundtrip(tiny_models, tiny_sample, tmp_path, arch):
    model = tiny_models[0][arch]
    path = tmp_path / "m.ckpt"
    save_model(model, path)
    back = load_model(path)
    assert back.config == model.config
    for name, p in model.parameters().items():
        assert np.array_equal(back.parameters()[name].data, p.data)
    assert beam_decode(back, tiny_sample.x_ids).ids == beam_decode(model, tiny_sample.x_ids).ids


def test_checkpoint_errors(tiny_models, tmp_path):
    path = tmp_path / "m.ckpt"
    save_model(tiny_models[0]["lstm"], path)
    raw = path.read_bytes()
    path.with_name("cut.ckpt").write_bytes(raw[:-8])
    for suffix in (".src.vocab", ".tgt.vocab"):
        path.with_name("cut.ckpt" + suffix).write_bytes(path.with_name("m.ckpt" + suffix).read_bytes())
    with pytest.raises(CheckpointError, match="truncated"):
        load_model(path.with_name("cut.ckpt"))
    path.with_name("junk.ckpt").write_bytes(b"hello\n")
    with pytest.raises(CheckpointError, match="magic"):
        load_model(path.with_name("junk.ckpt"))
    path.with_name("m.ckpt.tgt.vocab").write_text("<pad>\n<bos>\n<eos>\n<unk>\nqq\n")
    with pytest.raises(CheckpointError):
        load_model(path)


def test_training_is_deterministic(small_toy):
    ts, sv, tv, _ = small_toy
    cfg = NmtConfig(arch="transformer", steps=3, batch_size=4, **{k: v for k, v in TINY_NMT.items()
                                                                  if k != "dropout"})
    a, b = (train(ts.train[:20], sv, tv, cfg) for _ in range(2))
    for name, p in a.parameters().items():
        assert np.array_equal(p.data, b.parameters()[name].data), name


def test_training_rejects_empty(small_toy):
    with pytest.raises(DataError):
        train([], small_toy[1], small_toy[2], NmtConfig(steps=1))


def test_unknown_arch():
    with pytest.raises(ParameterError):
        NmtConfig(arch="gru")


def test_token_accuracy_counts_length_mismatch(copy_model):
    model, v = copy_model
    # a reference two tokens longer than the (correct) copy loses those positions
    acc = token_accuracy(model, [("ka lo", "ka lo mi nu")])
    assert acc == pytest.approx(2 / 5)

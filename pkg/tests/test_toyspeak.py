import filecmp

import pytest

from nmtadv.errors import SpecError
from nmtadv.toyspeak import ToyspeakSpec, generate_toyspeak, read_corpus, read_pos

SMALL = dict(n_train=200, n_test=40, n_mono=50, n_para=30)


@pytest.fixture(scope="module")
def toy():
    return generate_toyspeak(ToyspeakSpec(**SMALL))


def test_generation_is_byte_identical(tmp_path):
    for d in ("a", "b"):
        generate_toyspeak(ToyspeakSpec(**SMALL)).write(tmp_path / d)
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert cmp.left_list == cmp.right_list and not cmp.diff_files
    _, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", cmp.common_files, shallow=False)
    assert not mismatch and not errors


def test_seed_changes_corpus():
    a = generate_toyspeak(ToyspeakSpec(**SMALL))
    b = generate_toyspeak(ToyspeakSpec(seed=8, **SMALL))
    assert a.train != b.train


def test_every_word_is_in_the_lexicons(toy):
    for src, tgt in toy.train + toy.test + toy.para:
        assert all(w in toy.dictionary for w in src.split())
        assert all(w in toy.pos for w in src.split())
    assert all(w in toy.dictionary for s in toy.mono for w in s.split())


def test_splits_are_disjoint(toy):
    train = {s for s, _ in toy.train}
    assert not train & {s for s, _ in toy.test}
    assert not train & {s for s, _ in toy.para}
    assert not {s for s, _ in toy.test} & set(toy.mono)


def test_lengths_within_bounds(toy):
    spec = toy.spec
    assert all(spec.min_len <= len(s.split()) <= spec.max_len for s, _ in toy.train)


def _parse(src: str, tags: dict):
    """Independent reading of  NP [ADV] VERB NP [PREP NP] [ADV]."""
    words = src.split()
    v = next(i for i, w in enumerate(words) if tags[w] == "verb")
    subj = words[:v]
    pre = None
    if tags[subj[-1]] == "adverb":
        pre, subj = subj[-1], subj[:-1]
    rest = words[v + 1:]
    post = None
    if tags[rest[-1]] == "adverb":
        post, rest = rest[-1], rest[:-1]
    p = next((i for i, w in enumerate(rest) if tags[w] == "prep"), None)
    obj, pp = (rest, None) if p is None else (rest[:p], (rest[p], rest[p + 1:]))
    return subj, pre, words[v], obj, pp, post


def _choose(lex, word, ctx):
    opts = lex.translations[word]
    return opts[lex.words[lex.tags[ctx]].index(ctx) % len(opts)]


def _np_target(lex, np_, verb):
    det = [w for w in np_ if lex.tags[w] == "det"]
    head = np_[-1]
    adjs = [w for w in np_ if lex.tags[w] == "adjective"]
    return [_choose(lex, d, verb) for d in det] + [_choose(lex, head, verb)] + [_choose(lex, a, head) for a in adjs]


def test_references_follow_context_rule(toy):
    lex = toy.lexicon
    for src, tgt in toy.test[:100]:
        subj, pre, verb, obj, pp, post = _parse(src, lex.tags)
        want = _np_target(lex, subj, verb)
        if pre:
            want.append(_choose(lex, pre, verb))
        want.append(_choose(lex, verb, obj[-1]))
        want += _np_target(lex, obj, verb)
        if pp:
            want.append(_choose(lex, pp[0], verb))
            want += _np_target(lex, pp[1], verb)
        if post:
            want.append(_choose(lex, post, verb))
        assert tgt.split() == want, src


def test_ambiguity_is_present(toy):
    amb = [w for w, ts in toy.dictionary.items() if len(ts) > 1]
    assert len(amb) >= 10
    assert all(len(set(ts)) == len(ts) for ts in toy.dictionary.values())


def test_written_files_roundtrip(toy, tmp_path):
    toy.write(tmp_path)
    assert read_corpus(tmp_path / "test.tsv") == toy.test
    assert read_pos(tmp_path / "pos.tsv") == toy.pos
    assert set(toy.stopwords) == {w for w, t in toy.pos.items() if t == "stopword"}


@pytest.mark.parametrize("kw", [dict(n_nouns=2), dict(min_len=3), dict(min_len=9, max_len=8),
                                dict(max_translations=4), dict(n_determiners=0)])
def test_invalid_spec(kw):
    with pytest.raises(SpecError):
        generate_toyspeak(ToyspeakSpec(**kw))

import json
from pathlib import Path

import pytest

from nmtadv import campaign
from nmtadv.baselines import ATTACKS
from nmtadv.campaign import (CampaignReport, aggregate, build_eval_set, candidate_positions, format_invalidity,
                             quantify_invalid, read_eval_set, read_legacy, read_results, run_attack,
                             write_eval_set, write_results)
from nmtadv.errors import AttackError, MetricError, RecordError
from nmtadv.nmt import Translation
from nmtadv.twga import AttackResult
from nmtadv.validity import BilingualDictionary, LegacyPair, classify_invalid
from nmtadv.victim import Victim

FIX = Path(__file__).parent / "fixtures"


def _reference_decoder(monkeypatch, refs: dict):
    """Replace the victim decode used during eval-set construction by a lookup table."""
    def fake(model, ids, beam_size=None, *a, **k):
        text = refs[model.src_vocab.decode(list(ids))]
        return Translation(model.tgt_vocab.encode(text, add_eos=True), text)
    monkeypatch.setattr(campaign, "beam_decode", fake)


def _sentence_with(small_toy, n_content):
    ts = small_toy[0]
    pos, stop = ts.pos, ts.stopwords
    d = BilingualDictionary(ts.dictionary)
    for src, tgt in ts.train + ts.test:
        if len(candidate_positions(src.split(), d, pos, stop)) == n_content:
            return src, tgt
    pytest.skip(f"no sentence with {n_content} candidates")


def test_candidate_positions_skip_stopwords(small_toy):
    ts = small_toy[0]
    d = BilingualDictionary(ts.dictionary)
    src = ts.test[0][0]
    pos = candidate_positions(src.split(), d, ts.pos, ts.stopwords)
    assert pos and all(ts.pos[src.split()[i]] in campaign.CONTENT_TAGS for i in pos)
    assert candidate_positions(ts.stopwords[:3], d, ts.pos, ts.stopwords) == []


def test_eval_set_caps_targets(small_toy, tiny_models, monkeypatch):
    ts, sv, tv, d = small_toy
    src, tgt = _sentence_with(small_toy, 5)
    _reference_decoder(monkeypatch, {src: tgt})
    samples = build_eval_set([src], d, ts.pos, ts.stopwords, tiny_models[0]["lstm"], seed=0)
    assert len(samples) == 3
    assert len({s.z_span for s in samples}) == 3
    again = build_eval_set([src], d, ts.pos, ts.stopwords, tiny_models[0]["lstm"], seed=0)
    assert [s.to_json() for s in again] == [s.to_json() for s in samples]


def test_eval_set_drops_mistranslated(small_toy, tiny_models, monkeypatch):
    ts, sv, tv, d = small_toy
    src, _ = _sentence_with(small_toy, 3)
    _reference_decoder(monkeypatch, {src: ""})
    assert build_eval_set([src], d, ts.pos, ts.stopwords, tiny_models[0]["lstm"]) == []


def test_eval_set_keeps_only_words_whose_translation_appears(small_toy, tiny_models, monkeypatch):
    ts, sv, tv, d = small_toy
    src, tgt = _sentence_with(small_toy, 3)
    words = src.split()
    idx = candidate_positions(words, d, ts.pos, ts.stopwords)
    keep = words[idx[0]]
    # a "translation" holding only the first word's rendering
    _reference_decoder(monkeypatch, {src: d[keep][0]})
    samples = build_eval_set([src], d, ts.pos, ts.stopwords, tiny_models[0]["lstm"])
    assert {s.z for s in samples} >= {keep}
    assert all(d[keep][0] in s.Z for s in samples)


def test_eval_set_stopwords_only(small_toy, tiny_models):
    ts, _, _, d = small_toy
    assert build_eval_set([" ".join(ts.stopwords[:4])], d, ts.pos, ts.stopwords, tiny_models[0]["lstm"]) == []


def test_eval_set_file_roundtrip(tiny_sample, tmp_path):
    write_eval_set(tmp_path / "e.jsonl", [tiny_sample, tiny_sample])
    assert read_eval_set(tmp_path / "e.jsonl") == [tiny_sample, tiny_sample]


def _result(sample, sent, success, edit, q, run=0):
    return AttackResult("m", sent, "z", success, [1], [1], "", [], "", edit, q, run=run, sample=sample)


def test_aggregate_recomputation():
    recs = [_result(0, 0, True, 10.0, 4, 0), _result(0, 0, False, 0.0, 6, 1), _result(0, 0, True, 20.0, 5, 2),
            _result(1, 1, False, 0.0, 9), _result(2, 1, True, 30.0, 3)]
    row = aggregate("m", recs)
    assert row.n_samples == 3
    assert row.succ == round(100 * (2 / 3 + 0 + 1) / 3, 6)
    assert row.query == round(((4 + 6 + 5) / 3 + 9 + 3) / 3, 6)
    assert row.edit == round((10 + 20 + 30) / 3, 6)


def test_aggregate_without_success_has_no_edit():
    assert aggregate("m", [_result(0, 0, False, 0.0, 2)]).edit is None
    with pytest.raises(MetricError):
        aggregate("m", [])


def test_run_attack_accounting(tiny_models, tiny_sample):
    v = Victim(tiny_models[0]["transformer"])
    res = run_attack("rr", [tiny_sample, tiny_sample], v, tiny_models[1], 50.0, seed=1)
    assert [(r.sample, r.run) for r in res] == [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]
    assert sum(r.query_count for r in res) == v.queries


def test_run_attack_detects_misreported_queries(tiny_models, tiny_sample, monkeypatch):
    def liar(victim, lms, delta, sample, config, rng):
        victim.translate(sample.x_ids)
        return _result(0, 0, False, 0.0, 0)
    monkeypatch.setitem(ATTACKS, "rr", liar)
    with pytest.raises(RecordError):
        run_attack("rr", [tiny_sample], Victim(tiny_models[0]["transformer"]), tiny_models[1], 50.0)


def test_run_attack_records_failures(tiny_models, tiny_sample, monkeypatch):
    def broken(victim, lms, delta, sample, config, rng):
        victim.translate(sample.x_ids)
        raise AttackError("boom")
    monkeypatch.setitem(ATTACKS, "wtextfooler", broken)
    (res,) = run_attack("wtextfooler", [tiny_sample], Victim(tiny_models[0]["transformer"]), tiny_models[1], 50.0)
    assert not res.success and res.query_count == 1 and "boom" in res.error


def test_unknown_method(tiny_models, tiny_sample):
    with pytest.raises(RecordError):
        run_attack("nope", [tiny_sample], Victim(tiny_models[0]["transformer"]), tiny_models[1], 50.0)


def test_results_roundtrip(tiny_models, tiny_sample, tmp_path):
    res = run_attack("rr", [tiny_sample], Victim(tiny_models[0]["transformer"]), tiny_models[1], 50.0)
    write_results(tmp_path / "r.jsonl", res)
    assert read_results(tmp_path / "r.jsonl") == res


def test_report_serialisation_is_stable():
    row = aggregate("m", [_result(0, 0, True, 10.0, 4)])
    rep = CampaignReport([row], {"m": []}, {"a": 1}, 3)
    assert rep.to_jsonl() == CampaignReport([row], {"m": []}, {"a": 1}, 3).to_jsonl()
    assert json.loads(rep.to_jsonl().splitlines()[1])["succ"] == 100.0


# -- legacy quantification ------------------------------------------------------------

@pytest.fixture(scope="module")
def legacy():
    return read_legacy(FIX / "legacy_pairs.jsonl"), BilingualDictionary.load(FIX / "legacy_dict.tsv")


def test_hand_labels_reproduced(legacy):
    recs, d = legacy
    mismatches = [r for r in recs
                  if classify_invalid(LegacyPair(r["x"], r["x_adv"], r["r"], r["w"], r["setting"]), d) != r["label"]]
    assert mismatches == []


def test_invalidity_table_matches_hand_count(legacy):
    recs, d = legacy
    rows = {(r["attack"], r["setting"]): r for r in quantify_invalid(recs, d)}
    # counted by hand from the fixture: successes and invalid successes per group
    want = {("A", 1): (6, 100 * 5 / 6, 100 * 2 / 5), ("A", 2): (5, 100 * 4 / 5, 100 * 2 / 4),
            ("B", 1): (4, 100.0, 100 * 2 / 4), ("B", 2): (5, 100.0, 100 * 3 / 5)}
    assert {k: (r["n"], r["succ"], r["invalid"]) for k, r in rows.items()} == want
    assert "50.00" in format_invalidity(list(rows.values()))


@pytest.mark.parametrize("bad", [{"x": "a", "x_adv": "b", "r": "c", "w": "d"},
                                 {"x": "a", "x_adv": "b", "r": "c", "w": "d", "setting": 3}])
def test_missing_setting_rejected(bad, legacy):
    with pytest.raises(RecordError):
        quantify_invalid([bad], legacy[1])


@pytest.mark.parametrize("setting, r", [(1, "ka pim"), (2, "pim")])
def test_membership_rule(setting, r):
    with pytest.raises(ValueError):
        LegacyPair("bo", "bo", r, "ka", setting)


def test_no_successes_gives_no_invalid(legacy):
    recs, d = legacy
    only = [dict(recs[5])]
    assert quantify_invalid(only, d)[0]["invalid"] is None

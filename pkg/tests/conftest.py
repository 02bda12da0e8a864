import pytest

from nmtadv.lm import CausalLm, LmConfig
from nmtadv.nmt import NmtConfig, NmtModel
from nmtadv.toyspeak import ToyspeakSpec, generate_toyspeak
from nmtadv.validity import BilingualDictionary, make_sample
from nmtadv.victim import Victim
from nmtadv.vocab import Vocabulary

TINY_NMT = dict(emb_dim=16, hidden=16, heads=2, ff_dim=32, layers=1, max_len=12, beam_size=2, dropout=0.0)


@pytest.fixture(scope="session")
def small_toy():
    ts = generate_toyspeak(ToyspeakSpec(n_train=300, n_test=30, n_mono=60, n_para=20))
    sv = Vocabulary.build([s for s, _ in ts.train + ts.test])
    tv = Vocabulary.build([t for _, t in ts.train + ts.test])
    return ts, sv, tv, BilingualDictionary(ts.dictionary)


@pytest.fixture(scope="session")
def tiny_models(small_toy):
    """Untrained but deterministic models: enough for plumbing, gradients and accounting."""
    ts, sv, tv, d = small_toy
    models = {}
    for arch in ("lstm", "transformer"):
        models[arch] = NmtModel(NmtConfig(arch=arch, seed=3, **TINY_NMT), sv, tv)
    lms = [CausalLm(LmConfig(direction=d_, dim=16, heads=2, ff_dim=16, layers=1, seed=7), sv)
           for d_ in ("l2r", "r2l")]
    return models, lms


@pytest.fixture
def victim(tiny_models):
    return Victim(tiny_models[0]["transformer"])


@pytest.fixture(scope="session")
def tiny_sample(small_toy):
    ts, sv, tv, d = small_toy
    src = next(s for s, _ in ts.test if 6 <= len(s.split()) <= 8)
    i = next(i for i, w in enumerate(src.split()) if i > 0 and w in d)
    return make_sample(src, i, d, sv, tv, sent_id=0)


# -- acceptance reporting ----------------------------------------------------------
# Tests marked ``criterion(n, title)`` get one summary line each; details come from
# ``record_property("detail", ...)`` inside the test.

_criteria: dict[int, tuple[str, str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    num, title = mark.args
    if rep.when == "setup" and rep.passed:
        return
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if rep.failed:
        msg = str(rep.longrepr.reprcrash.message) if hasattr(rep.longrepr, "reprcrash") else "error"
        detail = f"{detail} | {msg.splitlines()[0][:160]}" if detail else msg.splitlines()[0][:160]
    status = "PASS" if rep.passed else "SKIP" if rep.skipped else "FAIL"
    _criteria[num] = (status, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_criteria):
        status, title, detail = _criteria[num]
        terminalreporter.write_line(f"criterion {num} {status:4} {title}: {detail}")

import dataclasses

import pytest

from fineosr import experiment, synthdata, trainer

TINY_DATA = synthdata.DataConfig(K_total=8, n_known=4, M=8, D=12, n_per_class=16, n_test_per_class=8, groups=2)
TINY_TRAIN = trainer.TrainConfig(T=4, T_gen=1, T_uvos=1, B=16, H=4, S=20, warmup_epochs=1, restart_epochs=[2, 3],
                                 sgld={"steps": 5, "step_size": 0.4, "noise_on": True}, d=3, D_feat=8,
                                 eta0=3e-3, eta1=3e-3, eta2=3e-3, eta3=3e-3)


@pytest.fixture(scope="session")
def tiny_data():
    return synthdata.make_openset_data(TINY_DATA)


@pytest.fixture
def tiny_cfg():
    return dataclasses.replace(TINY_TRAIN)


@pytest.fixture(scope="session")
def tiny_train_data(tiny_data):
    return experiment.train_data(tiny_data)


# acceptance bookkeeping: one PASS/FAIL line per criterion in the terminal summary

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion the test belongs to")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    entry = _CRITERIA.setdefault(n, {"title": title, "ok": True, "notes": []})
    # an expected failure (xfail) still counts against the criterion
    if call.excinfo is not None and not call.excinfo.errisinstance(pytest.skip.Exception):
        entry["ok"] = False
        entry["notes"].append(item.name if call.when == "call" else f"{item.name} [{call.when}]")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        tail = f"  (failing: {', '.join(e['notes'])})" if e["notes"] else ""
        terminalreporter.write_line(f"{'PASS' if e['ok'] else 'FAIL'}  {n:>2}. {e['title']}{tail}")

import numpy as np
import pytest

from rgmorph.datapipe import synth_galaxy
from rgmorph.dnnae import ArchSpec, TrainConfig, build_dnnae, train
from rgmorph.neural import deterministic
from rgmorph.rng import RngStream

DESK_WIDTHS = (256, 128, 128)
DESK_CODE = 32


def synth_set(n_per_class, tag, seed=11):
    """Class-interleaved synthetic images and labels."""
    X, y = [], []
    for i in range(n_per_class):
        for c in (0, 1):
            X.append(synth_galaxy(c, RngStream(seed, (99, tag, c, i))))
            y.append(c)
    return np.array(X), np.array(y)


@pytest.fixture(scope="session")
def desk_data():
    return {"train": synth_set(200, 0), "val": synth_set(50, 1), "test": synth_set(50, 2)}


@pytest.fixture(scope="session")
def small_data():
    return synth_set(30, 5)


def _train_desk(data, regularizer):
    arch = ArchSpec(encoder_widths=DESK_WIDTHS, code_len=DESK_CODE, regularizer=regularizer)
    model = build_dnnae(arch, seed=0)
    untrained = build_dnnae(arch, seed=0)
    cfg = TrainConfig(epochs=30, batch_size=50, seed=0, loss_mode="mse_plus_ce", determinism=True)
    import time

    with deterministic(True):
        t0 = time.perf_counter()
        _, history = train(model, data["train"], data["val"], cfg)
        elapsed = time.perf_counter() - t0
    return {"model": model, "untrained": untrained, "history": history, "seconds": elapsed}


@pytest.fixture(scope="session")
def desk_bn(desk_data):
    return _train_desk(desk_data, "bn")


@pytest.fixture(scope="session")
def desk_dropout(desk_data):
    return _train_desk(desk_data, "dropout")


# ---------------------------------------------------------------------------
# acceptance report: one PASS/FAIL line per criterion in the terminal summary

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    ok, seen = _CRITERIA.get(number, (True, title))
    if rep.failed or (rep.when == "call" and rep.skipped):
        ok = False
    _CRITERIA[number] = (ok, seen)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        ok, title = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {title}")

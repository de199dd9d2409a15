from __future__ import annotations

import pytest

from prag.corpus import compute_tfidf_stats
from prag.retriever import TrainConfig, train
from prag.synth import generate_synthetic_fixture


@pytest.fixture(scope="session")
def small_fixture():
    return generate_synthetic_fixture(12, 6, 4, 0.1, seed=3, dim=16)


@pytest.fixture(scope="session")
def small_model(small_fixture):
    fx = small_fixture
    return train(fx.corpus, fx.store, TrainConfig(epochs=3, batch_size=16, seed=1)).model


@pytest.fixture(scope="session")
def small_stats(small_fixture):
    return compute_tfidf_stats(small_fixture.corpus)


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")

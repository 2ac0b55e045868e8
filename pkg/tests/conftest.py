import time

import pytest

from mollm import engine
from mollm.corpus import generate_corpus
from mollm.harness import ExperimentSpec, run_experiment
from mollm.model import Dims, init_model

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def default_corpus():
    return generate_corpus()


@pytest.fixture(scope="session")
def theta0(default_corpus):
    return engine.pretrain(init_model(Dims(32, 8, 2), 0), default_corpus, 500, 5.0)


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """One full default experiment written to disk, with its wall time."""
    out = tmp_path_factory.mktemp("default_run")
    start = time.perf_counter()
    rows = run_experiment(ExperimentSpec(), out_dir=out, threads=1)
    return {"rows": {r.method: r for r in rows}, "dir": out, "seconds": time.perf_counter() - start}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

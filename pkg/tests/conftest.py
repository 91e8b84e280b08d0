import numpy as np
import pytest

from kgrl.envs import task_spec
from kgrl.knowledge import scripted_knowledge_set
from kgrl.learner import streams_for


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def pick_spec():
    return task_spec("NeedlePick")


@pytest.fixture
def scripted_set():
    return scripted_knowledge_set(np.random.default_rng(7))


@pytest.fixture
def streams():
    return streams_for(11)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def report(request):
    """Record one acceptance-criterion outcome for the end-of-run summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def add(number, name, ok, detail):
        lines.append((number, name, bool(ok), detail))
        print(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}")

    return add


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, ok, detail in sorted(lines, key=lambda x: x[0]):
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}")

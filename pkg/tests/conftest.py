import time

import pytest

from heatflow.pipeline import smoke_config, train

# filled by the acceptance module, printed at the end of the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def smoke_run():
    """The desk-scale training run, done once per session: (model, seconds)."""
    t0 = time.perf_counter()
    model = train(smoke_config())
    return model, time.perf_counter() - t0


@pytest.fixture(scope="session")
def smoke_model(smoke_run):
    return smoke_run[0]


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d}  {detail}")

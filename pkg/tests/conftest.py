import pytest

from edonet import train
from edonet.config import RunConfig

SMALL_CFG = RunConfig(epochs=3, batch=16)


@pytest.fixture(scope="session")
def records():
    """Five real samples spread over the desk grid."""
    params = train.grid_params(SMALL_CFG)
    return [train.gen_sample((i, params[j], SMALL_CFG.sim, SMALL_CFG.seed)) for i, j in enumerate((0, 6, 12, 18, 24))]


@pytest.fixture(scope="session")
def data(records):
    return train.Prepared(records, train.fit_stats(records, [0, 1, 2]))


def pytest_terminal_summary(terminalreporter):
    from acceptance_pipeline import VERDICTS
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        ok, detail = VERDICTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")

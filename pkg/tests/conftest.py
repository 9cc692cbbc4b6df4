import pytest

from tdml.simulation import Scenario, run_scenario

_RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_RESULTS] = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance line; call before asserting so failures are reported too."""
    results = request.config.stash[_RESULTS]

    def record(number: int, passed: bool, detail: str) -> None:
        results[number] = (bool(passed), detail)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash[_RESULTS]
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        passed, detail = results[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def honest_run():
    """Three-epoch honest run with two pipelines, shared by read-only tests."""
    return run_scenario(Scenario.generate(seed=0, n_pipelines=2, epochs=3))

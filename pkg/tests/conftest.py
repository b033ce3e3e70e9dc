import pytest

from cfquant.eval import ModelCache

_CRITERIA = []


@pytest.fixture(scope="session")
def model_cache():
    """Trained models shared by every test that asks for the same (scenario, n, seed, config)."""
    return ModelCache()


@pytest.fixture
def record_criterion():
    def record(number, title, passed, detail):
        line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
        _CRITERIA.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)

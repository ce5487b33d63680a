import pytest

from helpers import train_gaussian_teacher


@pytest.fixture(scope="session")
def gaussian_teacher():
    """(model, dataset) for a converged two-Gaussian MLP."""
    return train_gaussian_teacher(seed=0)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)

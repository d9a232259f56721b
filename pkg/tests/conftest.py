import pytest

from capc import corpus

# lines reported by the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def listing_main():
    return corpus.listing_main()


@pytest.fixture
def stub():
    return corpus.networking_stub()


@pytest.fixture
def whole_main():
    return corpus.load_source("main.imp")

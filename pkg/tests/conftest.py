import pytest

from holsh.maps import CircleExampleParams, build_circle_example, get_map


@pytest.fixture(scope="session")
def circle():
    return build_circle_example(CircleExampleParams())


@pytest.fixture(scope="session")
def params():
    return CircleExampleParams()


@pytest.fixture(scope="session")
def cat():
    return get_map("cat")


@pytest.fixture(scope="session")
def henon():
    return get_map("henon")


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)

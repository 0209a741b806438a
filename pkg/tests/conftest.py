import pytest
from hypothesis import settings

from reference import nv17, nv91

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture
def nv17_params():
    return nv17()


@pytest.fixture
def nv91_params():
    return nv91()


_LINES = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for the end-of-run acceptance summary, then assert."""
    lines = request.config.stash.setdefault(_LINES, [])

    def record(label: str, ok: bool, detail: str):
        lines.append(f"{'PASS' if ok else 'FAIL'}  {label}: {detail}")
        if not ok:
            pytest.fail(f"{label}: {detail}", pytrace=False)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

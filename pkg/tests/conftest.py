from contextlib import contextmanager

import pytest

_VERDICTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_VERDICTS] = {}


@pytest.fixture
def criterion(request):
    """Context manager recording a PASS/FAIL line for one acceptance criterion."""
    verdicts = request.config.stash[_VERDICTS]

    @contextmanager
    def check(number: int, title: str):
        try:
            yield
        except AssertionError as exc:
            first = str(exc).strip().splitlines()[0] if str(exc).strip() else "assertion failed"
            verdicts[number] = f"criterion {number:>2} FAIL  {title}: {first}"
            raise
        except Exception as exc:
            verdicts[number] = f"criterion {number:>2} FAIL  {title}: {type(exc).__name__}: {exc}"
            raise
        # a criterion split over parametrized tests passes only if every part does
        verdicts.setdefault(number, f"criterion {number:>2} PASS  {title}")

    return check


def pytest_terminal_summary(terminalreporter, config):
    verdicts = config.stash.get(_VERDICTS, {})
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(verdicts):
        terminalreporter.write_line(verdicts[number])

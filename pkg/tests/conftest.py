import time

import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None)
settings.load_profile("default")

_RESULTS = {}


class AcceptanceLog:
    """Collects one verdict per criterion (sub-checks like ``6c`` are merged)."""

    def __init__(self, store):
        self.store = store
        self.costs = {}

    def record(self, key, passed, detail):
        self.store[str(key)] = (bool(passed), detail)
        return bool(passed)

    def timed(self, name, fn):
        t = time.perf_counter()
        value = fn()
        self.costs[name] = time.perf_counter() - t
        return value


@pytest.fixture(scope="session")
def acceptance():
    return AcceptanceLog(_RESULTS)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    groups = {}
    for key, value in _RESULTS.items():
        groups.setdefault(int(key.rstrip("abcdefgh")), []).append((key, value))
    terminalreporter.section("acceptance criteria")
    for number in sorted(groups):
        entries = sorted(groups[number])
        ok = all(passed for _, (passed, _) in entries)
        if len(entries) == 1:
            detail = entries[0][1][1]
        else:
            detail = "; ".join(f"{k} {'ok' if p else 'FAILED'}: {d}" for k, (p, d) in entries)
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'} | {detail}")

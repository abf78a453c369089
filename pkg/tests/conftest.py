import time

import pytest

# criterion number -> (passed, detail); filled by the acceptance tests
ACCEPTANCE: dict = {}


class Criterion:
    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.start = time.perf_counter()
        self.details: list[str] = []

    def note(self, text: str) -> None:
        self.details.append(text)

    @property
    def elapsed(self) -> float:
        return time.perf_counter() - self.start


@pytest.fixture
def criterion(request):
    """Record the outcome of one acceptance criterion for the end-of-run summary."""
    marker = request.node.get_closest_marker("criterion")
    c = Criterion(*marker.args)
    yield c
    rep = getattr(request.node, "rep_call", None)
    passed = rep is not None and rep.passed
    ACCEPTANCE[c.number] = (passed, c.title, f"{c.elapsed:.1f}s", "; ".join(c.details))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, title, elapsed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title} ({elapsed}) {detail}")

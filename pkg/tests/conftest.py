import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from molx.train import cached_base_lm  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.fixture(scope="session")
def base_decoder(request):
    """Decoder weights of the stand-in base language model.

    Training it takes several minutes, so the result is kept in the pytest cache
    under a hash of everything that determines it.
    """
    path = Path(request.config.cache.mkdir("molx-base-lm"))
    start = time.perf_counter()
    decoder = cached_base_lm(path, seed=0)
    elapsed = time.perf_counter() - start
    if elapsed > 30:
        sys.stderr.write(f"\ntrained base language model in {elapsed:.0f}s, cached under {path}\n")
    return decoder


_RESULTS: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _RESULTS.setdefault(number, {"title": title, "ok": True, "ran": False, "detail": []})
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        entry["ran"] = True
        if report.outcome != "passed":
            entry["ok"] = False
    detail = getattr(item, "acceptance_detail", None)
    if report.when == "call" and detail:
        entry["detail"].append(detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        entry = _RESULTS[number]
        status = "PASS" if entry["ok"] and entry["ran"] else ("FAIL" if entry["ran"] else "NOT RUN")
        line = f"criterion {number:2d}: {status}  {entry['title']}"
        if entry["detail"]:
            line += "  [" + "; ".join(entry["detail"]) + "]"
        terminalreporter.write_line(line)

import time

import pytest

from kgplatform.core import KgSnapshot, validate_triple

SMITH_ROWS = [
    ("akg:e1", "name", None, None, "J. Smith", "en", ["src1", "src2"], [0.9, 0.8]),
    ("akg:e1", "educated_at", "r1", "school", "UW", "en", ["src2"], [0.8]),
    ("akg:e1", "educated_at", "r1", "degree", "PhD", "en", ["src2"], [0.8]),
    ("akg:e1", "educated_at", "r1", "year", "2005", "en", ["src2"], [0.8]),
]


def row(subject, predicate, r_id, r_predicate, obj, locale, sources, trust, kind="literal"):
    return {
        "subject": subject,
        "predicate": predicate,
        "r_id": r_id,
        "r_predicate": r_predicate,
        "object": obj,
        "object_kind": kind,
        "locale": locale,
        "sources": sources,
        "trust": trust,
    }


@pytest.fixture
def smith_triples():
    return [validate_triple(row(*r)) for r in SMITH_ROWS]


@pytest.fixture
def smith_kg(smith_triples):
    return KgSnapshot.from_triples(smith_triples)


# -- acceptance reporting -------------------------------------------------------

_CRITERIA: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_call(item):
    start = time.perf_counter()
    yield
    item.user_properties.append(("seconds", time.perf_counter() - start))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when == "teardown" and report.passed:
        return
    number, title = marker.args
    prev = _CRITERIA.get(number, (title, True, 0.0))
    seconds = dict(item.user_properties).get("seconds", 0.0)
    _CRITERIA[number] = (title, prev[1] and report.passed, max(prev[2], seconds))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, passed, seconds = _CRITERIA[number]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {number:2d}. {title} ({seconds:.1f} s)")

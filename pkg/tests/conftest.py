import re

_ACCEPTANCE_PATTERN = re.compile(r"test_acceptance\.py::test_criterion_(\d+)")
_seen: set = set()


def pytest_runtest_logreport(report):
    """Print one PASS/FAIL line per acceptance criterion as it completes."""
    match = _ACCEPTANCE_PATTERN.search(report.nodeid)
    if not match or report.when != "call":
        return
    number = int(match.group(1))
    if number in _seen:
        return
    _seen.add(number)
    verdict = "PASS" if report.passed else "FAIL"
    name = report.nodeid.split("::")[-1]
    label = name.replace(f"test_criterion_{match.group(1)}_", "").replace("_", " ")
    print(f"\n[acceptance] criterion {number:2d} ({label}): {verdict}", flush=True)

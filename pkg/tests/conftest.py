"""Prints one PASS/FAIL line per acceptance criterion after the run.

The lines come from the terminal-summary hook so they are visible even
though pytest captures test stdout.
"""

_ACCEPTANCE_RESULTS: dict[str, tuple[str, str]] = {}


def pytest_runtest_makereport(item, call):
    if call.when != "call" or not item.nodeid.startswith("tests/test_acceptance.py"):
        return
    label = getattr(item.function, "_criterion", None)
    if label is None:
        return
    order = getattr(item.function, "_criterion_order", 99)
    outcome = "FAIL" if call.excinfo is not None else "PASS"
    key = f"{order:02d}"
    # parametrized cases share a criterion line; any failure flips it
    if key not in _ACCEPTANCE_RESULTS or outcome == "FAIL":
        _ACCEPTANCE_RESULTS[key] = (label, outcome)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for key in sorted(_ACCEPTANCE_RESULTS):
        label, outcome = _ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"{outcome}: {label}")

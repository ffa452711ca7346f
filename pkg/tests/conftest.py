import contextlib

_RESULTS = []


@contextlib.contextmanager
def criterion(number: int, title: str):
    """Record PASS/FAIL for one acceptance criterion. Set ``info["detail"]``
    inside the block for a one-line summary of the measured values."""
    info = {"detail": ""}
    try:
        yield info
    except BaseException as exc:
        detail = info["detail"] or f"{type(exc).__name__}: {str(exc)[:200]}"
        _report(number, title, False, detail)
        raise
    _report(number, title, True, info["detail"])


def _report(number, title, passed, detail):
    line = f"{'PASS' if passed else 'FAIL'} criterion {number:2d}: {title} | {detail}"
    _RESULTS.append((number, line))
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_RESULTS):
        terminalreporter.write_line(line)

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def box(shape, x0, y0, x1, y1):
    """Boolean mask with the inclusive rectangle [x0..x1] x [y0..y1] set."""
    m = np.zeros(shape, dtype=bool)
    m[y0:y1 + 1, x0:x1 + 1] = True
    return m


def disk_mask(shape, cx, cy, r):
    ys, xs = np.mgrid[0:shape[0], 0:shape[1]]
    return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r


# -- acceptance report ----------------------------------------------------

_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record a labelled acceptance outcome; printed at the end of the session."""

    def record(key, ok, detail):
        _CRITERIA[key] = (bool(ok), detail)
        print(f"criterion {key}: {'PASS' if ok else 'FAIL'} - {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_CRITERIA, key=lambda k: (int(k.rstrip("abcdefghi") or 0), k)):
        ok, detail = _CRITERIA[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {key}: {detail}")

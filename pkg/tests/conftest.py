from collections import defaultdict

import pytest

ACCEPTANCE = defaultdict(list)


@pytest.fixture
def criterion():
    """``record(cid, part, ok, detail)``; the calling test still asserts on its own."""

    def record(cid, part, ok, detail=""):
        ACCEPTANCE[cid].append((part, bool(ok), detail))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[cid]
        ok = all(p[1] for p in parts)
        shown = parts if ok else [p for p in parts if not p[1]]
        detail = "; ".join(f"{name}: {d}" if d else name for name, _, d in shown)
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {cid:>2}  {detail}")

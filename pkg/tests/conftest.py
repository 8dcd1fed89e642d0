import pytest

# (number, title) -> (passed, detail), filled by the acceptance suite
CRITERIA = {}


@pytest.fixture(scope="session")
def criterion():
    def record(number, title, passed, detail=""):
        CRITERIA[number] = (title, bool(passed), detail)
        assert passed, f"criterion {number} ({title}) failed: {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(CRITERIA):
        title, ok, detail = CRITERIA[n]
        tr.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {title}: {detail}")
    missing = [n for n in range(1, 17) if n not in CRITERIA]
    if missing and len(CRITERIA) > 0:
        tr.write_line(f"no result (errored or deselected): {missing}")

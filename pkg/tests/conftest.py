import pytest

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_RESULTS[criterion] = (bool(passed), detail)
    print(f"criterion {criterion}: {'PASS' if passed else 'FAIL'} | {detail}")


@pytest.fixture
def acceptance_record():
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_RESULTS):
        passed, detail = ACCEPTANCE_RESULTS[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if passed else 'FAIL'} | {detail}")

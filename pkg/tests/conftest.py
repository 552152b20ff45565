import numpy as np
import pytest

# Region-word relevance values as printed for the caption below (3 regions x 9 words).
SAMPLE_WORDS = ["a", "woman", "sitting", "in", "front", "of", "a", "laptop", "computer"]
SAMPLE_MATRIX = np.array([
    [0.152, 0.579, 0.056, 0.009, 0.006, 0.028, 0.152, 0.001, 0.012],
    [0.005, 0.004, 0.953, 0.001, 0.020, 0.001, 0.005, 0.002, 0.003],
    [0.111] * 9,
])


@pytest.fixture
def sample_matrix():
    return SAMPLE_MATRIX.copy()


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")

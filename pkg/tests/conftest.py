import numpy as np
import pytest

from deepmmsa.data import SynthSpec, generate_synthetic_cohort, load_cohort

ACCEPTANCE_LINES: list[str] = []


def record_criterion(name: str, ok: bool, detail: str = "") -> None:
    """Log one acceptance line; the terminal summary prints them all."""
    line = f"[{'PASS' if ok else 'FAIL'}] {name}" + (f": {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_cohort(tmp_path_factory):
    """40 patients with 4x8x8 volumes; fast enough for end-to-end tests."""
    out = tmp_path_factory.mktemp("tiny")
    manifest = generate_synthetic_cohort(SynthSpec(n=40, volume_shape=(4, 8, 8), seed=11), out)
    return load_cohort(manifest)

import numpy as np
import pytest

from egoscene import synth

ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, passed: bool, detail: str = "") -> None:
    status = "PASS" if passed else "FAIL"
    ACCEPTANCE_LINES.append(f"[{status}] criterion {number:>2}: {title}" + (f" ({detail})" if detail else ""))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_spec():
    return synth.SynthSpec(num_participants=4, shifts_per_participant=2, steps_per_shift=6, seed=11)


@pytest.fixture(scope="session")
def small_corpus_dir(tmp_path_factory, small_spec):
    out = tmp_path_factory.mktemp("synth") / "data"
    corpus = synth.generate_corpus(small_spec, out)
    return out, corpus

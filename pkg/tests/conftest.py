import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset():
    """6 classes x 6 samples at 32x64: enough for quick training smoke tests."""
    from texiris.data import SynthSpec, synthetic_dataset

    return synthetic_dataset(SynthSpec(num_classes=6, samples_per_class=6, width=64, seed=3))


_VERDICTS = pytest.StashKey[list]()
_EXTRA = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_VERDICTS] = []
    config.stash[_EXTRA] = []


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for the acceptance summary, then assert."""
    def record(number, title, passed, detail="", extra=None):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} | {detail}"
        request.config.stash[_VERDICTS].append(line)
        if extra:
            request.config.stash[_EXTRA].append(extra)
        assert passed, line
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
    for block in config.stash.get(_EXTRA, []):
        terminalreporter.write_line(block)

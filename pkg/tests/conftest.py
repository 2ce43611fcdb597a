import numpy as np
import pytest

from subcam.data import DatasetSpec, generate_dataset
from subcam.model import Architecture


TINY_ARCH = dict(channels=(4, 6), pool=(True, True), feature_dim=16)


def tiny_arch(num_classes=3, k=2, **kw):
    return Architecture(num_classes=num_classes, num_subclusters=k, **{**TINY_ARCH, **kw})


@pytest.fixture(scope="session")
def tiny_spec():
    return DatasetSpec(n_train=24, n_eval=8, image_size=32, seed=3)


@pytest.fixture(scope="session")
def tiny_samples(tiny_spec):
    return generate_dataset(tiny_spec, "train")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record the outcome line of an acceptance criterion."""

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
        _CRITERIA[number] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])

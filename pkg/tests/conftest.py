import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fedleak.ingest import Dataset, synthetic_dataset  # noqa: E402
from fedleak.model import ArchSpec, init_state  # noqa: E402


@pytest.fixture
def tiny_arch():
    return ArchSpec(image_size=8, widths=(3, 4), pool="avg", activation="gelu")


@pytest.fixture
def tiny_state(tiny_arch):
    return init_state(tiny_arch, seed=3)


@pytest.fixture
def tiny_data():
    return synthetic_dataset(24, image_size=8, seed=5)


def random_dataset(n, size=8, channels=1, seed=0, prefix="r"):
    rng = np.random.default_rng(seed)
    return Dataset(
        rng.random((n, size, size, channels)),
        np.arange(n) % 2,
        ("a", "b"),
        tuple(f"{prefix}{i}" for i in range(n)),
    )


def pytest_terminal_summary(terminalreporter):
    from verdicts import VERDICTS

    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

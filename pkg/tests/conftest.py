import sys

import numpy as np
import pytest
import torch

from decaug import mnist

torch.set_num_threads(1)


@pytest.fixture
def fake_digits():
    """Small synthetic 'MNIST': every pixel nonzero so color channels are unambiguous."""
    rng = np.random.default_rng(123)
    n = 600
    images = rng.integers(1, 256, size=(n, 28, 28), dtype=np.uint8)
    digits = rng.integers(0, 10, size=n)
    return images, digits


requires_mnist = pytest.mark.skipif(not mnist.available(), reason="MNIST IDX files not present (run `decaug gen-data`)")


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])

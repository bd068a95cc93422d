import os
from pathlib import Path

import numpy as np
import pytest

from mistlab.data import default_mnist_dir
from mistlab.models import LinearSoftmax, train, TrainConfig
from mistlab.toy2d import ToySpec, generate, train_pair


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_data():
    return generate(ToySpec(seed=0))


@pytest.fixture(scope="session")
def toy_pair(toy_data):
    return train_pair(toy_data, (1, 2))


@pytest.fixture(scope="session")
def tiny_images():
    """Small 1x8x8 image classification problem with three classes."""
    r = np.random.default_rng(7)
    protos = r.uniform(0, 1, size=(3, 1, 8, 8))
    y = np.repeat(np.arange(3), 20)
    X = np.clip(protos[y] + 0.15 * r.standard_normal((60, 1, 8, 8)), 0, 1)
    return X, y


@pytest.fixture(scope="session")
def tiny_models(tiny_images):
    X, y = tiny_images
    cfg = TrainConfig(epochs=15, batch_size=16, learning_rate=0.05, momentum=0.9, seed=3)
    return {
        "linear-softmax": train(X, y, "linear-softmax", cfg, X_test=X, y_test=y),
        "mlp": train(X, y, "mlp", cfg, X_test=X, y_test=y, hidden=16),
        "small-conv": train(X, y, "small-conv", cfg, X_test=X, y_test=y, channels=(2, 3)),
    }


@pytest.fixture(scope="session")
def mnist_dir():
    d = default_mnist_dir()
    if d is None:
        pytest.skip("MNIST files not available (set MISTLAB_MNIST_DIR)")
    return d


@pytest.fixture(scope="session")
def mnist_setup(mnist_dir, request):
    """Trained zoo plus the 500-image evaluation batch; weights cached across sessions."""
    from mistlab.benchmark import build_setup, zoo_fingerprint

    cache = request.config.cache.mkdir(f"mistlab-zoo-{zoo_fingerprint()}")
    return build_setup(mnist_dir, cache_dir=cache)


_ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one verdict line per acceptance criterion for the terminal summary."""
    return _ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda l: (int(l.split()[1].split("(")[0].rstrip(":")), l)):
            terminalreporter.write_line(line)

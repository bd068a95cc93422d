"""The desk-scale MNIST transfer setup shared by the CLI and the acceptance suite."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .attacks import AttackConfig
from .data import DatasetHandle, load_mnist
from .evaluation import common_correct
from .models import TrainConfig, load_weights, save_weights, train
from .transforms import MIST, Admix, Identity

# name -> (architecture, training config); mlp-b is the second-seed mlp target
ZOO: Dict[str, tuple] = {
    "mlp": ("mlp", TrainConfig(epochs=10, batch_size=32, learning_rate=0.02, momentum=0.9, seed=1)),
    "mlp-b": ("mlp", TrainConfig(epochs=10, batch_size=32, learning_rate=0.02, momentum=0.9, seed=2)),
    "linear-softmax": ("linear-softmax", TrainConfig(epochs=10, batch_size=32, learning_rate=0.02, momentum=0.9, seed=1)),
    "small-conv": ("small-conv", TrainConfig(epochs=3, batch_size=32, learning_rate=0.02, momentum=0.9, seed=1)),
}
SURROGATE = "mlp"
TARGETS = ("linear-softmax", "mlp-b", "small-conv")
TRAIN_SIZE = 10_000
EVAL_POOL = 2_000
N_EVAL = 500
EPSILON = 0.3
N_ITER = 10
MNIST_SHIFT = 2  # pixel range of the MIST random shift on 28x28 digits

BASE_ATTACK = AttackConfig(epsilon=EPSILON, n_iter=N_ITER, decay=1.0, clip=(0.0, 1.0))


def mnist_mist(**overrides) -> MIST:
    kw = dict(n=30, lambda_min=0.2, max_shift=MNIST_SHIFT)
    kw.update(overrides)
    return MIST(**kw)


def headline_attacks() -> Dict[str, AttackConfig]:
    from dataclasses import replace

    return {
        "mi-fgsm": replace(BASE_ATTACK, estimator=(Identity(),)),
        "admix": replace(BASE_ATTACK, estimator=(Admix(),)),
        "mist": replace(BASE_ATTACK, estimator=(mnist_mist(),)),
    }


def train_zoo(train_set: DatasetHandle, test_set: DatasetHandle, cache_dir=None, names=None) -> Dict[str, object]:
    """Train (or load from ``cache_dir``) every model of the zoo."""
    models = {}
    for name in names or ZOO:
        arch, config = ZOO[name]
        path = Path(cache_dir) / f"{name}.mlab" if cache_dir is not None else None
        if path is not None and path.exists():
            models[name] = load_weights(path, arch)
            continue
        model = train(
            train_set.images, train_set.labels, arch, config,
            X_test=test_set.images, y_test=test_set.labels, n_classes=10,
        )
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            save_weights(model, path)
        models[name] = model
    return models


@dataclass
class MnistSetup:
    models: Dict[str, object]
    X: np.ndarray  # evaluation images every model classifies correctly
    y: np.ndarray
    provenance: Dict[str, str] = field(default_factory=dict)

    @property
    def surrogate(self):
        return self.models[SURROGATE]

    @property
    def targets(self) -> Dict[str, object]:
        return {t: self.models[t] for t in TARGETS}


def zoo_fingerprint(train_size: int = TRAIN_SIZE) -> str:
    """Short digest of everything that determines the trained weights (cache key)."""
    payload = repr(sorted((k, v[0], v[1]) for k, v in ZOO.items())) + f"|{train_size}"
    return hashlib.sha256(payload.encode()).hexdigest()[:12]


def build_setup(data_dir, cache_dir=None, n_eval: int = N_EVAL, train_size: int = TRAIN_SIZE) -> MnistSetup:
    train_set = load_mnist(data_dir, "train", limit=train_size)
    test_set = load_mnist(data_dir, "test")
    models = train_zoo(train_set, test_set, cache_dir)
    X, y = test_set.images[:EVAL_POOL], test_set.labels[:EVAL_POOL]
    keep = common_correct(list(models.values()), X, y)
    X, y = X[keep][:n_eval], y[keep][:n_eval]
    provenance = dict(train_set.provenance)
    provenance.update(test_set.provenance)
    return MnistSetup(models, X, y, provenance)


def zoo_accuracies(models, data_dir) -> Dict[str, float]:
    test_set = load_mnist(data_dir, "test")
    return {k: float(m.score(test_set.images, test_set.labels)) for k, m in models.items()}

"""Small differentiable classifiers used as surrogates and targets.

Three architecture families are provided, each as a scikit-learn classifier so
they can be cross-validated, cloned and scored like any other estimator:

* :class:`LinearSoftmax`: affine map followed by softmax.
* :class:`MLP`: two ReLU hidden layers (width 128 by default).
* :class:`SmallConvNet`: two 3x3 conv + ReLU + 2x2 max-pool blocks and an affine head.

The attack code only needs :meth:`TapeClassifier.loss`, which returns per-sample
cross-entropy as a :class:`~mistlab.tensor.Tensor` so gradients with respect to
the input can be taken.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import ops
from ._validation import check_batch, check_labels, check_xy
from .exceptions import (
    ArchitectureMismatchError,
    ShapeError,
    TrainingDivergedError,
    TruncatedWeightsError,
    WeightFormatError,
)
from .tensor import Tensor, backward, cross_entropy, matmul, mul, relu, softmax, tsum

ARCHITECTURES = ("linear-softmax", "mlp", "small-conv")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError(f"invalid training configuration {self}")
        if self.momentum < 0 or self.seed < 0:
            raise ValueError(f"invalid training configuration {self}")


def _uniform(rng, fan_in, shape, gain):
    bound = gain / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class TapeClassifier(ClassifierMixin, BaseEstimator):
    """Base class: subclasses define ``architecture``, ``_init_params`` and ``_logits``."""

    architecture: str = ""

    def __init__(
        self,
        n_classes=None,
        epochs=10,
        batch_size=64,
        learning_rate=0.05,
        momentum=0.9,
        random_state=0,
    ):
        self.n_classes = n_classes
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.random_state = random_state

    # -- subclass hooks -----------------------------------------------------
    def _init_params(self, rng, input_shape, n_classes) -> Dict[str, np.ndarray]:
        raise NotImplementedError

    def _logits(self, params: Dict[str, Tensor], x: Tensor) -> Tensor:
        raise NotImplementedError

    # -- training -----------------------------------------------------------
    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.learning_rate, self.momentum, self.random_state)

    def fit(self, X, y):
        config = self.train_config
        X, y = check_xy(X, y)
        n_classes = self.n_classes if self.n_classes is not None else int(y.max()) + 1
        check_labels(y, X.shape[0], n_classes)
        rng = np.random.default_rng(config.seed)
        self.input_shape_ = tuple(X.shape[1:])
        self.n_classes_ = int(n_classes)
        self.classes_ = np.arange(self.n_classes_)
        params = self._init_params(rng, self.input_shape_, self.n_classes_)
        velocity = {k: np.zeros_like(v) for k, v in params.items()}
        self.loss_history_ = []
        n = X.shape[0]
        for epoch in range(config.epochs):
            order = rng.permutation(n)
            total = 0.0
            for start in range(0, n, config.batch_size):
                idx = order[start : start + config.batch_size]
                leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
                loss = mul(tsum(cross_entropy(self._logits(leaves, Tensor(X[idx])), y[idx])), 1.0 / idx.size)
                grads = backward(loss)
                for k, leaf in leaves.items():
                    g = grads.get(leaf)
                    if g is None:
                        continue
                    velocity[k] = config.momentum * velocity[k] + g
                    params[k] = params[k] - config.learning_rate * velocity[k]
                total += loss.item() * idx.size
            mean_loss = total / n
            if not np.isfinite(mean_loss) or not all(np.all(np.isfinite(v)) for v in params.values()):
                raise TrainingDivergedError(epoch)
            self.loss_history_.append(mean_loss)
        self._set_params(params)
        return self

    def _set_params(self, params: Dict[str, np.ndarray]):
        frozen = {}
        for k, v in params.items():
            arr = np.array(v, dtype=np.float64)
            arr.flags.writeable = False
            frozen[k] = arr
        self.params_ = frozen

    # -- inference ----------------------------------------------------------
    def logits(self, x) -> Tensor:
        """Logits as a tape node; parameters are constants so only ``x`` is differentiable."""
        check_is_fitted(self, "params_")
        x = x if isinstance(x, Tensor) else Tensor(check_batch(x))
        if tuple(x.shape[1:]) != self.input_shape_:
            raise ShapeError(f"batch shape {x.shape[1:]} does not match input shape {self.input_shape_}")
        return self._logits({k: Tensor(v) for k, v in self.params_.items()}, x)

    def loss(self, x, y) -> Tensor:
        """Per-sample cross-entropy."""
        return cross_entropy(self.logits(x), y)

    def multi_loss(self, x, label_sets) -> List[Tensor]:
        """Per-sample cross-entropy under several labelings, sharing one forward pass."""
        logits = self.logits(x)
        return [cross_entropy(logits, labels) for labels in label_sets]

    def decision_function(self, X, chunk: int = 2048) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = check_batch(X, self.input_shape_)
        out = [self.logits(Tensor(X[s : s + chunk])).data for s in range(0, X.shape[0], chunk)]
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.n_classes_))

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self.decision_function(X))

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.decision_function(X), axis=1)

    @property
    def n_params(self) -> int:
        check_is_fitted(self, "params_")
        return int(sum(v.size for v in self.params_.values()))


class LinearSoftmax(TapeClassifier):
    architecture = "linear-softmax"

    def _init_params(self, rng, input_shape, n_classes):
        d = int(np.prod(input_shape))
        return {"W": _uniform(rng, d, (d, n_classes), 1.0), "b": np.zeros(n_classes)}

    def _logits(self, p, x):
        return matmul(x.reshape(x.shape[0], -1), p["W"]) + p["b"]

    @classmethod
    def from_weights(cls, W, b, input_shape=None) -> "LinearSoftmax":
        """Build a fitted model directly from a weight matrix (d, K) and bias (K,)."""
        W = np.asarray(W, dtype=np.float64)
        model = cls(n_classes=W.shape[1])
        model.input_shape_ = tuple(input_shape) if input_shape is not None else (W.shape[0],)
        model.n_classes_ = W.shape[1]
        model.classes_ = np.arange(W.shape[1])
        model._set_params({"W": W, "b": np.asarray(b, dtype=np.float64)})
        return model


class MLP(TapeClassifier):
    architecture = "mlp"

    def __init__(
        self,
        hidden=128,
        n_classes=None,
        epochs=10,
        batch_size=64,
        learning_rate=0.05,
        momentum=0.9,
        random_state=0,
    ):
        super().__init__(n_classes, epochs, batch_size, learning_rate, momentum, random_state)
        self.hidden = hidden

    def _init_params(self, rng, input_shape, n_classes):
        d, h = int(np.prod(input_shape)), self.hidden
        return {
            "W1": _uniform(rng, d, (d, h), np.sqrt(6.0)),
            "b1": np.zeros(h),
            "W2": _uniform(rng, h, (h, h), np.sqrt(6.0)),
            "b2": np.zeros(h),
            "W3": _uniform(rng, h, (h, n_classes), 1.0),
            "b3": np.zeros(n_classes),
        }

    def _logits(self, p, x):
        h = relu(matmul(x.reshape(x.shape[0], -1), p["W1"]) + p["b1"])
        h = relu(matmul(h, p["W2"]) + p["b2"])
        return matmul(h, p["W3"]) + p["b3"]


class SmallConvNet(TapeClassifier):
    architecture = "small-conv"

    def __init__(
        self,
        channels=(8, 16),
        n_classes=None,
        epochs=5,
        batch_size=64,
        learning_rate=0.05,
        momentum=0.9,
        random_state=0,
    ):
        super().__init__(n_classes, epochs, batch_size, learning_rate, momentum, random_state)
        self.channels = channels

    def _init_params(self, rng, input_shape, n_classes):
        if len(input_shape) != 3 or input_shape[1] % 4 or input_shape[2] % 4:
            raise ShapeError(f"small-conv needs (C, H, W) with H, W divisible by 4, got {input_shape}")
        c, h, w = input_shape
        c1, c2 = self.channels
        flat = c2 * (h // 4) * (w // 4)
        return {
            "K1": _uniform(rng, c * 9, (c1, c, 3, 3), np.sqrt(6.0)),
            "c1": np.zeros(c1),
            "K2": _uniform(rng, c1 * 9, (c2, c1, 3, 3), np.sqrt(6.0)),
            "c2": np.zeros(c2),
            "W": _uniform(rng, flat, (flat, n_classes), 1.0),
            "b": np.zeros(n_classes),
        }

    def _logits(self, p, x):
        h = ops.max_pool2x2(relu(ops.conv2d(x, p["K1"], p["c1"], padding=1)))
        h = ops.max_pool2x2(relu(ops.conv2d(h, p["K2"], p["c2"], padding=1)))
        return matmul(h.reshape(h.shape[0], -1), p["W"]) + p["b"]


_REGISTRY = {cls.architecture: cls for cls in (LinearSoftmax, MLP, SmallConvNet)}


def make_classifier(architecture: str, config: Optional[TrainConfig] = None, **kwargs) -> TapeClassifier:
    if architecture not in _REGISTRY:
        raise ValueError(f"unknown architecture {architecture!r}; choose from {ARCHITECTURES}")
    config = config or TrainConfig()
    return _REGISTRY[architecture](
        epochs=config.epochs,
        batch_size=config.batch_size,
        learning_rate=config.learning_rate,
        momentum=config.momentum,
        random_state=config.seed,
        **kwargs,
    )


def train(X, y, architecture: str, config: Optional[TrainConfig] = None, X_test=None, y_test=None, **kwargs):
    """Fit a classifier and record its held-out accuracy in ``heldout_accuracy_``.

    Without an explicit test set, a seeded 20% split of ``X`` is held out.
    """
    config = config or TrainConfig()
    X, y = check_xy(X, y)
    if X_test is None:
        rng = np.random.default_rng(config.seed + 7919)
        order = rng.permutation(X.shape[0])
        cut = max(1, int(round(0.8 * X.shape[0]))) if X.shape[0] > 1 else X.shape[0]
        train_idx, test_idx = order[:cut], order[cut:]
        if test_idx.size == 0:
            test_idx = train_idx
        X, X_test, y, y_test = X[train_idx], X[test_idx], y[train_idx], y[test_idx]
    model = make_classifier(architecture, config, **kwargs)
    if "n_classes" not in kwargs and y_test is not None and len(y_test):
        model.set_params(n_classes=int(max(y.max(), np.max(y_test))) + 1)
    model.fit(X, y)
    model.heldout_accuracy_ = float(model.score(X_test, y_test))
    return model


class Ensemble:
    """Equal-weight ensemble: loss is the arithmetic mean of member losses."""

    def __init__(self, members: Sequence):
        if len(members) < 1:
            raise ValueError("an ensemble needs at least one member")
        shapes = {tuple(m.input_shape_) for m in members}
        if len(shapes) != 1:
            raise ShapeError(f"members disagree on input shape: {shapes}")
        self.members = list(members)
        self.input_shape_ = shapes.pop()
        self.n_classes_ = self.members[0].n_classes_

    def loss(self, x, y) -> Tensor:
        return self.multi_loss(x, [y])[0]

    def multi_loss(self, x, label_sets) -> List[Tensor]:
        totals = [None] * len(label_sets)
        for member in self.members:
            for k, term in enumerate(member.multi_loss(x, label_sets)):
                totals[k] = term if totals[k] is None else totals[k] + term
        return [mul(t, 1.0 / len(self.members)) for t in totals]

    def predict_proba(self, X) -> np.ndarray:
        return np.mean([m.predict_proba(X) for m in self.members], axis=0)

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)


def loss_and_input_grad(model, x, y) -> Tuple[np.ndarray, np.ndarray]:
    """Per-sample loss and per-sample input gradient for a classifier or ensemble."""
    x = check_batch(x, model.input_shape_)
    y = check_labels(y, x.shape[0], model.n_classes_)
    leaf = Tensor(x, requires_grad=True)
    per_sample = model.loss(leaf, y)
    grads = backward(tsum(per_sample))
    return np.array(per_sample.data), grads.get(leaf, np.zeros_like(x))


# ---------------------------------------------------------------------------
# weight files: b"MLAB" | u32 version | u32 len + tag | records until EOF
# record: u32 len + name | u32 rank | u64 extents[rank] | f64 values

MAGIC = b"MLAB"
VERSION = 1


def save_weights(model: TapeClassifier, path) -> None:
    check_is_fitted(model, "params_")
    tag = model.architecture.encode("utf-8")
    records = dict(model.params_)
    records["meta.input_shape"] = np.asarray(model.input_shape_, dtype=np.float64)
    records["meta.n_classes"] = np.asarray(float(model.n_classes_))
    chunks = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(tag)), tag]
    for name in sorted(records):
        value = np.asarray(records[name], dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}Q", *value.shape))
        chunks.append(value.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedWeightsError(
                f"truncated weight file: needed {n} bytes for {what} at offset {self.pos}, "
                f"only {len(self.data) - self.pos} left"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def load_weights(path, architecture: Optional[str] = None) -> TapeClassifier:
    """Read a weight file. ``architecture``, if given, must match the stored tag."""
    reader = _Reader(Path(path).read_bytes())
    if reader.take(4, "magic") != MAGIC:
        raise WeightFormatError(f"{path}: bad magic bytes, not a weight file")
    version = reader.u32("version")
    if version != VERSION:
        raise WeightFormatError(f"{path}: unsupported weight file version {version}")
    tag = reader.take(reader.u32("tag length"), "tag").decode("utf-8")
    if tag not in _REGISTRY:
        raise ArchitectureMismatchError(f"{path}: unknown architecture tag {tag!r}")
    if architecture is not None and tag != architecture:
        raise ArchitectureMismatchError(f"{path}: file holds {tag!r}, expected {architecture!r}")
    records = {}
    while reader.pos < len(reader.data):
        name = reader.take(reader.u32("name length"), "name").decode("utf-8")
        rank = reader.u32("rank")
        shape = struct.unpack(f"<{rank}Q", reader.take(8 * rank, "extents"))
        count = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(reader.take(8 * count, f"values of {name}"), dtype="<f8")
        records[name] = values.reshape(shape).astype(np.float64)
    try:
        input_shape = tuple(int(v) for v in records.pop("meta.input_shape"))
        n_classes = int(records.pop("meta.n_classes"))
    except KeyError as exc:
        raise WeightFormatError(f"{path}: missing metadata record {exc}") from None

    cls = _REGISTRY[tag]
    kwargs = {"n_classes": n_classes}
    if cls is MLP:
        kwargs["hidden"] = records["W1"].shape[1]
    elif cls is SmallConvNet:
        kwargs["channels"] = (records["K1"].shape[0], records["K2"].shape[0])
    model = cls(**kwargs)
    model.input_shape_ = input_shape
    model.n_classes_ = n_classes
    model.classes_ = np.arange(n_classes)
    model._set_params(records)
    return model

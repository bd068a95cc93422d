"""Three-class 2-D toy problem: data, paired linear models, attack paths, geometry."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .attacks import AttackConfig, run_attack
from .models import LinearSoftmax, TrainConfig, train
from .transforms import MIST, Admix, Identity

CLASS_NAMES = ("I", "II", "III")
DEFAULT_MEANS = ((2.0, 0.0), (-1.0, 2.0), (-1.0, -2.0))
TOY_TRAIN = TrainConfig(epochs=40, batch_size=32, learning_rate=0.05, momentum=0.9, seed=0)


@dataclass(frozen=True)
class ToySpec:
    means: Tuple[Tuple[float, float], ...] = DEFAULT_MEANS
    scale: float = 1.0
    per_class: int = 200
    seed: int = 0
    min_margin: float = 0.1


@dataclass
class ToyDataset:
    points: np.ndarray
    labels: np.ndarray
    spec: ToySpec

    def of_class(self, label: int) -> np.ndarray:
        return self.points[self.labels == label]


def _nearest_mean_margin(points, labels, means):
    # margin to the nearest-mean (Voronoi) boundary; negative when misassigned
    d = ((points[:, None, :] - means[None, :, :]) ** 2).sum(-1)
    own = d[np.arange(len(points)), labels]
    d_other = d.copy()
    d_other[np.arange(len(points)), labels] = np.inf
    k = d_other.argmin(axis=1)
    gap = means[k] - means[labels]
    return (d_other[np.arange(len(points)), k] - own) / (2.0 * np.linalg.norm(gap, axis=1))


def generate(spec: ToySpec = ToySpec(), max_retries: int = 100) -> ToyDataset:
    """Isotropic Gaussian blobs, redrawn point by point until every point sits at least
    ``min_margin`` inside its own nearest-mean cell, so the classes are linearly separable."""
    means = np.asarray(spec.means, dtype=np.float64)
    if means.ndim != 2 or means.shape[1] != 2 or means.shape[0] < 2:
        raise ValueError("means must be a list of 2-D points")
    for i in range(len(means)):
        for j in range(i):
            if np.allclose(means[i], means[j]):
                raise ValueError(f"class means {i} and {j} coincide")
    rng = np.random.default_rng(spec.seed)
    labels = np.repeat(np.arange(len(means)), spec.per_class)
    points = means[labels] + spec.scale * rng.standard_normal((labels.size, 2))
    for _ in range(max_retries):
        bad = _nearest_mean_margin(points, labels, means) < spec.min_margin
        if not bad.any():
            return ToyDataset(points, labels, spec)
        points[bad] = means[labels[bad]] + spec.scale * rng.standard_normal((int(bad.sum()), 2))
    raise RuntimeError(f"could not reach margin {spec.min_margin} in {max_retries} retries")


def train_pair(
    dataset: ToyDataset,
    seeds: Tuple[int, int] = (1, 2),
    config: TrainConfig = TOY_TRAIN,
    min_accuracy: float = 0.95,
) -> Tuple[LinearSoftmax, LinearSoftmax]:
    """Two linear-softmax models on different seeded 80/20 splits of the data."""
    models = []
    for seed in seeds:
        cfg = TrainConfig(config.epochs, config.batch_size, config.learning_rate, config.momentum, seed)
        model = train(dataset.points, dataset.labels, "linear-softmax", cfg, n_classes=3)
        if model.heldout_accuracy_ < min_accuracy:
            raise RuntimeError(f"model with seed {seed} reached only {model.heldout_accuracy_:.3f} accuracy")
        models.append(model)
    return models[0], models[1]


def _class_weights(model) -> Tuple[np.ndarray, np.ndarray]:
    return model.params_["W"].T, model.params_["b"]  # (classes, 2), (classes,)


def boundary_intersection(model) -> np.ndarray:
    """Point where the II/III and I/II boundaries (hence all three) meet."""
    w, b = _class_weights(model)
    a = np.stack([w[1] - w[2], w[0] - w[1]])
    rhs = -np.array([b[1] - b[2], b[0] - b[1]])
    det = np.linalg.det(a)
    if abs(det) <= 1e-12 * max(1.0, np.abs(a).max() ** 2):
        raise ValueError("decision boundaries are parallel; no unique intersection")
    return np.linalg.solve(a, rhs)


def boundary_distances(model, points: np.ndarray, label: int = 0) -> np.ndarray:
    """Euclidean distance from each point to the nearest boundary between ``label`` and another class."""
    w, b = _class_weights(model)
    out = np.full(points.shape[0], np.inf)
    for k in range(w.shape[0]):
        if k == label:
            continue
        normal = w[label] - w[k]
        d = np.abs(points @ normal + (b[label] - b[k])) / np.linalg.norm(normal)
        out = np.minimum(out, d)
    return out


def method_specs(method: str, n: int = 5, eta: float = 0.2, lambda_min: float = 0.2):
    if method == "MI-FGSM":
        return (Identity(),)
    if method == "Admix":
        return (Admix(m2=n, eta=eta, scale=None),)
    if method == "MIST":
        return (MIST(n=n, lambda_min=lambda_min, shift=False),)
    raise ValueError(f"unknown toy method {method!r}")


@dataclass
class Trajectory:
    method: str
    point_id: int
    iterates: np.ndarray  # (T + 1, 2)
    pred_f1: np.ndarray  # prediction of f1 at every iterate
    pred_f2: np.ndarray


@dataclass
class ToyResult:
    trajectories: List[Trajectory]
    summary: Dict[str, Dict[str, float]]
    epsilon: float
    triple_point: np.ndarray

    def trajectory_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "point_id", "t", "x", "y", "pred_f1", "pred_f2"])
        for tr in sorted(self.trajectories, key=lambda t: (t.method, t.point_id)):
            for t, (pt, p1, p2) in enumerate(zip(tr.iterates, tr.pred_f1, tr.pred_f2)):
                w.writerow([tr.method, tr.point_id, t, f"{pt[0]:.6f}", f"{pt[1]:.6f}", int(p1), int(p2)])
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "whitebox_rate", "transfer_rate", "mean_dist"])
        for method in sorted(self.summary):
            s = self.summary[method]
            w.writerow([method, f"{s['whitebox_rate']:.4f}", f"{s['transfer_rate']:.4f}", f"{s['mean_dist']:.4f}"])
        return buf.getvalue()


def toy_epsilon(f1, points: np.ndarray, factor: float = 1.5) -> float:
    return float(factor * np.median(boundary_distances(f1, points, 0)))


def run_toy_experiment(
    dataset: ToyDataset,
    f1,
    f2,
    methods: Sequence[str] = ("MI-FGSM", "Admix", "MIST"),
    epsilon: Optional[float] = None,
    n_iter: int = 10,
    n_points: int = 200,
    seed: int = 0,
    n_samples: int = 5,
    eta: float = 0.2,
    lambda_min: float = 0.2,
) -> ToyResult:
    """Attack Category-I points on ``f1`` with each method and measure transfer to ``f2``.

    Starting points are Category-I samples both models classify correctly; partners
    for Admix and MIST come from Categories II and III.
    """
    start_mask = (dataset.labels == 0) & (f1.predict(dataset.points) == 0) & (f2.predict(dataset.points) == 0)
    starts = dataset.points[start_mask][:n_points]
    labels = np.zeros(starts.shape[0], dtype=np.intp)
    pool_mask = dataset.labels != 0
    pool = (dataset.points[pool_mask], dataset.labels[pool_mask])
    if epsilon is None:
        epsilon = toy_epsilon(f1, starts)
    triple = boundary_intersection(f1)
    trajectories, summary = [], {}
    for method in methods:
        config = AttackConfig(
            epsilon=epsilon,
            n_iter=n_iter,
            clip=(-np.inf, np.inf),
            estimator=method_specs(method, n_samples, eta, lambda_min),
            seed=seed,
            record_trajectory=True,
        )
        result = run_attack(f1, starts, labels, config, pool=pool)
        path = np.stack(result.trajectory, axis=1)  # (points, T + 1, 2)
        for pid in range(path.shape[0]):
            trajectories.append(
                Trajectory(method, pid, path[pid], f1.predict(path[pid]), f2.predict(path[pid]))
            )
        final = result.x_adv
        summary[method] = {
            "whitebox_rate": float(np.mean(f1.predict(final) != 0)),
            "transfer_rate": float(np.mean(f2.predict(final) != 0)),
            "mean_dist": float(np.mean(np.linalg.norm(final - triple, axis=1))),
        }
    return ToyResult(trajectories, summary, float(epsilon), triple)

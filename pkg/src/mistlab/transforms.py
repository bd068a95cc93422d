"""Gradient estimators for transfer attacks.

Each estimator maps ``(model, x, y, rng)`` to an averaged input gradient that the
momentum attack normalizes and steps along. The building blocks are small frozen
dataclasses; :func:`compose` turns a list of them into a callable
:class:`GradientEstimator`::

    est = compose([MIST(n=30), SIM(m=5), TIM(size=7), DIM(p=0.5, rate=1.1)])
    g = est(model, x, y, rng)

``MIST`` mixes every sample with a randomly shifted partner of another class,
then takes two backward passes through a single forward: one for the loss under
the sample's own label, and one for the partner's label. The second gradient is
un-shifted and credited to the partner.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .exceptions import ConfigurationError, ShapeError
from .tensor import Tensor, grad, mul, tsum


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class Identity:
    """Plain input gradient (MI-FGSM)."""


@dataclass(frozen=True)
class DIM:
    p: float = 0.5
    rate: float = 1.1

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ConfigurationError(f"DIM probability must lie in [0, 1], got {self.p}")
        if self.rate < 1.0:
            raise ConfigurationError(f"DIM resize rate must be >= 1, got {self.rate}")


@dataclass(frozen=True)
class TIM:
    size: int = 7
    sigma: Optional[float] = None

    def __post_init__(self):
        if self.size < 1 or self.size % 2 == 0:
            raise ConfigurationError(f"TIM kernel size must be odd and positive, got {self.size}")

    @property
    def kernel(self) -> np.ndarray:
        return ops.gaussian_kernel(self.size, self.sigma)


@dataclass(frozen=True)
class SIM:
    m: int = 5

    def __post_init__(self):
        if self.m < 1:
            raise ConfigurationError("SIM needs m >= 1")


@dataclass(frozen=True)
class Admix:
    m2: int = 3
    eta: float = 0.2
    scale: Optional[int] = 5  # number of SIM copies; None disables scaling

    def __post_init__(self):
        if self.m2 < 1 or self.eta < 0 or (self.scale is not None and self.scale < 1):
            raise ConfigurationError(f"invalid Admix configuration {self}")


@dataclass(frozen=True)
class MIST:
    n: int = 30
    lambda_min: float = 0.2
    shift: bool = True
    addend: bool = True
    fixed_lambda: Optional[float] = None
    max_shift: Optional[int] = None  # None: offsets uniform over the full extent

    def __post_init__(self):
        if self.n < 1:
            raise ConfigurationError("MIST needs n >= 1")
        if self.max_shift is not None and self.max_shift < 0:
            raise ConfigurationError("max_shift must be non-negative")
        if not 0.0 <= self.lambda_min <= 0.5:
            raise ConfigurationError(f"lambda_min must lie in [0, 0.5], got {self.lambda_min}")
        if self.fixed_lambda is not None and not 0.0 <= self.fixed_lambda <= 1.0:
            raise ConfigurationError("fixed_lambda must lie in [0, 1]")


EstimatorSpec = (Identity, DIM, TIM, SIM, Admix, MIST)


@dataclass
class PassCounter:
    forwards: int = 0
    backwards: int = 0

    def __iadd__(self, other: "PassCounter"):
        self.forwards += other.forwards
        self.backwards += other.backwards
        return self


def scale_factors(m: int) -> List[float]:
    return [1.0 / 2**i for i in range(m)]


class _RunningMean:
    # incremental mean: exact when all terms are equal
    def __init__(self):
        self.value, self.count = None, 0

    def add(self, v: np.ndarray):
        self.count += 1
        self.value = v if self.value is None else self.value + (v - self.value) / self.count


# ---------------------------------------------------------------------------
# shared helpers


def _count(counter, forwards=0, backwards=0):
    if counter is not None:
        counter.forwards += forwards
        counter.backwards += backwards


def _model_input(leaf: Tensor, gamma: float, dim: Optional[DIM], rng) -> Tensor:
    x = leaf if gamma == 1.0 else mul(leaf, gamma)
    if dim is not None:
        x = dim_transform(x, dim.p, dim.rate, rng)
    return x


def _losses(model, x: Tensor, label_sets):
    if hasattr(model, "multi_loss"):
        return model.multi_loss(x, label_sets)
    return [model.loss(x, labels) for labels in label_sets]


def sample_partners(y: np.ndarray, pool_y: np.ndarray, rng) -> np.ndarray:
    """For each label in ``y``, a uniformly random pool index with a different label.

    Labels with no other-class candidates fall back to the whole pool with a warning.
    """
    y = np.asarray(y)
    pool_y = np.asarray(pool_y)
    out = np.empty(y.shape[0], dtype=np.intp)
    everyone = np.arange(pool_y.shape[0])
    for label in np.unique(y):
        rows = np.flatnonzero(y == label)
        candidates = np.flatnonzero(pool_y != label)
        if candidates.size == 0:
            warnings.warn(f"no partner of another class for label {label}; sampling from the whole pool")
            candidates = everyone
        out[rows] = candidates[rng.integers(candidates.size, size=rows.size)]
    return out


def label_permutation(y: np.ndarray, rng, max_sweeps: int = 100) -> np.ndarray:
    """Random permutation ``pi`` with ``y[pi[i]] != y[i]`` wherever the batch allows it."""
    y = np.asarray(y)
    n = y.shape[0]
    perm = rng.permutation(n)
    if n == 1:
        warnings.warn("batch of one sample: mixing the sample with itself")
        return perm
    if np.unique(y).size < 2:
        warnings.warn("single-class batch: every sample is mixed with its own class")
        return perm
    for _ in range(max_sweeps):
        bad = np.flatnonzero(y[perm] == y)
        if bad.size == 0:
            return perm
        for i in bad:
            j = int(rng.integers(n))
            if y[perm[j]] != y[i] and y[perm[i]] != y[j]:
                perm[i], perm[j] = perm[j], perm[i]
    if np.any(y[perm] == y):
        warnings.warn("could not avoid all same-label pairs (one class dominates the batch)")
    return perm


# ---------------------------------------------------------------------------
# input transforms


def dim_transform(x, p: float, rate: float, rng) -> Tensor:
    """Random resize-and-pad: with probability ``p`` resize to ``r`` in [H, floor(rate*H)],
    zero-pad at a random position to floor(rate*H), then resize back to H."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if not ops.has_spatial_axes(x.shape):
        return x
    if rng.random() >= p:
        return x
    h, w = x.shape[-2:]
    big_h, big_w = int(math.floor(rate * h)), int(math.floor(rate * w))
    rh, rw = int(rng.integers(h, big_h + 1)), int(rng.integers(w, big_w + 1))
    top, left = int(rng.integers(0, big_h - rh + 1)), int(rng.integers(0, big_w - rw + 1))
    out = ops.resize_bilinear(x, (rh, rw))
    out = ops.pad_zero(out, left, big_w - rw - left, top, big_h - rh - top)
    return ops.resize_bilinear(out, (h, w))


def tim_filter(g: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Smooth a gradient batch channel-wise; flat inputs pass through."""
    if not ops.has_spatial_axes(np.shape(g)):
        return np.asarray(g)
    return ops.conv_same(g, kernel).data


# ---------------------------------------------------------------------------
# estimators


def _plain(model, x, y, rng, gammas, dim, counter):
    avg = _RunningMean()
    for gamma in gammas:
        leaf = Tensor(x, requires_grad=True)
        (loss,) = _losses(model, _model_input(leaf, gamma, dim, rng), [y])
        _count(counter, forwards=1)
        avg.add(grad(tsum(loss), leaf))
        _count(counter, backwards=1)
    return avg.value


def estimate_identity(model, x, y, counter=None) -> np.ndarray:
    return _plain(model, x, y, None, [1.0], None, counter)


def estimate_sim(model, x, y, m: int = 5, rng=None, dim=None, counter=None) -> np.ndarray:
    """Average gradient over the copies ``x / 2**i`` for ``i = 0..m-1``."""
    if m < 1:
        raise ConfigurationError("SIM needs m >= 1")
    return _plain(model, x, y, rng, scale_factors(m), dim, counter)


def estimate_admix(
    model,
    x,
    y,
    pool_x,
    pool_y,
    m2: int = 3,
    eta: float = 0.2,
    scale: Optional[int] = 5,
    rng=None,
    dim=None,
    counter=None,
) -> np.ndarray:
    """Average gradient of ``J(gamma_i * (x + eta * x_j), y)`` over ``m2`` other-class partners
    ``x_j`` drawn from the pool and, with ``scale``, over the SIM factors ``gamma_i``."""
    rng = rng if rng is not None else np.random.default_rng(0)
    gammas = scale_factors(scale) if scale else [1.0]
    pool_x, pool_y = np.asarray(pool_x), np.asarray(pool_y)
    avg = _RunningMean()
    for _ in range(m2):
        partners = sample_partners(y, pool_y, rng)
        base = x + eta * pool_x[partners] if eta != 0 else x
        avg.add(_plain(model, base, y, rng, gammas, dim, counter))
    return avg.value


@dataclass
class MixedRound:
    """One mixing round over a batch of ``M`` rows.

    ``mixed[i] = lam[i] * source[i] + (1 - lam[i]) * shift(source[perm[i]], offsets[i])``
    """

    source: np.ndarray
    labels: np.ndarray
    perm: np.ndarray
    lam: np.ndarray
    offsets: np.ndarray
    mixed: np.ndarray = field(repr=False)

    @property
    def partner_labels(self) -> np.ndarray:
        return self.labels[self.perm]


def _broadcast_rows(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((-1,) + (1,) * (ndim - 1))


def sample_round(x, y, spec: MIST, rng, pool=None) -> MixedRound:
    """Draw partners, mix strengths and shifts for one MIST round.

    Without a pool, partners come from the batch itself through a label-avoiding
    permutation. With ``pool=(pool_x, pool_y)``, each sample ``i`` is paired with a
    fresh other-class pool draw ``p_i``; rows ``B + i`` hold the reverse mix with
    ``p_i`` as primary so every sample still receives one addend gradient.
    """
    x, y = np.asarray(x), np.asarray(y)
    b = x.shape[0]
    if pool is None:
        source, labels = x, y
        perm = label_permutation(y, rng)
    else:
        pool_x, pool_y = np.asarray(pool[0]), np.asarray(pool[1])
        partners = sample_partners(y, pool_y, rng)
        source = np.concatenate([x, pool_x[partners]], axis=0)
        labels = np.concatenate([y, pool_y[partners]])
        perm = np.concatenate([np.arange(b, 2 * b), np.arange(b)])
    m = source.shape[0]
    if spec.fixed_lambda is not None:
        lam = np.full(m, float(spec.fixed_lambda))
    else:
        lam = rng.uniform(spec.lambda_min, 1.0 - spec.lambda_min, size=m)
    if spec.shift and ops.has_spatial_axes(source.shape):
        extents = source.shape[-2:]
        if spec.max_shift is None:
            offsets = np.stack([rng.integers(0, e, size=m) for e in extents], axis=1)
        else:
            k = spec.max_shift
            offsets = np.stack([rng.integers(-k, k + 1, size=m) for _ in extents], axis=1)
    else:
        offsets = np.zeros((m, 0), dtype=np.int64)
    partner = ops.circular_shift(source[perm], offsets).data
    lam_b = _broadcast_rows(lam, source.ndim)
    mixed = lam_b * source + (1.0 - lam_b) * partner
    return MixedRound(source, labels, perm, lam, offsets, mixed)


def estimate_mist(
    model,
    x,
    y,
    spec: MIST = MIST(),
    rng=None,
    pool=None,
    scale: Optional[int] = None,
    dim=None,
    counter=None,
) -> np.ndarray:
    """Separated-gradient mixup estimate for every sample of the batch.

    Per round: one forward over the mixed batch, one backward for
    ``sum_i lam_i J(mixed_i, y_i)`` credited to sample ``i`` and one backward for
    ``sum_i (1 - lam_i) J(mixed_i, y_perm(i))`` un-shifted and credited to
    ``perm(i)``. The result is the accumulated gradient divided by ``2 N``
    (``N`` when ``spec.addend`` is off); with ``scale`` every mixed batch is also
    evaluated at the SIM factors and the divisor grows by ``scale``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y)
    b = x.shape[0]
    gammas = scale_factors(scale) if scale else [1.0]
    per_round = (2 if spec.addend else 1) * len(gammas)
    avg = _RunningMean()
    for _ in range(spec.n):
        rnd = sample_round(x, y, spec, rng, pool)
        acc = np.zeros_like(rnd.source)
        leaf = Tensor(rnd.mixed, requires_grad=True)
        lam = rnd.lam
        for gamma in gammas:
            inp = _model_input(leaf, gamma, dim, rng)
            if spec.addend:
                own, other = _losses(model, inp, [rnd.labels, rnd.partner_labels])
            else:
                (own,) = _losses(model, inp, [rnd.labels])
            _count(counter, forwards=1)
            acc += grad(tsum(mul(own, lam)), leaf)
            _count(counter, backwards=1)
            if spec.addend:
                g_other = grad(tsum(mul(other, 1.0 - lam)), leaf)
                _count(counter, backwards=1)
                back = ops.circular_shift(g_other, -rnd.offsets).data
                np.add.at(acc, rnd.perm, back)
        avg.add(acc[:b] / per_round)
    return avg.value


# ---------------------------------------------------------------------------
# composition


class GradientEstimator:
    """A composed estimator: optional DIM on each copy, one sampling core, optional TIM last.

    ``SIM`` combined with ``Admix`` or ``MIST`` becomes their scale setting rather
    than a separate core.
    """

    def __init__(self, specs: Sequence = ()):
        specs = list(specs) or [Identity()]
        kinds = {}
        for s in specs:
            if not isinstance(s, EstimatorSpec):
                raise ConfigurationError(f"not an estimator spec: {s!r}")
            if type(s) in kinds:
                raise ConfigurationError(f"{type(s).__name__} appears twice")
            kinds[type(s)] = s
        if Admix in kinds and MIST in kinds:
            raise ConfigurationError("Admix and MIST are both sampling cores; pick one")
        if Identity in kinds and len(kinds) > 1:
            kinds.pop(Identity)
        self.specs = tuple(specs)
        self.dim: Optional[DIM] = kinds.get(DIM)
        self.tim: Optional[TIM] = kinds.get(TIM)
        self.sim: Optional[SIM] = kinds.get(SIM)
        self.core = kinds.get(MIST) or kinds.get(Admix)
        if isinstance(self.core, Admix) and self.sim is not None:
            self.core = Admix(self.core.m2, self.core.eta, self.sim.m)
        self._kernel = self.tim.kernel if self.tim is not None else None

    @property
    def name(self) -> str:
        parts = []
        if isinstance(self.core, MIST):
            parts.append("MIST")
        elif isinstance(self.core, Admix):
            parts.append("Admix" if self.core.scale else "Admix-noscale")
        if self.sim is not None and not isinstance(self.core, Admix):
            parts.append("SI")
        if self.tim is not None:
            parts.append("TI")
        if self.dim is not None:
            parts.append("DIM")
        return "-".join(parts) if parts else "MI-FGSM"

    def passes_per_iteration(self) -> Tuple[int, int]:
        """Closed-form (forwards, backwards) per attack iteration for one batch."""
        m = self.sim.m if self.sim is not None else 1
        if isinstance(self.core, MIST):
            return self.core.n * m, (2 if self.core.addend else 1) * self.core.n * m
        if isinstance(self.core, Admix):
            k = self.core.m2 * (self.core.scale or 1)
            return k, k
        return m, m

    def __call__(self, model, x, y, rng=None, pool=None, counter=None) -> np.ndarray:
        rng = rng if rng is not None else np.random.default_rng(0)
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y)
        if tuple(x.shape[1:]) != tuple(model.input_shape_):
            raise ShapeError(f"batch shape {x.shape[1:]} does not match model input {model.input_shape_}")
        core = self.core
        if isinstance(core, MIST):
            m = self.sim.m if self.sim is not None else None
            g = estimate_mist(model, x, y, core, rng, pool, m, self.dim, counter)
        elif isinstance(core, Admix):
            px, py = pool if pool is not None else (x, y)
            g = estimate_admix(model, x, y, px, py, core.m2, core.eta, core.scale, rng, self.dim, counter)
        else:
            gammas = scale_factors(self.sim.m) if self.sim is not None else [1.0]
            g = _plain(model, x, y, rng, gammas, self.dim, counter)
        if self._kernel is not None:
            g = tim_filter(g, self._kernel)
        return g

    def __repr__(self):
        return f"GradientEstimator({', '.join(map(repr, self.specs))})"


def compose(specs: Sequence) -> GradientEstimator:
    return GradientEstimator(specs)

"""Momentum iterative sign attack (MI-FGSM) driven by a pluggable gradient estimator."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_xy
from .exceptions import AttackDivergedError, ConfigurationError, InvariantError
from .transforms import (
    DIM,
    MIST,
    SIM,
    TIM,
    Admix,
    GradientEstimator,
    Identity,
    PassCounter,
    compose,
)

BUDGET_SLACK = 1e-9


@dataclass
class AttackConfig:
    """``epsilon`` and ``step_size`` are in the input's own units (e.g. [0, 1] pixels)."""

    epsilon: float
    n_iter: int = 10
    step_size: Optional[float] = None  # defaults to epsilon / n_iter
    decay: float = 1.0
    clip: Tuple[float, float] = (0.0, 1.0)
    estimator: Sequence = (Identity(),)
    seed: int = 0
    record_trajectory: bool = False

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ConfigurationError("epsilon must be positive")
        if self.n_iter < 1:
            raise ConfigurationError("n_iter must be >= 1")
        if self.decay < 0:
            raise ConfigurationError("decay must be non-negative")
        lo, hi = self.clip
        if not lo < hi:
            raise ConfigurationError(f"invalid clip range {self.clip}")
        if isinstance(self.estimator, GradientEstimator):
            self.estimator = self.estimator.specs
        self.estimator = tuple(self.estimator)

    @property
    def alpha(self) -> float:
        return self.step_size if self.step_size is not None else self.epsilon / self.n_iter

    def build_estimator(self) -> GradientEstimator:
        return compose(self.estimator)


@dataclass
class AdversarialBatch:
    x_clean: np.ndarray
    x_adv: np.ndarray
    labels: np.ndarray
    config: AttackConfig
    counter: PassCounter = field(default_factory=PassCounter)
    trajectory: Optional[List[np.ndarray]] = None  # x_0 .. x_T when recorded

    @property
    def linf(self) -> np.ndarray:
        diff = (self.x_adv - self.x_clean).reshape(self.x_clean.shape[0], -1)
        return np.abs(diff).max(axis=1)


def momentum_step(g: np.ndarray, g_bar: np.ndarray, mu: float) -> np.ndarray:
    """``mu * g + g_bar / ||g_bar||_1`` per sample; a zero estimate adds nothing."""
    flat = np.abs(g_bar).reshape(g_bar.shape[0], -1).sum(axis=1)
    safe = np.where(flat > 0, flat, 1.0).reshape((-1,) + (1,) * (g_bar.ndim - 1))
    return mu * g + g_bar / safe


def apply_step(x_t, g, alpha, x_clean, epsilon, clip=(0.0, 1.0)) -> np.ndarray:
    """Signed step, then projection onto the L-inf ball around ``x_clean`` and the valid range."""
    proposed = x_t + alpha * np.sign(g)
    projected = np.clip(proposed, x_clean - epsilon, x_clean + epsilon)
    return np.clip(projected, clip[0], clip[1])


def _check_budget(x, x_clean, epsilon, clip, iteration):
    over = np.abs(x - x_clean).max() if x.size else 0.0
    if over > epsilon + BUDGET_SLACK or x.min() < clip[0] or x.max() > clip[1]:
        raise InvariantError(f"iterate {iteration} leaves the budget (linf {over:.3g} > {epsilon:.3g}) or range")


def run_attack(model, x, y, config: AttackConfig, pool=None, batch_id: int = 0) -> AdversarialBatch:
    """Run ``config.n_iter`` rounds of estimate -> momentum -> signed step.

    ``pool`` supplies Admix partners (default: the clean batch) and, if given
    explicitly, MIST partners; without it MIST mixes within the batch.
    """
    x, y = check_xy(x, y, model.input_shape_, model.n_classes_)
    estimator = config.build_estimator()
    rng = np.random.default_rng([config.seed, batch_id])
    counter = PassCounter()
    admix_pool = pool if pool is not None else (x, y)
    core_pool = admix_pool if isinstance(estimator.core, Admix) else pool
    g = np.zeros_like(x)
    x_adv = x.copy()
    trajectory = [x_adv.copy()] if config.record_trajectory else None
    for t in range(config.n_iter):
        g_bar = estimator(model, x_adv, y, rng, pool=core_pool, counter=counter)
        if not np.all(np.isfinite(g_bar)):
            raise AttackDivergedError(t)
        g = momentum_step(g, g_bar, config.decay)
        x_adv = apply_step(x_adv, g, config.alpha, x, config.epsilon, config.clip)
        _check_budget(x_adv, x, config.epsilon, config.clip, t)
        if trajectory is not None:
            trajectory.append(x_adv.copy())
    return AdversarialBatch(x, x_adv, y, config, counter, trajectory)


_SHORTHANDS = {
    "mi-fgsm": lambda: [Identity()],
    "identity": lambda: [Identity()],
    "dim": lambda: [DIM()],
    "tim": lambda: [TIM()],
    "sim": lambda: [SIM()],
    "admix": lambda: [Admix()],
    "admix-noscale": lambda: [Admix(scale=None)],
    "mist": lambda: [MIST()],
    "mist-si": lambda: [MIST(), SIM()],
    "ti-dim": lambda: [TIM(), DIM()],
    "admix-ti-dim": lambda: [Admix(), TIM(), DIM()],
    "mist-ti-dim": lambda: [MIST(), TIM(), DIM()],
    "mist-si-ti-dim": lambda: [MIST(), SIM(), TIM(), DIM()],
}


def estimator_specs(name_or_specs) -> Tuple:
    """Resolve a shorthand name such as ``"mist-si-ti-dim"`` or pass a spec list through."""
    if isinstance(name_or_specs, str):
        key = name_or_specs.lower()
        if key not in _SHORTHANDS:
            raise ConfigurationError(f"unknown estimator {name_or_specs!r}; choose from {sorted(_SHORTHANDS)}")
        return tuple(_SHORTHANDS[key]())
    if isinstance(name_or_specs, GradientEstimator):
        return name_or_specs.specs
    return tuple(name_or_specs)


class MomentumAttack(TransformerMixin, BaseEstimator):
    """Transformer that maps clean inputs to adversarial ones against ``surrogate``.

    ``fit(X, y)`` records a partner pool for Admix and checks the surrogate;
    ``transform(X, y)`` crafts the perturbations. Labels are required by transform
    since the attack is untargeted against the true class.

    >>> attack = MomentumAttack(surrogate, epsilon=0.3, estimator="mist")   # doctest: +SKIP
    >>> X_adv = attack.fit(X, y).transform(X, y)                            # doctest: +SKIP
    """

    def __init__(
        self,
        surrogate=None,
        epsilon=16 / 255,
        n_iter=10,
        step_size=None,
        decay=1.0,
        estimator="mi-fgsm",
        clip=(0.0, 1.0),
        random_state=0,
    ):
        self.surrogate = surrogate
        self.epsilon = epsilon
        self.n_iter = n_iter
        self.step_size = step_size
        self.decay = decay
        self.estimator = estimator
        self.clip = clip
        self.random_state = random_state

    def _config(self, record=False) -> AttackConfig:
        return AttackConfig(
            epsilon=self.epsilon,
            n_iter=self.n_iter,
            step_size=self.step_size,
            decay=self.decay,
            clip=tuple(self.clip),
            estimator=estimator_specs(self.estimator),
            seed=self.random_state,
            record_trajectory=record,
        )

    def fit(self, X, y):
        if self.surrogate is None:
            raise ConfigurationError("MomentumAttack needs a surrogate model")
        check_is_fitted(self.surrogate)  # sklearn.clone hands back an untrained surrogate
        X, y = check_xy(X, y, self.surrogate.input_shape_, self.surrogate.n_classes_)
        self._config()
        self.pool_ = (X, y)
        return self

    def transform(self, X, y=None):
        check_is_fitted(self, "pool_")
        if y is None:
            raise ValueError("the untargeted attack needs the true labels: transform(X, y)")
        pool = self.pool_
        estimator = compose(estimator_specs(self.estimator))
        if isinstance(estimator.core, MIST):
            pool = None  # MIST mixes within the batch being attacked
        self.result_ = run_attack(self.surrogate, X, y, self._config(), pool=pool)
        return self.result_.x_adv

    def fit_transform(self, X, y=None, **fit_params):
        return self.fit(X, y).transform(X, y)

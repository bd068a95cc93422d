"""Transfer success rates, preprocessing defenses and ablation sweeps."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import ops
from .attacks import AttackConfig, run_attack
from .exceptions import ConfigurationError, ContractError, InvariantError
from .transforms import MIST, Admix, GradientEstimator, Identity, dim_transform


# ---------------------------------------------------------------------------
# defenses


@dataclass(frozen=True)
class NoDefense:
    name = "none"


@dataclass(frozen=True)
class RandResizePad:
    """Random resizing and padding at inference time."""

    rate: float = 1.1

    def __post_init__(self):
        if self.rate < 1.0:
            raise ConfigurationError(f"resize rate must be >= 1, got {self.rate}")

    @property
    def name(self) -> str:
        return f"rp{self.rate:g}"


@dataclass(frozen=True)
class BitDepth:
    bits: int = 4

    def __post_init__(self):
        if not 1 <= self.bits <= 8:
            raise ConfigurationError(f"bit depth must lie in [1, 8], got {self.bits}")

    @property
    def name(self) -> str:
        return f"bits{self.bits}"


@dataclass(frozen=True)
class GaussianBlur:
    sigma: float = 1.0
    size: Optional[int] = None  # odd; defaults to 2 * ceil(3 sigma) + 1

    def __post_init__(self):
        if self.sigma <= 0:
            raise ConfigurationError("blur sigma must be positive")
        if self.size is not None and (self.size < 1 or self.size % 2 == 0):
            raise ConfigurationError(f"blur kernel size must be odd, got {self.size}")

    @property
    def kernel_size(self) -> int:
        return self.size if self.size is not None else 2 * int(np.ceil(3 * self.sigma)) + 1

    @property
    def name(self) -> str:
        return f"blur{self.sigma:g}"


DefenseSpec = Union[NoDefense, RandResizePad, BitDepth, GaussianBlur]


def parse_defense(text: str) -> DefenseSpec:
    """``none``, ``rp`` / ``rp:1.2``, ``bits:4``, ``blur:1.0``."""
    kind, _, arg = text.strip().lower().partition(":")
    try:
        if kind in ("", "none"):
            return NoDefense()
        if kind in ("rp", "randresizepad"):
            return RandResizePad(float(arg)) if arg else RandResizePad()
        if kind in ("bits", "bitdepth"):
            return BitDepth(int(arg)) if arg else BitDepth()
        if kind in ("blur", "gaussianblur"):
            return GaussianBlur(float(arg)) if arg else GaussianBlur()
    except ValueError as exc:
        raise ConfigurationError(f"bad defense argument in {text!r}: {exc}") from None
    raise ConfigurationError(f"unknown defense {text!r}")


def apply_defense(x: np.ndarray, defense: DefenseSpec, rng=None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if isinstance(defense, NoDefense) or defense is None:
        return x
    if isinstance(defense, RandResizePad):
        rng = rng if rng is not None else np.random.default_rng(0)
        return dim_transform(x, 1.0, defense.rate, rng).data
    if isinstance(defense, BitDepth):
        levels = 2**defense.bits - 1
        return np.round(x * levels) / levels
    if isinstance(defense, GaussianBlur):
        if defense.kernel_size == 1 or not ops.has_spatial_axes(x.shape):
            return x
        return ops.conv_same(x, ops.gaussian_kernel(defense.kernel_size, defense.sigma)).data
    raise ConfigurationError(f"unknown defense {defense!r}")


def success_rate(model, x_adv, labels, defense: DefenseSpec = NoDefense(), rng=None) -> float:
    """Fraction of samples whose (defended) prediction differs from the true label."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ContractError("success rate of an empty batch is undefined")
    pred = model.predict(apply_defense(x_adv, defense, rng))
    return float(np.mean(pred != labels))


def common_correct(models: Sequence, X, y) -> np.ndarray:
    """Mask of samples every model classifies correctly."""
    mask = np.ones(len(y), dtype=bool)
    for m in models:
        mask &= m.predict(X) == np.asarray(y)
    return mask


# ---------------------------------------------------------------------------
# transfer matrix


@dataclass(frozen=True)
class Cell:
    surrogate: str
    target: str
    attack: str
    defense: str
    n: int
    success_rate: float

    @property
    def whitebox(self) -> bool:
        return self.surrogate == self.target


CSV_HEADER = ("surrogate", "target", "attack", "defense", "n", "success_rate")


def _config_record(config: AttackConfig) -> dict:
    rec = dataclasses.asdict(config)
    rec["estimator"] = [repr(s) for s in config.estimator]
    rec["clip"] = [float(c) for c in config.clip]
    return rec


def config_digest(configs: Mapping[str, AttackConfig]) -> str:
    payload = json.dumps({k: _config_record(v) for k, v in sorted(configs.items())}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class TransferReport:
    cells: List[Cell]
    digest: str
    seed: int

    @property
    def surrogates(self) -> List[str]:
        return sorted({c.surrogate for c in self.cells})

    @property
    def targets(self) -> List[str]:
        return sorted({c.target for c in self.cells})

    def rate(self, surrogate, target, attack, defense="none") -> float:
        for c in self.cells:
            if (c.surrogate, c.target, c.attack, c.defense) == (surrogate, target, attack, defense):
                return c.success_rate
        raise KeyError((surrogate, target, attack, defense))

    def matrix(self, attack, defense="none") -> np.ndarray:
        """Surrogate-by-target array (rows and columns in sorted order)."""
        s, t = self.surrogates, self.targets
        out = np.full((len(s), len(t)), np.nan)
        for c in self.cells:
            if c.attack == attack and c.defense == defense:
                out[s.index(c.surrogate), t.index(c.target)] = c.success_rate
        return out

    def blackbox_mean(self, surrogate, attack, defense="none") -> float:
        rates = [
            c.success_rate
            for c in self.cells
            if c.surrogate == surrogate and c.attack == attack and c.defense == defense and not c.whitebox
        ]
        if not rates:
            raise KeyError(f"no black-box cells for {surrogate}/{attack}")
        return float(np.mean(rates))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for c in sorted(self.cells, key=lambda c: (c.surrogate, c.target, c.attack, c.defense)):
            w.writerow([c.surrogate, c.target, c.attack, c.defense, c.n, f"{c.success_rate:.4f}"])
        return buf.getvalue()


def _attack_chunks(model, X, y, config, pool, chunk):
    outs = []
    for batch_id, start in enumerate(range(0, X.shape[0], chunk)):
        sl = slice(start, start + chunk)
        outs.append(run_attack(model, X[sl], y[sl], config, pool=pool, batch_id=batch_id).x_adv)
    return np.concatenate(outs, axis=0)


def transfer_matrix(
    models: Mapping[str, object],
    attacks: Mapping[str, AttackConfig],
    X,
    y,
    seed: int = 0,
    defenses: Sequence[DefenseSpec] = (NoDefense(),),
    surrogates: Optional[Sequence[str]] = None,
    n_samples: Optional[int] = None,
    chunk: int = 500,
    prefilter: bool = True,
    pool=None,
) -> TransferReport:
    """Craft adversarial batches on each surrogate and score them on every model.

    Samples are first restricted to those every model classifies correctly, so a
    success is a flip of a correct prediction. Cells where surrogate and target
    coincide are white-box. ``pool`` is handed to every attack as its partner pool.
    """
    if not models:
        raise ContractError("transfer_matrix needs at least one model")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if prefilter:
        keep = common_correct(list(models.values()), X, y)
        X, y = X[keep], y[keep]
    if n_samples is not None:
        X, y = X[:n_samples], y[:n_samples]
    if y.size == 0:
        raise ContractError("no sample is classified correctly by every model")
    surrogates = list(surrogates) if surrogates is not None else list(models)
    cells = []
    for s_name in surrogates:
        for a_name, config in attacks.items():
            config = dataclasses.replace(config, seed=seed)
            x_adv = _attack_chunks(models[s_name], X, y, config, pool, chunk)
            for t_name, target in models.items():
                for d_index, defense in enumerate(defenses):
                    rng = np.random.default_rng([seed, d_index])
                    rate = success_rate(target, x_adv, y, defense, rng)
                    cells.append(Cell(s_name, t_name, a_name, getattr(defense, "name", "none"), int(y.size), rate))
    report = TransferReport(cells, config_digest(attacks), seed)
    check_report(report)
    return report


def check_report(report: TransferReport) -> None:
    for c in report.cells:
        if not 0.0 <= c.success_rate <= 1.0 or c.n <= 0:
            raise InvariantError(f"bad cell {c}")


# ---------------------------------------------------------------------------
# ablations

LAMBDA_GRID = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
N_GRID = tuple(range(0, 55, 5))
ABLATION_HEADER = ("sweep", "value", "target", "n", "success_rate")


@dataclass
class AblationTable:
    sweep: str
    values: List[str]
    per_target: Dict[str, Dict[str, float]]  # value -> target -> rate
    n: int

    def mean(self, value) -> float:
        return float(np.mean(list(self.per_target[str(value)].values())))

    @property
    def means(self) -> List[float]:
        return [self.mean(v) for v in self.values]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(ABLATION_HEADER)
        for v in self.values:
            for t in sorted(self.per_target[v]):
                w.writerow([self.sweep, v, t, self.n, f"{self.per_target[v][t]:.4f}"])
            w.writerow([self.sweep, v, "mean", self.n, f"{self.mean(v):.4f}"])
        return buf.getvalue()


def _sweep(name, variants, surrogate, targets, X, y, base: AttackConfig, seed) -> AblationTable:
    if not variants:
        raise ContractError(f"{name} sweep needs a non-empty grid")
    per_target = {}
    for label, specs in variants:
        config = dataclasses.replace(base, estimator=tuple(specs), seed=seed)
        x_adv = _attack_chunks(surrogate, X, y, config, None, 500)
        per_target[label] = {t: success_rate(m, x_adv, y) for t, m in targets.items()}
    return AblationTable(name, [v for v, _ in variants], per_target, int(len(y)))


def _fmt(v) -> str:
    return f"{v:g}" if isinstance(v, float) else str(v)


def ablate_lambda(
    surrogate, targets, X, y, base: AttackConfig, grid=LAMBDA_GRID, seed=0, template: MIST = MIST()
) -> AblationTable:
    """Average transfer across ``targets`` for each lambda lower bound, random shift disabled."""
    variants = [
        (_fmt(float(v)), (dataclasses.replace(template, lambda_min=float(v), shift=False),)) for v in grid
    ]
    return _sweep("lambda", variants, surrogate, targets, X, y, base, seed)


def ablate_n(surrogate, targets, X, y, base: AttackConfig, grid=N_GRID, seed=0, template: MIST = MIST()) -> AblationTable:
    """Transfer against the number of mixed copies; ``N = 0`` is plain MI-FGSM."""
    variants = [
        (str(int(v)), (Identity(),) if int(v) == 0 else (dataclasses.replace(template, n=int(v)),)) for v in grid
    ]
    return _sweep("n", variants, surrogate, targets, X, y, base, seed)


def component_variants(template: MIST = MIST()):
    return (
        ("mi-fgsm", (Identity(),)),
        ("admix-noscale", (Admix(scale=None),)),
        ("mixup", (dataclasses.replace(template, shift=False),)),
        ("mixup-shift", (dataclasses.replace(template, shift=True),)),
    )


def ablate_components(surrogate, targets, X, y, base: AttackConfig, seed=0, variants=None) -> AblationTable:
    """MI-FGSM, Admix without scale, separated-gradient mixup, then mixup plus random shift."""
    variants = component_variants() if variants is None else variants
    return _sweep("components", list(variants), surrogate, targets, X, y, base, seed)


def estimator_label(specs) -> str:
    return GradientEstimator(specs).name

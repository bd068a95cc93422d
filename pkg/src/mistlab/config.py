"""Flat ``key = value`` run configuration.

Keys are dotted (``attack.epsilon = 16``); ``#`` starts a comment. Values are
kept as strings in the file and typed through :data:`SCHEMA` on access, so
``parse -> serialize -> parse`` is the identity.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, Mapping, Optional, Tuple

from .exceptions import ConfigurationError

_KEY = re.compile(r"^[A-Za-z_][A-Za-z0-9_\-]*(\.[A-Za-z_][A-Za-z0-9_\-]*)*$")


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> Tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text: str) -> Tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _names(text: str) -> Tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _units(text: str) -> str:
    if text not in ("raw", "255"):
        raise ValueError("expected 'raw' or '255'")
    return text


def _optional_int(text: str) -> Optional[int]:
    return None if text.strip().lower() in ("", "none", "full") else int(text)


# key -> (parser, default as text)
SCHEMA: Dict[str, Tuple[Callable[[str], object], str]] = {
    "run.seed": (int, "0"),
    "run.output_dir": (str, "runs/latest"),
    "data.source": (str, "mnist"),
    "data.dir": (str, ""),
    "data.train_size": (int, "10000"),
    "data.n_eval": (int, "500"),
    "models.roster": (_names, "mlp,mlp-b,linear-softmax,small-conv"),
    "models.surrogate": (str, "mlp"),
    "models.dir": (str, ""),
    "attack.estimator": (str, "mist"),
    "attack.epsilon": (float, "0.3"),
    "attack.epsilon_units": (_units, "raw"),
    "attack.n_iter": (int, "10"),
    "attack.decay": (float, "1.0"),
    "attack.step_size": (str, ""),
    "mist.n": (int, "30"),
    "mist.lambda_min": (float, "0.2"),
    "mist.shift": (_bool, "true"),
    "mist.max_shift": (_optional_int, "2"),
    "admix.m2": (int, "3"),
    "admix.eta": (float, "0.2"),
    "sim.m": (int, "5"),
    "dim.p": (float, "0.5"),
    "dim.rate": (float, "1.1"),
    "tim.size": (int, "7"),
    "eval.defenses": (_names, "none"),
    "ablate.sweep": (str, "lambda"),
    "ablate.grid": (_floats, ""),
    "toy.n_points": (int, "200"),
    "toy.epsilon_factor": (float, "1.5"),
    "toy.per_class": (int, "200"),
    "report.input": (str, ""),
}


def parse_text(text: str, origin: str = "<config>") -> Dict[str, str]:
    values: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigurationError(f"{origin}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in body.split("=", 1))
        if not _KEY.match(key):
            raise ConfigurationError(f"{origin}:{lineno}: malformed key {key!r}")
        if key in values:
            raise ConfigurationError(f"{origin}:{lineno}: duplicate key {key}")
        values[key] = value
    return values


def serialize(values: Mapping[str, str]) -> str:
    for k, v in values.items():
        if "#" in v or "\n" in v or v != v.strip():
            raise ConfigurationError(f"value of {k} cannot be written to a config file: {v!r}")
    return "".join(f"{k} = {values[k]}\n" for k in sorted(values))


@dataclass
class RunConfig:
    """Raw string values plus typed access; unknown keys are rejected."""

    values: Dict[str, str] = field(default_factory=dict)
    command: str = ""

    def __post_init__(self):
        for key in self.values:
            if key not in SCHEMA:
                raise ConfigurationError(f"unknown config key {key}")
        for key in self.values:
            self.get(key)  # type-check early so errors name the key

    @classmethod
    def from_file(cls, path, command: str = "") -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from None
        return cls(parse_text(text, str(path)), command)

    @classmethod
    def from_text(cls, text: str, command: str = "") -> "RunConfig":
        return cls(parse_text(text), command)

    def merged(self, overrides: Mapping[str, Optional[str]]) -> "RunConfig":
        values = dict(self.values)
        values.update({k: str(v) for k, v in overrides.items() if v is not None})
        return RunConfig(values, self.command)

    def raw(self, key: str) -> str:
        if key not in SCHEMA:
            raise ConfigurationError(f"unknown config key {key}")
        return self.values.get(key, SCHEMA[key][1])

    def get(self, key: str):
        parser, _ = SCHEMA[key] if key in SCHEMA else (None, None)
        if parser is None:
            raise ConfigurationError(f"unknown config key {key}")
        text = self.raw(key)
        try:
            return parser(text)
        except ValueError as exc:
            raise ConfigurationError(f"{key}: invalid value {text!r} ({exc})") from None

    def effective(self) -> Dict[str, str]:
        """Every schema key with its effective text value."""
        return {k: self.raw(k) for k in SCHEMA}

    def to_text(self) -> str:
        return serialize(self.effective())

    @property
    def epsilon(self) -> float:
        eps = self.get("attack.epsilon")
        return eps / 255.0 if self.get("attack.epsilon_units") == "255" else eps

    @property
    def step_size(self) -> Optional[float]:
        text = self.raw("attack.step_size").strip()
        if not text:
            return None
        try:
            step = float(text)
        except ValueError:
            raise ConfigurationError(f"attack.step_size: invalid value {text!r}") from None
        return step / 255.0 if self.get("attack.epsilon_units") == "255" else step

    def keys(self) -> Iterable[str]:
        return self.values.keys()

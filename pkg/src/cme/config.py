"""Training configuration and its ``key = value`` text form."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Mapping, Optional, Union

from .disturbance import STRATEGIES, TARGETS, DisturbanceConfig


class ConfigError(ValueError):
    """A config key or value is unknown, unparsable or out of range."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


# external key -> help text
KEY_HELP = {
    "lr": "SGD learning rate",
    "momentum": "SGD momentum in [0, 1)",
    "lambda": "weight of the max-margin loss",
    "base_iterations": "base-training iterations",
    "finetune_iterations": "outer finetuning iterations",
    "inner_iterations": "disturbance rounds per finetune episode ('auto' = K)",
    "batch_query": "query images per episode",
    "support_per_class": "support items per class in base training",
    "shots": "K, annotated instances per class at finetuning",
    "seed": "master seed; every derived seed is a function of it",
    "split": "class split variant (0, 1 or 2)",
    "max_margin": "use the max-margin loss",
    "feature_filter": "compute the margin loss on filtered prototypes",
    "disturbance": "apply mask disturbance while finetuning",
    "filter_width": "output width of the feature filter",
    "dist_ratio": "share of active mask pixels removed per disturbance",
    "dist_floor": "minimum surviving share of the original mask area",
    "target": "classes disturbed: " + "|".join(TARGETS),
    "strategy": "disturbance manner: " + "|".join(STRATEGIES),
    "augment": "flip/crop/resize query images",
    "log_every": "iterations between metric log rows",
}


@dataclass
class TrainConfig:
    lr: float = 0.001
    momentum: float = 0.9
    lam: float = 1.0
    base_iterations: int = 3000
    finetune_iterations: int = 300
    inner_iterations: Union[int, str] = "auto"
    batch_query: int = 8
    support_per_class: int = 2
    shots: int = 3
    seed: int = 0
    split: int = 0
    max_margin: bool = True
    feature_filter: bool = True
    disturbance: bool = True
    filter_width: int = 32
    dist_ratio: float = 0.15
    dist_floor: float = 0.25
    target: str = "base_only"
    strategy: str = "gradient"
    augment: bool = True
    log_every: int = 10

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.lr > 0:
            raise ConfigError("lr", f"must be > 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum", f"must lie in [0, 1), got {self.momentum}")
        if not self.lam >= 0:
            raise ConfigError("lambda", f"must be >= 0, got {self.lam}")
        for key in ("base_iterations", "finetune_iterations", "batch_query", "support_per_class",
                    "shots", "filter_width", "log_every"):
            if getattr(self, key) < 1:
                raise ConfigError(key, f"must be >= 1, got {getattr(self, key)}")
        if self.inner_iterations != "auto" and (not isinstance(self.inner_iterations, int) or self.inner_iterations < 1):
            raise ConfigError("inner_iterations", f"must be 'auto' or >= 1, got {self.inner_iterations}")
        if self.split not in (0, 1, 2):
            raise ConfigError("split", f"must be 0, 1 or 2, got {self.split}")
        if self.seed < 0:
            raise ConfigError("seed", f"must be >= 0, got {self.seed}")
        try:
            self.disturbance_config()
        except ValueError as exc:
            key = "dist_ratio" if "ratio" in str(exc) else "dist_floor" if "floor" in str(exc) else \
                "target" if "target" in str(exc) else "strategy"
            raise ConfigError(key, str(exc)) from None

    @property
    def rounds(self) -> int:
        return self.shots if self.inner_iterations == "auto" else int(self.inner_iterations)

    def disturbance_config(self) -> DisturbanceConfig:
        return DisturbanceConfig(self.dist_ratio, self.dist_floor, self.target, self.strategy)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    # -- text form ---------------------------------------------------------

    def to_items(self) -> list[tuple[str, str]]:
        out = []
        for f in fields(self):
            out.append((_external(f.name), _format(getattr(self, f.name))))
        return sorted(out)

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.to_items())

    @classmethod
    def from_mapping(cls, values: Mapping[str, str], base: Optional["TrainConfig"] = None) -> "TrainConfig":
        current = dataclasses.asdict(base or cls())
        types = {f.name: f.type for f in fields(cls)}
        for key, raw in values.items():
            name = _internal(key)
            if name not in types:
                raise ConfigError(key, "unknown key")
            current[name] = _parse(key, name, raw, types[name])
        return cls(**current)

    @classmethod
    def from_text(cls, text: str, base: Optional["TrainConfig"] = None) -> "TrainConfig":
        return cls.from_mapping(parse_key_values(text), base)

    @classmethod
    def from_file(cls, path, base: Optional["TrainConfig"] = None) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"), base)


def help_lines() -> list[str]:
    d = TrainConfig()
    return [f"{k} = {v}    # {KEY_HELP[k]}" for k, v in d.to_items()]


def config_keys() -> list[str]:
    return [_external(f.name) for f in fields(TrainConfig)]


def _external(name: str) -> str:
    return "lambda" if name == "lam" else name


def _internal(key: str) -> str:
    return "lam" if key == "lambda" else key


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(key: str, name: str, raw, typ):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if typ in ("bool", bool):
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if typ in ("float", float):
            return float(text)
        if typ in ("int", int):
            return int(text)
        if name == "inner_iterations":
            return "auto" if text == "auto" else int(text)
        return text
    except ValueError:
        raise ConfigError(key, f"cannot parse value {raw!r}") from None


def parse_key_values(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; blank lines are ignored."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out

"""Flat ``key = value`` run configuration.

One key per line, ``#`` starts a comment. Unknown keys are an error so a typo
never silently falls back to a default. Example::

    strategy = bidrop-full
    k = 2
    p = 0.75
    dataset = xor
    label_noise = 0.1
    seeds = 0-9
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
import hashlib
import json
from pathlib import Path

from .model import ACTIVATIONS, LOSSES
from .selection import StrategyConfig


class ConfigError(ValueError):
    pass


DATASETS = ("xor", "blobs", "csv")


@dataclass(frozen=True)
class TrainConfig:
    name: str = "run"
    # sub-net selection
    strategy: str = "bidrop-full"
    p: float = 0.75
    eps_den: float = 1e-8
    fisher_window: int = 16
    k: int = 2
    # optimisation
    batch_size: int = 32
    double_batch: bool = False
    epochs: int = 0
    max_steps: int = 2000
    eval_every: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    # model
    hidden: str = "32,32"
    activation: str = "relu"
    keep_prob: float = 0.9
    loss: str = "softmax-cross-entropy"
    # data
    dataset: str = "xor"
    n_train: int = 400
    n_dev: int = 400
    noise_std: float = 0.5
    separation: float = 2.0
    dim: int = 2
    train_csv: str = ""
    dev_csv: str = ""
    data_seed: int = 0
    label_noise: float = 0.0
    imbalance: float = 0.0
    minority_class: int = 1
    subsample: int = 0
    # repetitions
    seeds: str = "0-9"

    def __post_init__(self):
        try:
            self.strategy_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        checks = [
            (self.k >= 1, "k must be >= 1"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.epochs >= 0 and self.max_steps >= 0, "epochs and max_steps must be >= 0"),
            (self.epochs > 0 or self.max_steps > 0, "set epochs or max_steps"),
            (self.eval_every >= 0, "eval_every must be >= 0"),
            (self.lr > 0 and self.eps_adam > 0, "lr and eps_adam must be positive"),
            (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1, "beta1 and beta2 must lie in [0, 1)"),
            (self.activation in ACTIVATIONS, f"activation must be one of {ACTIVATIONS}"),
            (self.loss in LOSSES, f"loss must be one of {LOSSES}"),
            (0 < self.keep_prob <= 1, "keep_prob must lie in (0, 1]"),
            (self.dataset in DATASETS, f"dataset must be one of {DATASETS}"),
            (self.dataset != "csv" or bool(self.train_csv and self.dev_csv), "csv dataset needs train_csv and dev_csv"),
            (0 <= self.label_noise <= 1, "label_noise must lie in [0, 1]"),
            (0 <= self.imbalance < 1, "imbalance must lie in [0, 1)"),
            (self.subsample >= 0, "subsample must be >= 0"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        self.hidden_sizes()
        self.seed_list()

    def strategy_config(self) -> StrategyConfig:
        return StrategyConfig(self.strategy, self.p, self.eps_den, self.fisher_window)

    def hidden_sizes(self) -> list[int]:
        if not self.hidden.strip():
            return []
        try:
            sizes = [int(s) for s in self.hidden.split(",")]
        except ValueError:
            raise ConfigError(f"hidden must be comma-separated integers, got {self.hidden!r}") from None
        if any(s < 1 for s in sizes):
            raise ConfigError("hidden layer sizes must be positive")
        return sizes

    def seed_list(self) -> list[int]:
        return parse_seeds(self.seeds)

    @property
    def effective_batch_size(self) -> int:
        return self.batch_size * (2 if self.double_batch else 1)

    def to_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()

    def override(self, **changes) -> "TrainConfig":
        unknown = set(changes) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        return replace(self, **changes)


def parse_seeds(text: str) -> list[int]:
    """``"0-9"`` or ``"1,4,7"`` or a mix like ``"0-2,5"``."""
    seeds: list[int] = []
    try:
        for part in text.split(","):
            part = part.strip()
            if not part:
                continue
            if "-" in part:
                lo, hi = (int(x) for x in part.split("-", 1))
                if hi < lo:
                    raise ValueError
                seeds.extend(range(lo, hi + 1))
            else:
                seeds.append(int(part))
    except ValueError:
        raise ConfigError(f"cannot parse seeds {text!r}") from None
    if not seeds or any(s < 0 for s in seeds):
        raise ConfigError("seeds must be a non-empty list of non-negative integers")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds must not repeat")
    return seeds


def _coerce(name: str, kind, raw: str):
    if kind is bool or kind == "bool":
        lowered = raw.lower()
        if lowered in ("true", "yes", "1", "on"):
            return True
        if lowered in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    if kind is int or kind == "int":
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{name}: expected an integer, got {raw!r}") from None
    if kind is float or kind == "float":
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{name}: expected a number, got {raw!r}") from None
    return raw


def parse_config(text: str, source: str = "<config>") -> TrainConfig:
    types = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = _coerce(key, types[key], value)
    return TrainConfig(**values)


def load_config(path) -> TrainConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror or exc}") from None
    return parse_config(text, str(path))


def format_config(config: TrainConfig) -> str:
    lines = []
    for key, value in config.to_dict().items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"

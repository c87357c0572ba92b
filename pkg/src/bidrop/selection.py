"""Parameter scoring and sub-net masks.

All functions take and return dicts of named float64 arrays laid out like the
model parameters. Selection is global: the top fraction is taken over the
concatenation of every tensor in insertion order, with ties at the threshold
going to the smaller flat index.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
import json

import numpy as np

from .tensor import (
    DTYPE,
    RngStream,
    check_same_layout,
    kept_count,
    flatten,
    ones_like,
    total_size,
    unflatten,
)

STRATEGIES = (
    "bidrop-full",
    "bidrop-perturbation-only",
    "bidrop-scaling-only",
    "gavg-only",
    "random-subnet",
    "static-fisher",
    "dynamic-fisher",
    "full-net",
)
BIDROP_KINDS = ("bidrop-full", "bidrop-perturbation-only", "bidrop-scaling-only")
FULL_MASK_KINDS = ("gavg-only", "full-net")

DEFAULT_P = 0.75
DEFAULT_EPS_DEN = 1e-8
DEFAULT_FISHER_WINDOW = 16


class MissingContextError(ValueError):
    pass


@dataclass
class SubnetMask:
    masks: dict[str, np.ndarray]

    @property
    def selected_count(self) -> int:
        return int(sum(int(m.sum()) for m in self.masks.values()))

    @property
    def size(self) -> int:
        return total_size(self.masks)

    def flat(self) -> np.ndarray:
        return flatten(self.masks)

    def churn(self, other: "SubnetMask") -> float:
        """Fraction of mask bits that differ from ``other``."""
        a, b = self.flat(), other.flat()
        if a.size != b.size:
            raise ValueError("masks cover different parameter counts")
        return float(np.count_nonzero(a != b)) / a.size

    @classmethod
    def full(cls, like: dict) -> "SubnetMask":
        return cls(ones_like(like))


def _check_samples(samples) -> None:
    if len(samples) == 0:
        raise ValueError("need at least one gradient sample")
    for g in samples[1:]:
        check_same_layout(samples[0], g, "gradient samples")


def mean_gradient(samples) -> dict[str, np.ndarray]:
    _check_samples(samples)
    k = len(samples)
    return {name: sum(g[name] for g in samples) / k for name in samples[0]}


def perturbation_factor(samples, mu, eps_den: float = DEFAULT_EPS_DEN) -> dict[str, np.ndarray]:
    """``|mu| / (sqrt(sum_j (g_j - mu)^2) + eps_den)``.

    The denominator is the root of the summed squared deviations, not divided
    by k. High values mark parameters whose gradient is consistent across the
    dropout passes.
    """
    _check_samples(samples)
    check_same_layout(samples[0], mu, "gradient samples and mean")
    out = {}
    for name, m in mu.items():
        dev = sum((g[name] - m) ** 2 for g in samples)
        out[name] = np.abs(m) / (np.sqrt(dev) + eps_den)
    return out


def scaling_factor(mu, params, eps_den: float = DEFAULT_EPS_DEN) -> dict[str, np.ndarray]:
    check_same_layout(mu, params, "mean gradient and parameters")
    return {name: np.abs(m) / (np.abs(params[name]) + eps_den) for name, m in mu.items()}


def final_score(f_per, f_sca) -> dict[str, np.ndarray]:
    check_same_layout(f_per, f_sca, "factors")
    return {name: f_per[name] * f_sca[name] for name in f_per}


def keep_count(p: float, n: int) -> int:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"p must lie in [0, 1), got {p}")
    return kept_count(p, n)


def select_subnet(scores, p: float) -> SubnetMask:
    """Keep the ``ceil((1 - p) * n)`` highest scores over all tensors."""
    flat = flatten(scores)
    n = flat.size
    count = keep_count(p, n)
    if not np.all(np.isfinite(flat)):
        raise ValueError("scores must be finite")
    chosen = np.zeros(n, dtype=DTYPE)
    if count == n:
        chosen[:] = 1.0
    else:
        # stable sort on negated scores: descending, equal scores in index order
        order = np.argsort(-flat, kind="stable")
        chosen[order[:count]] = 1.0
    return SubnetMask(unflatten(chosen, scores))


def random_subnet(like: dict, p: float, rng: RngStream) -> SubnetMask:
    n = total_size(like)
    chosen = np.zeros(n, dtype=DTYPE)
    chosen[rng.choice(n, keep_count(p, n))] = 1.0
    return SubnetMask(unflatten(chosen, like))


def accumulate_fisher(batch_grads) -> dict[str, np.ndarray]:
    """Sum of squared gradients over a stream of per-batch gradient dicts."""
    fisher = None
    for g in batch_grads:
        if fisher is None:
            fisher = {name: np.zeros_like(t, dtype=DTYPE) for name, t in g.items()}
        else:
            check_same_layout(fisher, g, "batch gradients")
        for name, t in g.items():
            fisher[name] += t * t
    if fisher is None:
        raise ValueError("fisher accumulation needs at least one batch gradient")
    return fisher


@dataclass(frozen=True)
class StrategyConfig:
    kind: str = "bidrop-full"
    p: float = DEFAULT_P
    eps_den: float = DEFAULT_EPS_DEN
    fisher_window: int = DEFAULT_FISHER_WINDOW

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.kind!r}; expected one of {', '.join(STRATEGIES)}")
        if not 0.0 <= self.p < 1.0:
            raise ValueError(f"p must lie in [0, 1), got {self.p}")
        if not self.eps_den > 0:
            raise ValueError("eps_den must be positive")
        if self.fisher_window < 1:
            raise ValueError("fisher_window must be a positive integer")


@dataclass
class StepContext:
    """Inputs a strategy may need at one step.

    ``samples`` are the k per-pass gradients; ``fisher_batches`` is a callable
    returning an iterable of per-batch gradients over the training data at the
    current parameters (used once by static-fisher).
    """

    step: int
    params: dict | None = None
    samples: list | None = None
    rng: RngStream | None = None
    fisher_batches: object = None


@dataclass
class SubnetSelector:
    """Produces the update mask for each training step under one strategy."""

    config: StrategyConfig
    static_mask: SubnetMask | None = None
    window: deque = field(default_factory=deque)
    current: SubnetMask | None = None

    def __post_init__(self):
        self.window = deque(maxlen=self.config.fisher_window)

    def scores(self, ctx: StepContext) -> dict[str, np.ndarray]:
        """Importance scores used by the bidrop kinds."""
        if ctx.samples is None or ctx.params is None:
            raise MissingContextError(f"{self.config.kind} needs gradient samples and parameters")
        eps = self.config.eps_den
        mu = mean_gradient(ctx.samples)
        if self.config.kind == "bidrop-scaling-only":
            return scaling_factor(mu, ctx.params, eps)
        f_per = perturbation_factor(ctx.samples, mu, eps)
        if self.config.kind == "bidrop-perturbation-only":
            return f_per
        return final_score(f_per, scaling_factor(mu, ctx.params, eps))

    def mask(self, ctx: StepContext) -> SubnetMask:
        kind = self.config.kind
        p = self.config.p
        if kind in BIDROP_KINDS:
            mask = select_subnet(self.scores(ctx), p)
        elif kind in FULL_MASK_KINDS:
            like = ctx.params if ctx.params is not None else (ctx.samples or [None])[0]
            if like is None:
                raise MissingContextError(f"{kind} needs parameters to shape its mask")
            mask = SubnetMask.full(like)
        elif kind == "random-subnet":
            if ctx.rng is None or ctx.params is None:
                raise MissingContextError("random-subnet needs an RngStream and parameters")
            mask = random_subnet(ctx.params, p, ctx.rng)
        elif kind == "static-fisher":
            if self.static_mask is None:
                if ctx.fisher_batches is None:
                    raise MissingContextError("static-fisher needs fisher_batches on its first step")
                self.static_mask = select_subnet(accumulate_fisher(ctx.fisher_batches()), p)
            mask = self.static_mask
        else:  # dynamic-fisher
            if ctx.samples is None:
                raise MissingContextError("dynamic-fisher needs this step's gradient samples")
            self.window.append(mean_gradient(ctx.samples))
            if self.current is None or ctx.step % self.config.fisher_window == 0:
                mask = select_subnet(accumulate_fisher(self.window), p)
            else:
                mask = self.current
        self.current = mask
        return mask


def strategy_mask(strategy: StrategyConfig, ctx: StepContext, selector: SubnetSelector | None = None) -> SubnetMask:
    """One-shot convenience wrapper; keep a ``SubnetSelector`` for stateful kinds."""
    selector = selector or SubnetSelector(strategy)
    return selector.mask(ctx)


# -- mask dumps ----------------------------------------------------------------


def dump_mask(mask: SubnetMask, path) -> None:
    """Write one JSON object per line: name, shape and the row-major mask bits
    packed MSB-first (``numpy.packbits``) as a hex string."""
    lines = []
    for name, m in mask.masks.items():
        bits = np.packbits(m.ravel().astype(np.uint8))
        lines.append(json.dumps({"name": name, "shape": list(m.shape), "bits": bits.tobytes().hex()}, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n")


def load_mask(path) -> SubnetMask:
    masks = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        entry = json.loads(line)
        size = int(np.prod(entry["shape"], dtype=np.int64))
        bits = np.unpackbits(np.frombuffer(bytes.fromhex(entry["bits"]), dtype=np.uint8))[:size]
        masks[entry["name"]] = bits.astype(DTYPE).reshape(entry["shape"])
    return SubnetMask(masks)

"""Masked parameter updates: Adam with a per-step sub-net mask, plain Adam, masked SGD."""

from __future__ import annotations

from dataclasses import dataclass, field
import json
from pathlib import Path

import numpy as np

from .tensor import DTYPE, check_same_layout

STATE_FORMAT = "bidrop-adam/1"


@dataclass
class UpdateRecord:
    step: int
    selected_count: int
    update_norms: dict[str, float]
    masked_grad_norm: float
    loss: float = float("nan")


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if not self.eps > 0 or not self.lr > 0:
            raise ValueError("lr and eps must be positive")

    @classmethod
    def for_params(cls, params: dict, **hyper) -> "AdamState":
        state = cls(**hyper)
        state.m = {name: np.zeros_like(p, dtype=DTYPE) for name, p in params.items()}
        state.v = {name: np.zeros_like(p, dtype=DTYPE) for name, p in params.items()}
        return state

    def check_ready(self, params: dict) -> None:
        if not self.m or not self.v:
            raise ValueError("optimizer state is not initialised; use AdamState.for_params")
        check_same_layout(params, self.m, "parameters and first moments")
        check_same_layout(params, self.v, "parameters and second moments")

    def to_dict(self) -> dict:
        def pack(tensors):
            return [{"name": n, "shape": list(t.shape), "values": t.ravel().tolist()} for n, t in tensors.items()]

        return {
            "format": STATE_FORMAT,
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "t": self.t,
            "m": pack(self.m),
            "v": pack(self.v),
        }

    @classmethod
    def from_dict(cls, blob: dict) -> "AdamState":
        if blob.get("format") != STATE_FORMAT:
            raise ValueError(f"unsupported optimizer state format {blob.get('format')!r}")

        def unpack(entries):
            return {e["name"]: np.asarray(e["values"], dtype=DTYPE).reshape(e["shape"]) for e in entries}

        return cls(
            lr=blob["lr"], beta1=blob["beta1"], beta2=blob["beta2"], eps=blob["eps"],
            t=blob["t"], m=unpack(blob["m"]), v=unpack(blob["v"]),
        )


def save_state(state: AdamState, path) -> None:
    Path(path).write_text(json.dumps(state.to_dict(), sort_keys=True))


def load_state(path) -> AdamState:
    return AdamState.from_dict(json.loads(Path(path).read_text()))


def _norm(x: np.ndarray) -> float:
    return float(np.sqrt(np.sum(x * x)))


def masked_adam_step(params: dict, grads: dict, mask, state: AdamState) -> UpdateRecord:
    """Adam step on ``grads * mask``; updates ``params`` and ``state`` in place.

    Masked-out entries feed a zero gradient into the moments, so their moments
    decay rather than freeze, and bias correction always uses the global t.
    """
    masks = mask.masks if hasattr(mask, "masks") else mask
    state.check_ready(params)
    check_same_layout(params, grads, "parameters and gradients")
    check_same_layout(params, masks, "parameters and mask")
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    norms = {}
    grad_sq = 0.0
    selected = 0
    for name, theta in params.items():
        g = grads[name] * masks[name]
        selected += int(masks[name].sum())
        grad_sq += float(np.sum(g * g))
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        update = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        theta -= update
        norms[name] = _norm(update)
    return UpdateRecord(t, selected, norms, float(np.sqrt(grad_sq)))


def reference_adam_step(params: dict, grads: dict, state: AdamState) -> UpdateRecord:
    """Unmasked Adam, written independently of ``masked_adam_step``."""
    state.check_ready(params)
    check_same_layout(params, grads, "parameters and gradients")
    state.t += 1
    norms = {}
    total = 0.0
    for name in params:
        g = grads[name]
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        m_hat = state.m[name] / (1.0 - state.beta1**state.t)
        v_hat = state.v[name] / (1.0 - state.beta2**state.t)
        delta = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        params[name] -= delta
        norms[name] = _norm(delta)
        total += float(np.sum(g * g))
    count = sum(int(p.size) for p in params.values())
    return UpdateRecord(state.t, count, norms, float(np.sqrt(total)))


def masked_sgd_step(params: dict, grads: dict, mask, lr: float, step: int = 0) -> UpdateRecord:
    masks = mask.masks if hasattr(mask, "masks") else mask
    check_same_layout(params, grads, "parameters and gradients")
    check_same_layout(params, masks, "parameters and mask")
    norms = {}
    grad_sq = 0.0
    for name, theta in params.items():
        g = grads[name] * masks[name]
        grad_sq += float(np.sum(g * g))
        update = lr * g
        theta -= update
        norms[name] = _norm(update)
    selected = int(sum(int(m.sum()) for m in masks.values()))
    return UpdateRecord(step, selected, norms, float(np.sqrt(grad_sq)))

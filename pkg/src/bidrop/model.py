"""Multilayer perceptron with explicit forward/backward passes.

Parameters live in ``Mlp.params``, an ordered dict ``{"layer0.weight": W0,
"layer0.bias": b0, ...}`` where weights are ``[fan_in, fan_out]``. Dropout is
applied after every hidden activation (never on inputs or on the output
layer) using inverted scaling.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import json
import math
from pathlib import Path

import numpy as np

from .tensor import (
    DTYPE,
    DropoutMask,
    RngStream,
    ShapeMismatchError,
    apply_inverted_dropout,
    sample_dropout_mask,
)

ACTIVATIONS = ("relu", "tanh", "identity")
LOSSES = ("softmax-cross-entropy", "mean-squared-error")
CHECKPOINT_FORMAT = "bidrop-mlp/1"


def _activate(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(kind: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return (z > 0).astype(DTYPE)
    if kind == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


@dataclass
class ForwardTrace:
    """Everything the backward pass needs to differentiate one forward pass."""

    inputs: list[np.ndarray] = field(default_factory=list)  # input to each layer
    pre_activations: list[np.ndarray] = field(default_factory=list)
    activations: list[np.ndarray] = field(default_factory=list)  # before dropout
    masks: list[DropoutMask | None] = field(default_factory=list)


class Mlp:
    """Dense network ``d_in -> hidden... -> d_out``.

    ``activation`` applies to every hidden layer; the output layer is linear.
    ``keep_prob`` is the dropout keep probability at every hidden layer.
    """

    def __init__(self, sizes, activation: str = "relu", keep_prob: float = 1.0, rng: RngStream | None = None):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ValueError(f"layer sizes must be >= 2 positive integers, got {sizes}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if not 0.0 < keep_prob <= 1.0:
            raise ValueError(f"keep_prob must lie in (0, 1], got {keep_prob}")
        self.sizes = sizes
        self.activation = activation
        self.keep_prob = float(keep_prob)
        self.params: dict[str, np.ndarray] = {}
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            self.params[f"layer{i}.weight"] = np.zeros((fan_in, fan_out), dtype=DTYPE)
            self.params[f"layer{i}.bias"] = np.zeros(fan_out, dtype=DTYPE)
        if rng is not None:
            self.init_params(rng)

    @property
    def num_layers(self) -> int:
        return len(self.sizes) - 1

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def init_params(self, rng: RngStream) -> None:
        """Glorot-uniform weights, zero biases."""
        for i in range(self.num_layers):
            fan_in, fan_out = self.sizes[i], self.sizes[i + 1]
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform((fan_in, fan_out)) * 2.0 * limit - limit
            self.params[f"layer{i}.weight"][...] = w
            self.params[f"layer{i}.bias"][...] = 0.0

    def weight(self, i: int) -> np.ndarray:
        return self.params[f"layer{i}.weight"]

    def bias(self, i: int) -> np.ndarray:
        return self.params[f"layer{i}.bias"]

    def forward(self, x, rng: RngStream | None = None, train: bool = False, masks=None):
        """Return ``(logits, trace)``.

        In train mode a fresh dropout mask is drawn from ``rng`` at each hidden
        layer unless ``masks`` (e.g. ``trace.masks`` of an earlier pass) is
        given, in which case those masks are reused. Eval mode never touches
        the RNG.
        """
        x = np.asarray(x, dtype=DTYPE)
        if x.ndim != 2 or x.shape[1] != self.sizes[0]:
            raise ShapeMismatchError(f"expected inputs of shape [B, {self.sizes[0]}], got {x.shape}")
        trace = ForwardTrace()
        h = x
        last = self.num_layers - 1
        for i in range(self.num_layers):
            trace.inputs.append(h)
            z = h @ self.weight(i) + self.bias(i)
            trace.pre_activations.append(z)
            if i == last:
                trace.activations.append(z)
                trace.masks.append(None)
                h = z
                break
            a = _activate(self.activation, z)
            trace.activations.append(a)
            mask = None
            if train and masks is not None:
                mask = masks[i]
            elif train and self.keep_prob < 1.0:
                if rng is None:
                    raise ValueError("train-mode forward with dropout needs an RngStream")
                mask = sample_dropout_mask(rng, a.shape, self.keep_prob)
            trace.masks.append(mask)
            h = apply_inverted_dropout(a, mask) if mask is not None else a
        return h, trace

    def backward(self, trace: ForwardTrace, grad_logits: np.ndarray) -> dict[str, np.ndarray]:
        grads: dict[str, np.ndarray] = {}
        delta = grad_logits
        for i in reversed(range(self.num_layers)):
            grads[f"layer{i}.weight"] = trace.inputs[i].T @ delta
            grads[f"layer{i}.bias"] = delta.sum(axis=0)
            if i == 0:
                break
            dh = delta @ self.weight(i).T
            prev_mask = trace.masks[i - 1]
            if prev_mask is not None:
                dh = dh * prev_mask.mask / prev_mask.keep_prob
            delta = dh * _activation_grad(self.activation, trace.pre_activations[i - 1], trace.activations[i - 1])
        return {name: grads[name] for name in self.params}

    def copy(self) -> "Mlp":
        clone = Mlp(self.sizes, self.activation, self.keep_prob)
        for name, p in self.params.items():
            clone.params[name][...] = p
        return clone

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "sizes": list(self.sizes),
            "activation": self.activation,
            "keep_prob": self.keep_prob,
            "params": [
                {"name": name, "shape": list(p.shape), "values": p.ravel().tolist()}
                for name, p in self.params.items()
            ],
        }

    @classmethod
    def from_dict(cls, blob: dict) -> "Mlp":
        if blob.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {blob.get('format')!r}")
        model = cls(blob["sizes"], blob["activation"], blob["keep_prob"])
        for entry in blob["params"]:
            name = entry["name"]
            if name not in model.params:
                raise ValueError(f"checkpoint has unknown parameter {name!r}")
            target = model.params[name]
            if list(target.shape) != list(entry["shape"]):
                raise ShapeMismatchError(f"{name}: checkpoint shape {entry['shape']} vs model {list(target.shape)}")
            target[...] = np.asarray(entry["values"], dtype=DTYPE).reshape(target.shape)
        return model


def save_checkpoint(model: Mlp, path) -> None:
    """Write the model as JSON: sizes, activation, keep_prob and a list of
    ``{name, shape, values}`` parameter entries with row-major values."""
    Path(path).write_text(json.dumps(model.to_dict(), sort_keys=True))


def load_checkpoint(path) -> Mlp:
    return Mlp.from_dict(json.loads(Path(path).read_text()))


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss_value_and_logit_grad(logits: np.ndarray, targets, loss: str):
    """Mean-over-batch loss and its gradient with respect to the logits."""
    batch = logits.shape[0]
    if loss == "softmax-cross-entropy":
        targets = np.asarray(targets)
        if targets.shape != (batch,):
            raise ShapeMismatchError(f"targets shape {targets.shape} does not match batch {batch}")
        if not np.issubdtype(targets.dtype, np.integer):
            if not np.all(targets == np.round(targets)):
                raise ValueError("cross-entropy targets must be integer class ids")
            targets = targets.astype(np.int64)
        num_classes = logits.shape[1]
        if np.any(targets < 0) or np.any(targets >= num_classes):
            raise ValueError(f"class index out of range [0, {num_classes})")
        logp = _log_softmax(logits)
        rows = np.arange(batch)
        value = -logp[rows, targets].mean()
        grad = np.exp(logp)
        grad[rows, targets] -= 1.0
        return float(value), grad / batch
    if loss == "mean-squared-error":
        targets = np.asarray(targets, dtype=DTYPE)
        if targets.ndim == 1:
            targets = targets[:, None]
        if targets.shape != logits.shape:
            raise ShapeMismatchError(f"targets shape {targets.shape} does not match outputs {logits.shape}")
        diff = logits - targets
        # per example: sum of squared errors over outputs; then batch mean
        value = float((diff * diff).sum(axis=1).mean())
        return value, 2.0 * diff / batch
    raise ValueError(f"unknown loss {loss!r}")


def loss_and_grad(model: Mlp, trace: ForwardTrace, logits: np.ndarray, targets, loss: str):
    """Exact gradient of the batch-mean loss for the pass recorded in ``trace``."""
    value, grad_logits = loss_value_and_logit_grad(logits, targets, loss)
    return value, model.backward(trace, grad_logits)


# -- metrics -------------------------------------------------------------------


def confusion_counts(pred: np.ndarray, target: np.ndarray, positive: int = 1):
    pred = np.asarray(pred) == positive
    target = np.asarray(target) == positive
    tp = int(np.sum(pred & target))
    tn = int(np.sum(~pred & ~target))
    fp = int(np.sum(pred & ~target))
    fn = int(np.sum(~pred & target))
    return tp, tn, fp, fn


def matthews_corrcoef(tp: int, tn: int, fp: int, fn: int) -> float:
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom == 0:
        return 0.0
    return (tp * tn - fp * fn) / math.sqrt(denom)


def multiclass_mcc(pred: np.ndarray, target: np.ndarray, num_classes: int) -> float:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (target, pred), 1)
    t_k = cm.sum(axis=1).astype(float)
    p_k = cm.sum(axis=0).astype(float)
    c = float(np.trace(cm))
    s = float(cm.sum())
    cov_ytyp = c * s - t_k @ p_k
    cov_ypyp = s * s - p_k @ p_k
    cov_ytyt = s * s - t_k @ t_k
    if cov_ypyp * cov_ytyt == 0:
        return 0.0
    return cov_ytyp / math.sqrt(cov_ytyt * cov_ypyp)


def f1_score(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2 * tp / denom


def classification_metrics(pred, target, num_classes: int, minority_class: int = 1) -> dict:
    pred = np.asarray(pred, dtype=np.int64)
    target = np.asarray(target, dtype=np.int64)
    if pred.size == 0:
        raise ValueError("cannot compute metrics on an empty split")
    metrics = {"accuracy": float(np.mean(pred == target))}
    if num_classes == 2:
        tp, tn, fp, fn = confusion_counts(pred, target, positive=1)
        metrics["f1"] = f1_score(tp, fp, fn)
        metrics["mcc"] = matthews_corrcoef(tp, tn, fp, fn)
    else:
        metrics["mcc"] = multiclass_mcc(pred, target, num_classes)
    in_class = target == minority_class
    if np.any(in_class):
        metrics["minority_accuracy"] = float(np.mean(pred[in_class] == minority_class))
    return metrics


def predict_metrics(model: Mlp, dataset, minority_class: int = 1) -> dict:
    """Eval-mode metrics on a split; never consumes randomness or mutates the model."""
    if len(dataset) == 0:
        raise ValueError("cannot compute metrics on an empty split")
    logits, _ = model.forward(dataset.features, train=False)
    if dataset.task == "regression":
        diff = logits[:, 0] - np.asarray(dataset.targets, dtype=DTYPE)
        return {"mse": float(np.mean(diff * diff))}
    pred = np.argmax(logits, axis=1)
    return classification_metrics(pred, dataset.targets, dataset.num_classes, minority_class)

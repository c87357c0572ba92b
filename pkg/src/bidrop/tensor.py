"""Dense float64 arithmetic, seeded random streams and dropout masks.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Collections of
named tensors (parameters, gradients, scores, masks) are ordinary dicts keyed
by parameter name; insertion order defines the global flat ordering used by
sub-net selection.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
import math

import numpy as np

DTYPE = np.float64


class ShapeMismatchError(ValueError):
    pass


class NumericError(ArithmeticError):
    """Raised when arithmetic on finite inputs would produce inf or nan."""


def as_tensor(x) -> np.ndarray:
    return np.array(x, dtype=DTYPE)


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "operands") -> None:
    if np.shape(a) != np.shape(b):
        raise ShapeMismatchError(f"{what} have shapes {np.shape(a)} and {np.shape(b)}")


_OPS = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
}


def elementwise(kind: str, a, b) -> np.ndarray:
    """Apply ``add``, ``sub``, ``mul`` or ``div`` positionwise.

    No broadcasting: both operands must have exactly the same shape.
    """
    if kind not in _OPS:
        raise ValueError(f"unknown elementwise op {kind!r}")
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    check_same_shape(a, b)
    if kind == "div" and np.any(b == 0):
        raise ZeroDivisionError("division by zero in elementwise div")
    try:
        with np.errstate(over="raise", invalid="raise"):
            out = _OPS[kind](a, b)
    except FloatingPointError as exc:
        raise NumericError(f"elementwise {kind} overflowed") from exc
    return out


def add(a, b):
    return elementwise("add", a, b)


def sub(a, b):
    return elementwise("sub", a, b)


def mul(a, b):
    return elementwise("mul", a, b)


def div(a, b):
    return elementwise("div", a, b)


def exact_fraction(x: float) -> Fraction:
    # Shortest repr of the float, so 0.7 means 7/10 and not 0.69999...
    return Fraction(repr(float(x)))


def kept_count(ratio: float, n: int) -> int:
    """``ceil((1 - ratio) * n)`` evaluated without binary rounding artefacts.

    In floats ``(1 - 0.7) * 10`` is 3.0000000000000004 and would round up to 4.
    """
    return math.ceil((1 - exact_fraction(ratio)) * n)


def floor_count(fraction: float, n: int) -> int:
    return math.floor(exact_fraction(fraction) * n)


class RngStream:
    """Seeded random stream backed by the Philox4x64-10 counter-based generator.

    The key is derived from ``(seed, stream)`` through numpy's ``SeedSequence``
    hash, which is specified bit-exactly and platform independent, so draws are
    identical everywhere. Distinct ``stream`` ids give statistically
    independent sequences for the same seed.
    """

    def __init__(self, seed: int, stream: int = 0):
        if not 0 <= seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self.stream = int(stream)
        self._bitgen = np.random.Philox(np.random.SeedSequence([self.seed, self.stream]))
        self.generator = np.random.Generator(self._bitgen)

    @property
    def position(self) -> int:
        """Number of 64-bit words consumed so far; never decreases."""
        state = self._bitgen.state["state"]
        counter = state["counter"]
        pos = 0
        for i, word in enumerate(counter):
            pos |= int(word) << (64 * i)
        return pos * 4 - (4 - int(self._bitgen.state["buffer_pos"]))

    def spawn(self, stream: int) -> "RngStream":
        return RngStream(self.seed, stream)

    def uniform(self, size=None) -> np.ndarray:
        return self.generator.random(size)

    def normal(self, size=None) -> np.ndarray:
        return self.generator.standard_normal(size)

    def integers(self, low: int, high: int, size=None):
        return self.generator.integers(low, high, size=size)

    def choice(self, n: int, size: int) -> np.ndarray:
        """``size`` distinct indices from ``range(n)``, in random order."""
        return self.generator.choice(n, size=size, replace=False)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)


@dataclass(frozen=True)
class DropoutMask:
    keep_prob: float
    mask: np.ndarray

    @property
    def shape(self):
        return self.mask.shape


def sample_dropout_mask(rng: RngStream, shape, keep_prob: float) -> DropoutMask:
    """Fresh Bernoulli(keep_prob) 0/1 mask; every call draws new bits."""
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError(f"keep_prob must lie in (0, 1], got {keep_prob}")
    if keep_prob == 1.0:
        return DropoutMask(1.0, np.ones(shape, dtype=DTYPE))
    bits = (rng.uniform(shape) < keep_prob).astype(DTYPE)
    return DropoutMask(float(keep_prob), bits)


def apply_inverted_dropout(x: np.ndarray, mask: DropoutMask) -> np.ndarray:
    check_same_shape(x, mask.mask, "activation and dropout mask")
    if mask.keep_prob == 1.0:
        return np.array(x, dtype=DTYPE)
    return x * mask.mask / mask.keep_prob


# -- named tensor collections --------------------------------------------------


def check_same_layout(a: dict, b: dict, what: str = "collections") -> None:
    if list(a) != list(b):
        raise ShapeMismatchError(f"{what} have different tensor names: {list(a)} vs {list(b)}")
    for name in a:
        if np.shape(a[name]) != np.shape(b[name]):
            raise ShapeMismatchError(
                f"{what} disagree on {name!r}: {np.shape(a[name])} vs {np.shape(b[name])}"
            )


def total_size(tensors: dict) -> int:
    return sum(int(np.size(t)) for t in tensors.values())


def flatten(tensors: dict) -> np.ndarray:
    if not tensors:
        return np.zeros(0, dtype=DTYPE)
    return np.concatenate([np.ravel(t) for t in tensors.values()])


def unflatten(flat: np.ndarray, like: dict) -> dict:
    out = {}
    offset = 0
    for name, t in like.items():
        size = int(np.size(t))
        out[name] = np.array(flat[offset : offset + size]).reshape(np.shape(t))
        offset += size
    if offset != flat.size:
        raise ShapeMismatchError(f"flat buffer has {flat.size} entries, layout needs {offset}")
    return out


def zeros_like(tensors: dict) -> dict:
    return {name: np.zeros_like(t, dtype=DTYPE) for name, t in tensors.items()}


def ones_like(tensors: dict) -> dict:
    return {name: np.ones_like(t, dtype=DTYPE) for name, t in tensors.items()}

"""Numeric primitives shared by every other module.

Tensors are plain numpy arrays.  Training runs in float32 (``TRAIN_DTYPE``);
gradient checks, bound verification and the accountant run in float64
(``WIDE_DTYPE``).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace

import numpy as np

TRAIN_DTYPE = np.float32
WIDE_DTYPE = np.float64

_U64 = (1 << 64) - 1


class NumericDomainError(ValueError):
    """A tensor contained NaN or Inf where finite values are required."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ParameterError(ValueError):
    """A scalar parameter is outside its valid domain."""


def check_finite(*arrays, what="tensor"):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericDomainError(f"{what} contains non-finite values")


def l2_norm_flat(tensors) -> float:
    """Euclidean norm of the concatenation of every element of every tensor."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("l2_norm_flat needs at least one tensor")
    total = 0.0
    for t in tensors:
        a = np.asarray(t, dtype=WIDE_DTYPE)
        check_finite(a)
        total += float(np.dot(a.ravel(), a.ravel()))
    return math.sqrt(total)


def matmul(a, b):
    """Rank-2 matrix product with shape and finiteness checks."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    check_finite(a, b)
    return a @ b


# ---------------------------------------------------------------------------
# counter-based random streams


def _mix64(*parts) -> int:
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(repr(p).encode())
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


@dataclass(frozen=True)
class RngStream:
    """Immutable address into a Philox counter-mode generator.

    ``(seed, stream_id)`` is the Philox key and ``counter`` the block
    offset, so the same triple always yields the same numbers regardless of
    which thread or process draws them.
    """

    seed: int
    stream_id: int = 0
    counter: int = 0

    def __post_init__(self):
        for name in ("seed", "stream_id", "counter"):
            v = getattr(self, name)
            if not 0 <= v <= _U64:
                raise ParameterError(f"{name} must fit in 64 unsigned bits, got {v}")

    def derive(self, *tags) -> "RngStream":
        """Child stream keyed on ``tags`` (e.g. ``("noise", step)``)."""
        return RngStream(self.seed, _mix64(self.stream_id, *tags), 0)

    def advance(self, blocks: int) -> "RngStream":
        return replace(self, counter=(self.counter + blocks) & _U64)

    def bit_generator(self) -> np.random.Philox:
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        ctr = np.array([self.counter, 0, 0, 0], dtype=np.uint64)
        return np.random.Philox(key=key, counter=ctr)

    def raw(self, n: int) -> np.ndarray:
        """``n`` uint64 words starting at this stream's counter."""
        return self.bit_generator().random_raw(n)


def uniform(rng: RngStream, n: int) -> np.ndarray:
    """``n`` doubles in [0, 1) from the top 53 bits of each word."""
    return (rng.raw(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def gaussian_sample(rng: RngStream, shape, sigma: float, dtype=WIDE_DTYPE) -> np.ndarray:
    """i.i.d. N(0, sigma^2) via Box-Muller on the stream's uniforms."""
    if sigma < 0 or not math.isfinite(sigma):
        raise ParameterError(f"sigma must be finite and >= 0, got {sigma}")
    shape = tuple(int(s) for s in np.atleast_1d(shape)) if np.ndim(shape) else (int(shape),)
    n = int(np.prod(shape, dtype=np.int64))
    if sigma == 0:
        return np.zeros(shape, dtype=dtype)
    pairs = (n + 1) // 2
    u = uniform(rng, 2 * pairs)
    u1 = 1.0 - u[:pairs]  # (0, 1]: keeps log finite
    u2 = u[pairs:]
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    z = np.empty(2 * pairs)
    z[0::2] = r * np.cos(theta)
    z[1::2] = r * np.sin(theta)
    return (sigma * z[:n]).reshape(shape).astype(dtype, copy=False)

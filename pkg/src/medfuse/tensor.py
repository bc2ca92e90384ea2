"""Dense float64 tensors and the primitive numeric ops every layer uses.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in C (row-major)
order. The helpers here add the shape validation and the few conventions the
rest of the package relies on (lowest-index argmax, trailing-axis broadcast).

Random numbers come from :class:`Rng`, a counter-based SplitMix64 stream, so
that parameter initialisation, data generation and shuffling are reproducible
from the algorithm description alone:

* raw stream: output ``k`` (k = 1, 2, ...) of a generator seeded with ``s`` is
  ``mix64(s + k * 0x9E3779B97F4A7C15 mod 2**64)`` where ``mix64`` is the
  SplitMix64 finaliser ``z ^= z >> 30; z *= 0xBF58476D1CE4E5B9;
  z ^= z >> 27; z *= 0x94D049BB133111EB; z ^= z >> 31``.
* uniform in (0, 1]: ``((u >> 11) + 1) * 2**-53``.
* normal: Box-Muller on consecutive uniform pairs ``(u1, u2)``, emitting
  ``r cos(2 pi u2)`` then ``r sin(2 pi u2)`` with ``r = sqrt(-2 ln u1)``.
* integer below ``n``: ``u % n``.
"""

from __future__ import annotations

import numpy as np

Tensor = np.ndarray

GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MASK64 = (1 << 64) - 1

UNARY_KINDS = ("relu", "sigmoid", "tanh", "exp", "neg", "identity")


def _mix64(z: np.ndarray) -> np.ndarray:
    z = z.copy()
    z ^= z >> np.uint64(30)
    z *= np.uint64(0xBF58476D1CE4E5B9)
    z ^= z >> np.uint64(27)
    z *= np.uint64(0x94D049BB133111EB)
    z ^= z >> np.uint64(31)
    return z


def mix64(value: int) -> int:
    """SplitMix64 finaliser applied to one 64-bit integer."""
    return int(_mix64(np.array([value & _MASK64], dtype=np.uint64))[0])


def derive_seed(seed: int, *keys: int) -> int:
    """Fold integer keys into a seed: ``s = mix64(s ^ mix64(k + gamma))``."""
    s = seed & _MASK64
    for k in keys:
        s = mix64(s ^ mix64((k + GOLDEN_GAMMA) & _MASK64))
    return s


class Rng:
    """Counter-based SplitMix64 generator (see module docstring)."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def next_u64(self, n: int) -> np.ndarray:
        ks = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            states = np.uint64(self.seed) + ks * np.uint64(GOLDEN_GAMMA)
        return _mix64(states)

    def uniform(self, n: int) -> np.ndarray:
        u = self.next_u64(n)
        return ((u >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53

    def normal(self, n: int) -> np.ndarray:
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log(u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        out = np.empty((pairs, 2))
        out[:, 0] = r * np.cos(theta)
        out[:, 1] = r * np.sin(theta)
        return out.reshape(-1)[:n]

    def below(self, n: int) -> int:
        """One integer uniformly drawn from ``range(n)`` (modulo reduction)."""
        return int(self.next_u64(1)[0] % np.uint64(n))

    def permutation(self, n: int) -> list[int]:
        """Fisher-Yates shuffle of ``range(n)``, swapping i with ``below(i+1)``."""
        order = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            order[i], order[j] = order[j], order[i]
        return order


def check_shape(shape) -> tuple[int, ...]:
    dims = tuple(int(d) for d in shape)
    if not 1 <= len(dims) <= 4:
        raise ValueError(f"shape must have 1 to 4 dims, got {dims}")
    if any(d < 1 for d in dims):
        raise ValueError(f"shape extents must be >= 1, got {dims}")
    return dims


def tensor_full(shape, value: float) -> Tensor:
    return np.full(check_shape(shape), float(value), dtype=np.float64)


def rng_normal(shape, seed: int, std: float) -> Tensor:
    if not std > 0:
        raise ValueError(f"std must be positive, got {std}")
    dims = check_shape(shape)
    n = int(np.prod(dims))
    return (Rng(seed).normal(n) * std).reshape(dims)


def glorot_uniform(rng: Rng, shape, fan_in: int, fan_out: int) -> Tensor:
    dims = check_shape(shape)
    s = np.sqrt(6.0 / (fan_in + fan_out))
    u = rng.uniform(int(np.prod(dims)))
    return ((2.0 * u - 1.0) * s).reshape(dims)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return a @ b


def ew(kind: str, a: Tensor, b: Tensor) -> Tensor:
    """Element-wise add/sub/mul; ``b`` may be a vector matching ``a``'s last axis."""
    if a.shape != b.shape and not (b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]):
        raise ValueError(f"incompatible shapes for {kind}: {a.shape} and {b.shape}")
    if kind == "add":
        return a + b
    if kind == "sub":
        return a - b
    if kind == "mul":
        return a * b
    raise ValueError(f"unknown element-wise kind {kind!r}")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=np.result_type(x, np.float64))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def map_unary(kind: str, x: Tensor) -> Tensor:
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "exp":
        return np.exp(x)
    if kind == "neg":
        return -x
    if kind == "identity":
        return x.copy()
    raise ValueError(f"unknown unary kind {kind!r}")


def unary_grad(kind: str, y: Tensor, dy: Tensor) -> Tensor:
    """Back-propagate ``dy`` through activation ``kind`` given its output ``y``."""
    if kind == "relu":
        return dy * (y > 0)
    if kind == "sigmoid":
        return dy * y * (1.0 - y)
    if kind == "tanh":
        return dy * (1.0 - y * y)
    if kind == "exp":
        return dy * y
    if kind == "neg":
        return -dy
    if kind == "identity":
        return dy
    raise ValueError(f"unknown unary kind {kind!r}")


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} invalid for shape {x.shape}")
    return axis % x.ndim


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(y: Tensor, dy: Tensor, axis: int = -1) -> Tensor:
    return y * (dy - (dy * y).sum(axis=axis, keepdims=True))


def reduce(kind: str, x: Tensor, axis: int) -> Tensor:
    """Collapse ``axis``; ``argmax`` returns the lowest index on ties."""
    axis = _check_axis(x, axis)
    if kind == "sum":
        return x.sum(axis=axis)
    if kind == "mean":
        return x.mean(axis=axis)
    if kind == "max":
        return x.max(axis=axis)
    if kind == "argmax":
        # numpy's argmax already picks the first occurrence
        return np.argmax(x, axis=axis)
    raise ValueError(f"unknown reduction {kind!r}")


def argmax(v) -> int:
    return int(np.argmax(np.asarray(v)))

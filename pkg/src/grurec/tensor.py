"""Numeric substrate: activations, softmax, seeded RNG streams and the
finite-difference gradient oracle.

Arrays are plain numpy ndarrays. Precision is chosen once per run with
:func:`dtype_for` (float32 for training/inference, float64 for gradient
checks) and carried by the parameter arrays themselves.
"""

from __future__ import annotations

import zlib

import numpy as np

from grurec.errors import OracleError, ShapeError


def dtype_for(precision: int) -> np.dtype:
    if precision == 32:
        return np.dtype(np.float32)
    if precision == 64:
        return np.dtype(np.float64)
    raise ValueError(f"precision must be 32 or 64, got {precision}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Shape-checked 2-D matrix product."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    x = np.asarray(x)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


_ACTIVATIONS = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}


def activation(x: np.ndarray, kind: str) -> np.ndarray:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(np.asarray(x))


def softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    """Softmax along ``axis`` with max subtraction.

    ``-inf`` entries get exactly zero weight; at least one entry per slice
    must be finite.
    """
    v = np.asarray(v)
    shifted = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    v = np.asarray(v)
    shifted = v - np.max(v, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def check_finite(x: np.ndarray, what: str = "array") -> None:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {what}")


def _stream_word(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    part = int(part)
    if part < 0:
        raise ValueError("stream keys must be non-negative")
    return part


class SeededRng:
    """Counter-keyed random stream.

    A stream is identified by a 64-bit seed plus an arbitrary key path
    (ints or strings), e.g. ``SeededRng(seed, "augment", epoch, index)``.
    Equal keys give identical draws regardless of the order in which
    streams are created, which is what keeps augmentation reproducible
    when samples are processed in a different order or in parallel.
    """

    def __init__(self, seed: int, *stream):
        self.seed = int(seed) & 0xFFFF_FFFF_FFFF_FFFF
        self.stream = tuple(stream)
        words = [self.seed & 0xFFFF_FFFF, self.seed >> 32]
        words += [_stream_word(p) for p in self.stream]
        self.gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))

    def child(self, *key) -> "SeededRng":
        return SeededRng(self.seed, *self.stream, *key)

    # thin pass-throughs for the draws used in this package
    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def random(self, size=None):
        return self.gen.random(size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self.gen.choice(a, size=size, replace=replace)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, stream={self.stream})"


def finite_diff_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function ``f`` at ``x``.

    ``x`` is copied to float64; each coordinate is perturbed in turn.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleError(f"objective is not finite near coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Largest absolute deviation scaled by the larger of the two gradients' magnitudes."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.shape != numeric.shape:
        raise ShapeError(f"gradient shapes differ: {analytic.shape} vs {numeric.shape}")
    if analytic.size == 0:
        return 0.0
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric)) / scale)

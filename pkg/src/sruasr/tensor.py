"""Dense float64 kernels used by every model in the package.

Arrays are plain ``numpy.ndarray`` objects in float64, row-major.  Every
reduction accumulates in ascending index order so that repeated calls, and
calls on sub-batches, give bitwise-identical results:

* matrix products run through a compiled triple loop (``i, p, j`` order,
  ``c[i, j] += a[i, p] * b[p, j]`` for ``p = 0 .. k-1``), never BLAS;
* sums over an axis use ``numpy.cumsum`` (a strictly sequential scan).

Elementwise transcendental functions are numpy's (``np.exp``, ``np.log``).
Their results do not depend on the position of an element inside an array,
which is what makes batched and per-sequence evaluation agree bit for bit.
"""

from __future__ import annotations

import math
from typing import Sequence

import numba
import numpy as np

from .errors import ConfigurationError, DataError, DimensionError

__all__ = [
    "Rng",
    "matmul",
    "mm",
    "seqsum",
    "sigmoid",
    "relu",
    "softmax_row",
    "softmax",
    "log_softmax",
    "logsumexp",
    "conv1d_ctx",
    "conv2d_3x3",
    "batchnorm_inference",
    "dropout",
]

_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_MASK64 = (1 << 64) - 1


class Rng:
    """SplitMix64 pseudo-random generator.

    The state is one 64-bit word ``s``.  Each draw advances
    ``s <- s + 0x9E3779B97F4A7C15 (mod 2**64)`` and returns ``mix(s)`` where::

        z = (s ^ (s >> 30)) * 0xBF58476D1CE4E5B9
        z = (z ^ (z >> 27)) * 0x94D049BB133111EB
        mix(s) = z ^ (z >> 31)

    all products taken modulo 2**64.  Uniform doubles are ``(x >> 11) * 2**-53``
    and normals come from the cosine branch of Box-Muller applied to
    consecutive uniform pairs.  Because the state advances by a constant,
    ``n`` draws can be produced in one vectorized step; the bulk and scalar
    paths emit the same stream.

    Not thread-safe: one caller at a time.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.state = self.seed

    def next_u64(self) -> int:
        self.state = (self.state + _GOLDEN) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
        z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
        return z ^ (z >> 31)

    def u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(_GOLDEN)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        self.state = (self.state + n * _GOLDEN) & _MASK64
        return z ^ (z >> np.uint64(31))

    def uniform(self, size=None):
        """Doubles in [0, 1).  ``size=None`` returns a Python float."""
        if size is None:
            return (self.next_u64() >> 11) * 2.0**-53
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = math.prod(shape)
        return ((self.u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53).reshape(shape)

    def integers(self, high: int) -> int:
        """Integer in [0, high); bias is below high / 2**53."""
        if high <= 0:
            raise ValueError("high must be positive")
        return int(self.uniform() * high)

    def normal(self, size, scale: float = 1.0) -> np.ndarray:
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = math.prod(shape)
        u = self.uniform(2 * n).reshape(n, 2)
        radius = np.sqrt(-2.0 * np.log(1.0 - u[:, 0]))
        z = radius * np.cos(2.0 * np.pi * u[:, 1])
        return (z * scale).reshape(shape)

    def permutation(self, n: int) -> list[int]:
        """Fisher-Yates shuffle of range(n)."""
        out = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.integers(i + 1)
            out[i], out[j] = out[j], out[i]
        return out


@numba.njit(cache=True)
def _mm_kernel(a, b, out):
    nb, m, k = a.shape
    n = b.shape[2]
    shared_b = b.shape[0] == 1
    for z in range(nb):
        bz = 0 if shared_b else z
        for i in range(m):
            for p in range(k):
                aip = a[z, i, p]
                for j in range(n):
                    out[z, i, j] += aip * b[bz, p, j]
    return out


def mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched fixed-order product over the last two axes.

    ``a`` is ``(..., m, k)``; ``b`` is ``(k, n)`` (shared) or ``(..., k, n)``
    with the same leading shape as ``a``.
    """
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    lead = a.shape[:-2]
    m, k = a.shape[-2:]
    n = b.shape[-1]
    a3 = np.ascontiguousarray(a, dtype=np.float64).reshape((-1, m, k))
    if b.ndim == 2:
        b3 = np.ascontiguousarray(b, dtype=np.float64).reshape((1, k, n))
    else:
        if b.shape[:-2] != lead:
            raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
        b3 = np.ascontiguousarray(b, dtype=np.float64).reshape((-1, k, n))
    out = np.zeros((a3.shape[0], m, n))
    _mm_kernel(a3, b3, out)
    return out.reshape(lead + (m, n))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``c[i, j] = sum_p a[i, p] * b[p, j]`` accumulated for p = 0, 1, ..."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return mm(a, b)


def seqsum(x: np.ndarray, axis: int = -1, keepdims: bool = False) -> np.ndarray:
    """Sum along ``axis`` left to right (sequential scan)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[axis] == 0:
        out = np.zeros(np.delete(np.array(x.shape), axis % x.ndim))
        return np.expand_dims(out, axis) if keepdims else out
    total = np.take(np.cumsum(x, axis=axis), -1, axis=axis)
    return np.expand_dims(total, axis) if keepdims else total


def sigmoid(x):
    """``1 / (1 + exp(-x))``."""
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def relu(x):
    return np.maximum(x, 0.0)


def softmax(x: np.ndarray, axis: int = -1, mask: np.ndarray | None = None) -> np.ndarray:
    """Softmax along ``axis``; entries where ``mask`` is False get exactly 0.

    Every slice must keep at least one unmasked entry.
    """
    x = np.asarray(x, dtype=np.float64)
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    top = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - top)
    return e / seqsum(e, axis=axis, keepdims=True)


def softmax_row(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise DimensionError(f"softmax_row needs a non-empty vector, got shape {v.shape}")
    return softmax(v)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    top = np.max(x, axis=axis, keepdims=True)
    shifted = x - top
    return shifted - np.log(seqsum(np.exp(shifted), axis=axis, keepdims=True))


def logsumexp(v) -> float:
    """``M + log(sum(exp(v - M)))`` with ``M = max(v)``; exact for one element."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise DimensionError(f"logsumexp needs a non-empty vector, got shape {v.shape}")
    if v.size == 1:
        return float(v[0])
    top = np.max(v)
    return float(top + np.log(seqsum(np.exp(v - top))))


def _check_offsets(offsets: Sequence[int]) -> list[int]:
    offsets = [int(o) for o in offsets]
    if not offsets:
        raise ConfigurationError("context offsets must be non-empty")
    if len(set(offsets)) != len(offsets):
        raise ConfigurationError(f"duplicate context offsets {offsets}")
    if offsets != sorted(offsets):
        raise ConfigurationError(f"context offsets must be increasing, got {offsets}")
    return offsets


def shift_frames(x: np.ndarray, offset: int) -> np.ndarray:
    """Row ``t`` of the result is ``x[t + offset]``, or zeros outside [0, T)."""
    out = np.zeros_like(x)
    T = x.shape[0]
    if offset >= 0:
        if offset < T:
            out[: T - offset] = x[offset:]
    elif -offset < T:
        out[-offset:] = x[: T + offset]
    return out


def conv1d_ctx(x, offsets, w, bias) -> np.ndarray:
    """Context convolution: ``y[t] = bias + sum_o x[t + o] @ w_o``.

    ``w`` stacks one ``(d_in, d_out)`` block per offset, in offset order.
    Frames outside the input are zeros; output length equals input length.
    """
    offsets = _check_offsets(offsets)
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    T, d_in = x.shape
    if w.shape[0] != len(offsets) * d_in:
        raise DimensionError(
            f"weight shape {w.shape} does not match {len(offsets)} offsets x input shape {x.shape}"
        )
    if np.shape(bias) != (w.shape[1],):
        raise DimensionError(f"bias shape {np.shape(bias)} does not match weight shape {w.shape}")
    ctx = np.concatenate([shift_frames(x, o) for o in offsets], axis=1)
    return mm(ctx, w) + bias


def conv2d_3x3(x, kernels, bias, freq_stride: int = 1) -> np.ndarray:
    """3x3 cross-correlation over (time, frequency) with zero padding of 1.

    ``x`` is ``(T, F, c_in)`` and ``kernels`` is ``(3, 3, c_in, c_out)``
    indexed ``[time_tap, freq_tap]``; tap ``(1, 1)`` is the centre.  Time
    stride is 1; frequency stride is 1 or 2, giving ``ceil(F / stride)``
    output bins.  Taps are accumulated in row-major tap order.
    """
    if freq_stride not in (1, 2):
        raise ConfigurationError(f"frequency stride must be 1 or 2, got {freq_stride}")
    x = np.asarray(x, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    T, F, c_in = x.shape
    if kernels.shape[:3] != (3, 3, c_in):
        raise DimensionError(f"kernel shape {kernels.shape} does not match input shape {x.shape}")
    c_out = kernels.shape[3]
    if np.shape(bias) != (c_out,):
        raise DimensionError(f"bias shape {np.shape(bias)} does not match {c_out} output channels")
    F_out = -(-F // freq_stride)
    padded = np.zeros((T + 2, F + 2, c_in))
    padded[1:-1, 1:-1] = x
    out = np.zeros((T * F_out, c_out))
    for dt in range(3):
        for df in range(3):
            patch = padded[dt : dt + T, df : df + freq_stride * F_out : freq_stride]
            out += mm(patch.reshape(T * F_out, c_in), kernels[dt, df])
    return (out + bias).reshape(T, F_out, c_out)


def batchnorm_inference(x, gamma, beta, mean, var, eps: float = 1e-5) -> np.ndarray:
    """``gamma * (x - mean) / sqrt(var + eps) + beta`` per feature column."""
    if not eps > 0:
        raise ConfigurationError(f"batchnorm eps must be positive, got {eps}")
    var = np.asarray(var, dtype=np.float64)
    if np.any(var < 0):
        raise DataError("batchnorm running variance has negative entries")
    return gamma * (x - mean) / np.sqrt(var + eps) + beta


def dropout(x: np.ndarray, rate: float, rng: Rng | None) -> np.ndarray:
    """Inverted Bernoulli dropout; rate 0 returns ``x`` itself."""
    if rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must be in [0, 1), got {rate}")
    if rng is None:
        raise ConfigurationError("dropout with a non-zero rate needs an Rng")
    keep = rng.uniform(x.shape) >= rate
    return np.where(keep, x / (1.0 - rate), 0.0)

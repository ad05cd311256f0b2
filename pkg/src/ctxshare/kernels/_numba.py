"""Numba-jitted kernel implementations.

Same contracts as ``ctxshare.kernels._numpy``; loops are written out so the
JIT fuses the softmax passes. Matrix products go through ``np.dot`` (BLAS).
Results may differ from the numpy backend by a few ULPs (different libm
paths); each backend is bit-stable with itself.
"""

import numpy as np
from numba import njit

BACKEND_NAME = "numba"

_U53 = float(1 << 53)
_TINY_U = 2.0**-53


@njit(cache=True)
def splitmix64_fill(seed: int, n: int) -> np.ndarray:
    golden = np.uint64(0x9E3779B97F4A7C15)
    mix1 = np.uint64(0xBF58476D1CE4E5B9)
    mix2 = np.uint64(0x94D049BB133111EB)
    out = np.empty(n, dtype=np.uint64)
    s = np.uint64(seed)
    for i in range(n):
        s = s + golden
        z = s
        z = (z ^ (z >> np.uint64(30))) * mix1
        z = (z ^ (z >> np.uint64(27))) * mix2
        out[i] = z ^ (z >> np.uint64(31))
    return out


@njit(cache=True)
def gaussian_fill(seed: int, n: int) -> np.ndarray:
    m = n + (n & 1)
    raw = splitmix64_fill(seed, m)
    out = np.empty(m, dtype=np.float64)
    for i in range(0, m, 2):
        u1 = float(raw[i] >> np.uint64(11)) / _U53
        u2 = float(raw[i + 1] >> np.uint64(11)) / _U53
        if u1 < _TINY_U:
            u1 = _TINY_U
        r = np.sqrt(-2.0 * np.log(u1))
        out[i] = r * np.cos(2.0 * np.pi * u2)
        out[i + 1] = r * np.sin(2.0 * np.pi * u2)
    return out[:n]


@njit(cache=True)
def _softmax_rows_inplace(x: np.ndarray) -> None:
    n, m = x.shape
    for i in range(n):
        mx = -np.inf
        for j in range(m):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(m):
            e = np.exp(x[i, j] - mx)
            x[i, j] = e
            s += e
        inv = 1.0 / s
        for j in range(m):
            x[i, j] *= inv


@njit(cache=True)
def row_softmax(x: np.ndarray) -> np.ndarray:
    out = x.copy()
    _softmax_rows_inplace(out)
    return out


@njit(cache=True)
def attention_weights(q: np.ndarray, k: np.ndarray, mask: np.ndarray, scale: float) -> np.ndarray:
    kt = np.ascontiguousarray(k.T)
    logits = np.dot(q, kt) * scale + mask
    _softmax_rows_inplace(logits)
    return logits


@njit(cache=True)
def attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, mask: np.ndarray, scale: float) -> np.ndarray:
    return np.dot(attention_weights(q, k, mask, scale), v)

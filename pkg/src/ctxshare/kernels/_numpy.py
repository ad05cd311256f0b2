"""Pure-numpy kernel implementations.

Reference backend: every function here defines the semantics the numba
backend must reproduce (within floating-point library differences).
All inputs are C-contiguous float64 arrays; validation happens in the
wrappers in ``ctxshare.numerics``.
"""

import numpy as np

BACKEND_NAME = "numpy"

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U53 = float(1 << 53)
_TINY_U = 2.0**-53  # smallest nonzero uniform; guards log(0) in Box-Muller


def splitmix64_fill(seed: int, n: int) -> np.ndarray:
    """Raw SplitMix64 output stream: k-th value is mix(seed + (k+1)*golden)."""
    ks = np.arange(1, n + 1, dtype=np.uint64)
    z = np.uint64(seed) + ks * _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def gaussian_fill(seed: int, n: int) -> np.ndarray:
    """n standard-normal draws: SplitMix64 uniforms fed to Box-Muller pairs."""
    m = n + (n & 1)
    u = (splitmix64_fill(seed, m) >> np.uint64(11)).astype(np.float64) / _U53
    u1 = np.maximum(u[0::2], _TINY_U)
    u2 = u[1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    out = np.empty(m, dtype=np.float64)
    out[0::2] = r * np.cos(2.0 * np.pi * u2)
    out[1::2] = r * np.sin(2.0 * np.pi * u2)
    return out[:n]


def row_softmax(x: np.ndarray) -> np.ndarray:
    """Row-wise exp-normalize with max subtraction; -inf maps to exact 0.

    Assumes no row is entirely -inf (checked by the caller).
    """
    mx = np.max(x, axis=1, keepdims=True)
    e = np.exp(x - mx)
    return e / np.sum(e, axis=1, keepdims=True)


def attention_weights(q: np.ndarray, k: np.ndarray, mask: np.ndarray, scale: float) -> np.ndarray:
    """softmax(q k^T * scale + mask) by rows."""
    return row_softmax(q @ k.T * scale + mask)


def attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, mask: np.ndarray, scale: float) -> np.ndarray:
    """softmax(q k^T * scale + mask) v."""
    return attention_weights(q, k, mask, scale) @ v

"""Deterministic dense-matrix primitives.

Everything here is a pure function of its arguments. 2-D values are plain
C-contiguous float64 ndarrays; attention masks are float64 arrays whose
entries are exactly 0.0 or -inf, applied additively before the softmax.
"""

import math

import numpy as np

from . import kernels
from .errors import DegenerateHistogram, RowFullyMasked, ShapeMismatch

NEG_INF = -math.inf

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

_SM_GOLDEN = 0x9E3779B97F4A7C15
_SM_MIX1 = 0xBF58476D1CE4E5B9
_SM_MIX2 = 0x94D049BB133111EB


def fnv1a64(data) -> int:
    """FNV-1a 64-bit hash of bytes (str is encoded as UTF-8)."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h


def _splitmix_mix(x: int) -> int:
    z = (x + _SM_GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * _SM_MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _SM_MIX2) & _MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, tag: str, *indices: int) -> int:
    """Sub-seed for the stream labelled (tag, indices) under a root seed.

    Identical (seed, tag, indices) always yields the same sub-seed; distinct
    labels decorrelate through an FNV fold plus a SplitMix64 finalizer.
    """
    h = fnv1a64(tag)
    for ix in indices:
        h = fnv1a64((int(ix) & _MASK64).to_bytes(8, "little")) ^ ((h * _FNV_PRIME) & _MASK64)
    return _splitmix_mix((int(seed) & _MASK64) ^ h)


def as_matrix(x, name: str = "array") -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeMismatch(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def seeded_gaussian(seed: int, rows: int, cols: int) -> np.ndarray:
    """(rows, cols) of standard-normal draws from the SplitMix64/Box-Muller stream."""
    if rows < 1 or cols < 1:
        raise ShapeMismatch(f"rows and cols must be >= 1, got ({rows}, {cols})")
    return kernels.gaussian_fill(np.uint64(int(seed) & _MASK64), rows * cols).reshape(rows, cols)


def row_softmax(x) -> np.ndarray:
    """Row-wise softmax with max subtraction; -inf entries give exact zeros."""
    arr = as_matrix(x, "logits")
    if np.any(np.all(np.isneginf(arr), axis=1)):
        raise RowFullyMasked("softmax row contains only -inf")
    return kernels.row_softmax(arr)


def _check_attention_shapes(q, k, m, d_h, v=None):
    if q.shape[1] != d_h or k.shape[1] != d_h:
        raise ShapeMismatch(
            f"Q/K width must equal d_h={d_h}, got {q.shape[1]} and {k.shape[1]}"
        )
    if m.shape != (q.shape[0], k.shape[0]):
        raise ShapeMismatch(
            f"mask shape {m.shape} does not match (queries, keys) = ({q.shape[0]}, {k.shape[0]})"
        )
    if v is not None and v.shape[0] != k.shape[0]:
        raise ShapeMismatch(f"V rows {v.shape[0]} != K rows {k.shape[0]}")
    if np.any(np.all(np.isneginf(m), axis=1)):
        raise RowFullyMasked("attention mask blocks an entire query row")


def masked_attention_weights(q, k, m, d_h: int) -> np.ndarray:
    """Post-softmax attention weights softmax((q k^T + m)/sqrt(d_h))."""
    q = as_matrix(q, "Q")
    k = as_matrix(k, "K")
    m = as_matrix(m, "mask")
    _check_attention_shapes(q, k, m, d_h)
    return kernels.attention_weights(q, k, m, 1.0 / math.sqrt(d_h))


def masked_attention(q, k, v, m, d_h: int) -> np.ndarray:
    """softmax((q k^T + m)/sqrt(d_h)) v with an additive 0/-inf mask."""
    q = as_matrix(q, "Q")
    k = as_matrix(k, "K")
    v = as_matrix(v, "V")
    m = as_matrix(m, "mask")
    _check_attention_shapes(q, k, m, d_h, v)
    return kernels.attention(q, k, v, m, 1.0 / math.sqrt(d_h))


def otsu_threshold(values, bins: int = 256) -> float:
    """Bin-edge threshold maximizing between-class variance over a histogram.

    Values are histogrammed into `bins` equal-width bins over [min, max].
    Candidate thresholds are the interior bin edges; ties break toward the
    lower threshold. Raises DegenerateHistogram when max - min < 1e-12, in
    which case callers must treat the result as "no mask" (all-pass).
    """
    v = np.ascontiguousarray(values, dtype=np.float64).ravel()
    if v.size < 2:
        raise ShapeMismatch(f"need at least 2 values, got {v.size}")
    if bins < 2:
        raise ShapeMismatch(f"need at least 2 bins, got {bins}")
    lo = float(v.min())
    hi = float(v.max())
    if hi - lo < 1e-12:
        raise DegenerateHistogram(f"all values within 1e-12 of {lo}")

    idx = np.minimum((v - lo) * (bins / (hi - lo)), bins - 1).astype(np.int64)
    hist = np.bincount(idx, minlength=bins).astype(np.float64)

    total = float(v.size)
    total_sum = float(np.dot(hist, np.arange(bins, dtype=np.float64)))

    # Between-class variance for a split after bin k is
    # (s0*total - total_sum*w0)^2 / (w0*(total-w0)); all quantities are
    # integer-valued, so comparing candidates by cross-multiplication keeps
    # the argmax exact for the sizes this package works at.
    best_k = -1
    best_num = -1.0  # squared numerator
    best_den = 1.0
    w0 = 0.0
    s0 = 0.0
    for k in range(bins - 1):
        w0 += hist[k]
        s0 += k * hist[k]
        w1 = total - w0
        num = s0 * total - total_sum * w0
        num2 = num * num
        den = w0 * w1
        if num2 * best_den > best_num * den:
            best_k = k
            best_num = num2
            best_den = den
    return lo + (best_k + 1) * (hi - lo) / bins


def binarize(values, threshold: float) -> np.ndarray:
    """Boolean vector: element i is True iff values[i] > threshold."""
    return np.ascontiguousarray(values, dtype=np.float64) > threshold

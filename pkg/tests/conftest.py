import math

import numpy as np
import pytest

from ctxshare.analysis import builtin_images
from ctxshare.imageio import write_pgm, write_ppm
from ctxshare.model import Model, ModelConfig, init_model
from ctxshare.pipeline import ReferenceSpec


@pytest.fixture(scope="session")
def desk_model() -> Model:
    return init_model(ModelConfig())


@pytest.fixture(scope="session")
def tiny_model() -> Model:
    return init_model(ModelConfig(L=2, d=8, H=2, n_I=4, n_P=2, rcm_gate_layer=0, seed=11))


@pytest.fixture(scope="session")
def image_dir(tmp_path_factory):
    """Two deterministic reference images on disk (one PGM, one PPM)."""
    d = tmp_path_factory.mktemp("imgs")
    stripes, checker = builtin_images()
    write_pgm(d / "stripes.pgm", stripes)
    write_ppm(d / "checker.ppm", np.stack([checker, checker // 2, 255 - checker], axis=2))
    return d


@pytest.fixture(scope="session")
def ref_specs(image_dir):
    return (
        ReferenceSpec(str(image_dir / "stripes.pgm"), "diagonal stripes"),
        ReferenceSpec(str(image_dir / "checker.ppm"), "a checkerboard"),
    )


def brute_masked_attention(q, k, v, m, d_h):
    """Loop-and-math.exp evaluation of softmax((qk^T+m)/sqrt(d_h)) v."""
    n, keys = q.shape[0], k.shape[0]
    out = np.zeros((n, v.shape[1]))
    for i in range(n):
        weights = []
        for j in range(keys):
            logit = float(np.dot(q[i], k[j])) / math.sqrt(d_h) + m[i, j]
            weights.append(math.exp(logit))
        z = sum(weights)
        for j in range(keys):
            out[i] += (weights[j] / z) * v[j]
    return out


def otsu_exhaustive(values, bins=256):
    """Exhaustive search over every candidate bin edge, exact integer compare."""
    v = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = float(v.min()), float(v.max())
    assert hi - lo >= 1e-12
    idx = np.minimum((v - lo) * (bins / (hi - lo)), bins - 1).astype(np.int64)
    hist = np.bincount(idx, minlength=bins)
    total = int(hist.sum())
    total_sum = int(np.dot(hist, np.arange(bins)))
    best_k, best_num, best_den = None, -1, 1
    for k in range(bins):
        w0 = int(hist[: k + 1].sum())
        w1 = total - w0
        if w0 == 0 or w1 == 0:
            num2, den = 0, 1  # one class empty: between-class variance is 0
        else:
            s0 = int(np.dot(hist[: k + 1], np.arange(k + 1)))
            num = s0 * total - total_sum * w0
            num2, den = num * num, w0 * w1
        if best_k is None or num2 * best_den > best_num * den:
            best_k, best_num, best_den = k, num2, den
    return lo + (best_k + 1) * (hi - lo) / bins

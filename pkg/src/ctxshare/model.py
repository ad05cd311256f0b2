"""Toy multimodal diffusion transformer.

Deterministic stand-in encoders, per-layer dual-modality QKV projections and
the residual dual-update attention block. The block updates vision and text
token streams jointly: Q/K/V of both modalities are concatenated, one masked
attention runs per head, and the result is added residually to both streams.
There is intentionally no MLP, normalization or timestep modulation; the
mechanisms under study live purely at the attention level.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import BadImageShape, InvalidConfig, ShapeMismatch
from .numerics import derive_seed, fnv1a64, masked_attention, seeded_gaussian

VISION = "vision"
TEXT = "text"

# order fixed once; layer weight sub-seeds index into it
_WEIGHT_ROLES = ("wq_i", "wk_i", "wv_i", "wq_p", "wk_p", "wv_p")


@dataclass(frozen=True)
class ModelConfig:
    """Desk-scale defaults; the full-scale analogue is L=38, n_I=4096, n_P=333."""

    L: int = 8
    d: int = 64
    H: int = 4
    n_I: int = 64
    n_P: int = 16
    rcm_gate_layer: int = 6
    seed: int = 0

    def validate(self) -> "ModelConfig":
        if self.L < 1 or self.d < 1 or self.H < 1 or self.n_I < 1 or self.n_P < 1:
            raise InvalidConfig(f"all dimensions must be >= 1: {self}")
        if self.d % self.H != 0:
            raise InvalidConfig(f"width d={self.d} not divisible by H={self.H} heads")
        g = math.isqrt(self.n_I)
        if g * g != self.n_I:
            raise InvalidConfig(f"n_I={self.n_I} is not a perfect square")
        if not 0 <= self.rcm_gate_layer < self.L:
            raise InvalidConfig(
                f"rcm_gate_layer={self.rcm_gate_layer} outside [0, {self.L})"
            )
        return self

    @property
    def d_h(self) -> int:
        return self.d // self.H

    @property
    def grid(self) -> int:
        return math.isqrt(self.n_I)


@dataclass(frozen=True)
class LayerWeights:
    wq_i: np.ndarray
    wk_i: np.ndarray
    wv_i: np.ndarray
    wq_p: np.ndarray
    wk_p: np.ndarray
    wv_p: np.ndarray

    def for_modality(self, modality: str):
        if modality == VISION:
            return self.wq_i, self.wk_i, self.wv_i
        return self.wq_p, self.wk_p, self.wv_p


@dataclass(frozen=True)
class Model:
    config: ModelConfig
    layers: tuple
    w_out: np.ndarray


@dataclass
class TokenBlock:
    """An n x d latent token matrix tagged with its modality and origin."""

    modality: str
    tokens: np.ndarray
    origin: str = "output"

    def copy(self) -> "TokenBlock":
        return TokenBlock(self.modality, self.tokens.copy(), self.origin)

    @property
    def n(self) -> int:
        return self.tokens.shape[0]


def init_model(config: ModelConfig) -> Model:
    """Seeded N(0, 1/d) projection weights; every matrix reproducible in isolation."""
    config.validate()
    scale = 1.0 / math.sqrt(config.d)
    layers = []
    for l in range(config.L):
        mats = {
            role: seeded_gaussian(derive_seed(config.seed, "weights", l, r), config.d, config.d) * scale
            for r, role in enumerate(_WEIGHT_ROLES)
        }
        layers.append(LayerWeights(**mats))
    w_out = seeded_gaussian(derive_seed(config.seed, "w_out"), config.d, config.d) * scale
    return Model(config=config, layers=tuple(layers), w_out=w_out)


def encode_prompt(text: str, model: Model) -> TokenBlock:
    """Hash-seeded word embeddings, truncated/padded to n_P rows.

    Each whitespace word maps to a fixed gaussian row via its FNV-1a hash;
    padding rows reuse the empty-string embedding. Deterministic and
    injective up to hash collision.
    """
    cfg = model.config
    words = text.split()[: cfg.n_P]
    pad = seeded_gaussian(fnv1a64(""), 1, cfg.d)
    rows = [seeded_gaussian(fnv1a64(w), 1, cfg.d) for w in words]
    rows.extend([pad] * (cfg.n_P - len(rows)))
    return TokenBlock(TEXT, np.ascontiguousarray(np.vstack(rows)), origin="output")


def pool_image(pixels: np.ndarray, grid: int) -> np.ndarray:
    """Average-pool an (H, W, C) byte grid into (grid*grid, C) values in [-1, 1]."""
    arr = np.asarray(pixels)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise BadImageShape(f"expected (H, W[, C]) pixels, got shape {arr.shape}")
    h, w, c = arr.shape
    if h % grid != 0 or w % grid != 0:
        raise BadImageShape(f"image {h}x{w} not divisible into a {grid}x{grid} patch grid")
    ph, pw = h // grid, w // grid
    patches = arr.astype(np.float64).reshape(grid, ph, grid, pw, c)
    pooled = patches.mean(axis=(1, 3)).reshape(grid * grid, c)
    return pooled / 127.5 - 1.0


def encode_image(pixels: np.ndarray, model: Model) -> TokenBlock:
    """Patch-pool the image and project per-patch channel vectors to width d."""
    cfg = model.config
    pooled = pool_image(pixels, cfg.grid)
    c = pooled.shape[1]
    proj = seeded_gaussian(derive_seed(cfg.seed, "image_proj", c), c, cfg.d)
    return TokenBlock(VISION, np.ascontiguousarray(pooled @ proj), origin="output")


def project_qkv(block: TokenBlock, layer: int, model: Model):
    """(Q, K, V) for a block at one layer; head h lives in columns [h*d_h, (h+1)*d_h)."""
    cfg = model.config
    if not 0 <= layer < cfg.L:
        raise ShapeMismatch(f"layer {layer} outside [0, {cfg.L})")
    if block.tokens.shape[1] != cfg.d:
        raise ShapeMismatch(
            f"token width {block.tokens.shape[1]} != model width {cfg.d}"
        )
    wq, wk, wv = model.layers[layer].for_modality(block.modality)
    t = block.tokens
    return t @ wq, t @ wk, t @ wv


def heads_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, mask: np.ndarray, n_heads: int) -> np.ndarray:
    """Per-head masked attention on column-sliced Q/K/V, concatenated back."""
    d = q.shape[1]
    d_h = d // n_heads
    outs = []
    for h in range(n_heads):
        sl = slice(h * d_h, (h + 1) * d_h)
        outs.append(
            masked_attention(
                np.ascontiguousarray(q[:, sl]),
                np.ascontiguousarray(k[:, sl]),
                np.ascontiguousarray(v[:, sl]),
                mask,
                d_h,
            )
        )
    return np.concatenate(outs, axis=1)


def zero_mask(rows: int, cols: int) -> np.ndarray:
    return np.zeros((rows, cols), dtype=np.float64)


def mma_forward(vision: TokenBlock, text: TokenBlock, mask: np.ndarray, layer: int, model: Model):
    """One residual dual-update multimodal attention block.

    Q/K/V of the two streams are concatenated as [vision; text]; head outputs
    are concatenated along width with no output projection and added
    residually; the first n_I result rows become vision', the rest text'.
    """
    cfg = model.config
    n = vision.n + text.n
    if mask.shape != (n, n):
        raise ShapeMismatch(f"mask shape {mask.shape} != ({n}, {n})")
    qi, ki, vi = project_qkv(vision, layer, model)
    qp, kp, vp = project_qkv(text, layer, model)
    q = np.concatenate([qi, qp], axis=0)
    k = np.concatenate([ki, kp], axis=0)
    v = np.concatenate([vi, vp], axis=0)
    out = heads_attention(q, k, v, mask, cfg.H)
    vision_new = TokenBlock(VISION, vision.tokens + out[: vision.n], vision.origin)
    text_new = TokenBlock(TEXT, text.tokens + out[vision.n :], text.origin)
    return vision_new, text_new


def predict_velocity(vision: TokenBlock, model: Model) -> np.ndarray:
    """Denoising head: final-layer vision tokens through the output projection."""
    return vision.tokens @ model.w_out

"""Reference-attention machinery.

Three pieces:

* contextual-token sharing: the output pass attends over its own vision and
  prompt keys plus the prompt ("contextual") keys of every reference run,
  key axis ordered [output vision | output prompt | ref-1 prompt | ... |
  ref-R prompt];
* reference contextual masking: per reference, the attention mass its vision
  queries put on the *output* prompt keys scores each vision token, the
  scores are Otsu-binarized, and the reference's prompt queries are blocked
  from the non-salient vision keys;
* winner-takes-all: each output vision token keeps only the reference whose
  contextual keys draw the most attention mass; every other reference block
  is masked out for that row.

Plus the closed-form key-count cost model comparing contextual sharing with
the concatenate-all-vision-tokens baseline.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DegenerateHistogram, ShapeMismatch
from .model import TEXT, VISION, Model, TokenBlock, heads_attention, mma_forward, project_qkv
from .numerics import NEG_INF, binarize, masked_attention_weights, otsu_threshold, row_softmax


@dataclass(frozen=True)
class TokenLayout:
    """Key-axis geometry for one output pass with R references."""

    n_I: int
    n_P: int
    R: int

    @property
    def keys(self) -> int:
        return self.n_I + self.n_P + self.R * self.n_P

    @property
    def queries(self) -> int:
        return self.n_I + self.n_P

    def ref_block(self, r: int) -> slice:
        """Key columns of reference r (1-based), each n_P wide."""
        if not 1 <= r <= self.R:
            raise ShapeMismatch(f"reference index {r} outside [1, {self.R}]")
        start = self.n_I + self.n_P + (r - 1) * self.n_P
        return slice(start, start + self.n_P)


@dataclass
class RcmResult:
    """Saliency, its binarization and the resulting reference-pass mask."""

    saliency: np.ndarray  # (n_I,)
    salient: np.ndarray  # (n_I,) bool
    mask: np.ndarray  # (n_I+n_P, n_I+n_P)
    degenerate: bool


@dataclass
class CtsTrace:
    """What the output pass computed besides the tokens."""

    mask: np.ndarray
    saliency: Optional[np.ndarray] = None  # (n_I, R) when WTA ran
    winners: Optional[np.ndarray] = None  # (n_I,) 1-based when WTA ran
    head_outputs: Optional[np.ndarray] = None  # (H, n_I+n_P, d_h) on request


@dataclass(frozen=True)
class CostReport:
    """Closed-form attention cost comparison for R references."""

    R: int
    prompt_to_vision_ratio: float  # n_P / n_I
    share_factor: float  # 2R - 1
    cts_factor: float  # (R - 1) + (n_P/n_I) R
    exact_share_keys: int  # (R+1) n_I + n_P
    exact_cts_keys: int  # n_I + (R+1) n_P

    @property
    def cts_over_share(self) -> float:
        return self.cts_factor / self.share_factor


def _head_slices(d: int, n_heads: int):
    d_h = d // n_heads
    return [slice(h * d_h, (h + 1) * d_h) for h in range(n_heads)], d_h


def saliency_block_sums(weights: np.ndarray, start: int, width: int) -> np.ndarray:
    """Attention mass each query row puts on key columns [start, start+width)."""
    return weights[:, start : start + width].sum(axis=1)


def rcm_saliency(q_ir: np.ndarray, k_ir: np.ndarray, k_po: np.ndarray, n_heads: int) -> np.ndarray:
    """Per vision token, head-averaged attention mass on the output-prompt keys.

    Each head softmaxes its vision-query rows over the concatenated keys
    [K_Ir; K_Po]; the mass landing on the n_P prompt columns is summed and
    averaged across heads, giving one score in [0, 1] per vision token.
    """
    if q_ir.shape[1] != k_ir.shape[1] or q_ir.shape[1] != k_po.shape[1]:
        raise ShapeMismatch("Q/K widths disagree")
    n_i = k_ir.shape[0]
    n_p = k_po.shape[0]
    slices, d_h = _head_slices(q_ir.shape[1], n_heads)
    keys = np.concatenate([k_ir, k_po], axis=0)
    zeros = np.zeros((q_ir.shape[0], n_i + n_p))
    acc = np.zeros(q_ir.shape[0])
    for sl in slices:
        w = masked_attention_weights(
            np.ascontiguousarray(q_ir[:, sl]), np.ascontiguousarray(keys[:, sl]), zeros, d_h
        )
        acc += saliency_block_sums(w, n_i, n_p)
    return acc / n_heads


def build_rcm_mask(saliency: np.ndarray, layout: TokenLayout) -> RcmResult:
    """Otsu-binarize saliency; block prompt queries from non-salient vision keys.

    Vision-query rows are never masked. An all-equal saliency vector cannot
    be split, so the mask degrades to all-pass (vanilla attention).
    """
    saliency = np.ascontiguousarray(saliency, dtype=np.float64).ravel()
    if saliency.size != layout.n_I:
        raise ShapeMismatch(f"saliency length {saliency.size} != n_I {layout.n_I}")
    mask = np.zeros((layout.queries, layout.queries), dtype=np.float64)
    try:
        threshold = otsu_threshold(saliency, 256)
    except DegenerateHistogram:
        return RcmResult(saliency, np.ones(layout.n_I, dtype=bool), mask, True)
    salient = binarize(saliency, threshold)
    mask[layout.n_I :, : layout.n_I][:, ~salient] = NEG_INF
    return RcmResult(saliency, salient, mask, False)


def reference_forward(
    ref_vision: TokenBlock,
    ref_prompt: TokenBlock,
    out_prompt: TokenBlock,
    layer: int,
    model: Model,
    gate: int,
):
    """One reference-pass block: masked dual update of the reference pair.

    Saliency against the *output* prompt's keys is always computed (it is
    traced either way); the mask it induces only applies on layers past the
    gate. Returns (vision', prompt', RcmResult).
    """
    cfg = model.config
    layout = TokenLayout(ref_vision.n, ref_prompt.n, 0)
    q_ir, k_ir, _ = project_qkv(ref_vision, layer, model)
    _, k_po, _ = project_qkv(out_prompt, layer, model)
    saliency = rcm_saliency(q_ir, k_ir, k_po, cfg.H)
    if layer > gate:
        rcm = build_rcm_mask(saliency, layout)
    else:
        rcm = RcmResult(
            saliency,
            np.ones(layout.n_I, dtype=bool),
            np.zeros((layout.queries, layout.queries), dtype=np.float64),
            False,
        )
    vision_new, prompt_new = mma_forward(ref_vision, ref_prompt, rcm.mask, layer, model)
    return vision_new, prompt_new, rcm


def wta_saliency(q_io: np.ndarray, k_full: np.ndarray, layout: TokenLayout, n_heads: int) -> np.ndarray:
    """(n_I, R) head-averaged attention mass per reference block.

    Softmax runs over the full concatenated key axis, then each reference's
    n_P-column slice is summed; normalizing per reference block would pin
    every score to 1 and make the argmax meaningless.
    """
    if layout.R < 1:
        raise ShapeMismatch("winner saliency needs at least one reference")
    if k_full.shape[0] != layout.keys:
        raise ShapeMismatch(f"key axis {k_full.shape[0]} != layout keys {layout.keys}")
    slices, d_h = _head_slices(q_io.shape[1], n_heads)
    zeros = np.zeros((q_io.shape[0], layout.keys))
    acc = np.zeros((q_io.shape[0], layout.R))
    for sl in slices:
        w = masked_attention_weights(
            np.ascontiguousarray(q_io[:, sl]), np.ascontiguousarray(k_full[:, sl]), zeros, d_h
        )
        for r in range(1, layout.R + 1):
            blk = layout.ref_block(r)
            acc[:, r - 1] += saliency_block_sums(w, blk.start, layout.n_P)
    return acc / n_heads


def saliency_from_logits(logits: np.ndarray, layout: TokenLayout) -> np.ndarray:
    """Single-head variant on raw logits over the full key axis (diagnostics)."""
    w = row_softmax(logits)
    out = np.empty((logits.shape[0], layout.R))
    for r in range(1, layout.R + 1):
        blk = layout.ref_block(r)
        out[:, r - 1] = saliency_block_sums(w, blk.start, layout.n_P)
    return out


def wta_winners(saliency: np.ndarray) -> np.ndarray:
    """Per-row argmax as 1-based reference indices; ties go to the lowest index."""
    s = np.ascontiguousarray(saliency, dtype=np.float64)
    if s.ndim != 2 or s.shape[1] < 1:
        raise ShapeMismatch(f"saliency matrix must be (n_I, R>=1), got {s.shape}")
    return np.argmax(s, axis=1).astype(np.int64) + 1


def cts_base_mask(layout: TokenLayout) -> np.ndarray:
    """Sharing mask without WTA: prompt queries blocked from all reference keys."""
    mask = np.zeros((layout.queries, layout.keys), dtype=np.float64)
    mask[layout.n_I :, layout.n_I + layout.n_P :] = NEG_INF
    return mask


def build_wta_mask(winners: np.ndarray, layout: TokenLayout) -> np.ndarray:
    """Winner mask: vision row i keeps only reference winners[i]'s key block.

    Output-prompt rows are blocked from every reference block so the output
    prompt evolves exactly as in single-image generation; own-vision and
    own-prompt columns always stay open.
    """
    winners = np.ascontiguousarray(winners, dtype=np.int64).ravel()
    if winners.size != layout.n_I:
        raise ShapeMismatch(f"winners length {winners.size} != n_I {layout.n_I}")
    if winners.size and (winners.min() < 1 or winners.max() > layout.R):
        raise ShapeMismatch("winner indices outside [1, R]")
    mask = cts_base_mask(layout)
    for r in range(1, layout.R + 1):
        blk = layout.ref_block(r)
        mask[: layout.n_I, blk][winners != r] = NEG_INF
    return mask


def cts_forward(
    out_vision: TokenBlock,
    out_prompt: TokenBlock,
    ref_prompts: list,
    layer: int,
    model: Model,
    wta: bool,
    keep_head_outputs: bool = False,
):
    """Output-pass block with contextual sharing: residual dual update of the
    output pair against keys/values extended by the reference prompt blocks.

    Reference blocks are projected with the same text-modality K/V weights of
    this layer and contribute no queries. With R = 0 this is exactly the
    vanilla block. Returns (vision', prompt', CtsTrace).
    """
    cfg = model.config
    layout = TokenLayout(out_vision.n, out_prompt.n, len(ref_prompts))
    for rp in ref_prompts:
        if rp.n != out_prompt.n:
            raise ShapeMismatch(
                f"reference contextual block has {rp.n} rows, expected {out_prompt.n}"
            )
    qi, ki, vi = project_qkv(out_vision, layer, model)
    qp, kp, vp = project_qkv(out_prompt, layer, model)
    ks = [ki, kp]
    vs = [vi, vp]
    for rp in ref_prompts:
        block = TokenBlock(TEXT, rp.tokens, rp.origin)
        _, kr, vr = project_qkv(block, layer, model)
        ks.append(kr)
        vs.append(vr)
    q = np.concatenate([qi, qp], axis=0)
    k = np.concatenate(ks, axis=0)
    v = np.concatenate(vs, axis=0)

    saliency = winners = None
    if wta and layout.R >= 1:
        saliency = wta_saliency(q[: layout.n_I], k, layout, cfg.H)
        winners = wta_winners(saliency)
        mask = build_wta_mask(winners, layout)
    else:
        mask = cts_base_mask(layout)

    out = heads_attention(q, k, v, mask, cfg.H)
    head_outputs = None
    if keep_head_outputs:
        head_outputs = np.stack(np.split(out, cfg.H, axis=1), axis=0)
    vision_new = TokenBlock(VISION, out_vision.tokens + out[: layout.n_I], out_vision.origin)
    prompt_new = TokenBlock(TEXT, out_prompt.tokens + out[layout.n_I :], out_prompt.origin)
    return vision_new, prompt_new, CtsTrace(mask, saliency, winners, head_outputs)


def attention_cost(R: int, n_I: int, n_P: int) -> CostReport:
    """Key-count cost model: sharing all vision tokens versus contextual tokens.

    The share-attention baseline concatenates every reference's vision tokens
    into the key axis; contextual sharing concatenates only prompt-sized
    blocks, so its extra cost scales with n_P/n_I instead of 1.
    """
    if n_I < 1 or n_P < 1:
        raise ShapeMismatch(f"token counts must be >= 1, got n_I={n_I}, n_P={n_P}")
    if R < 0:
        raise ShapeMismatch(f"reference count must be >= 0, got {R}")
    ratio = n_P / n_I
    return CostReport(
        R=R,
        prompt_to_vision_ratio=ratio,
        share_factor=float(2 * R - 1),
        cts_factor=(R - 1) + ratio * R,
        exact_share_keys=(R + 1) * n_I + n_P,
        exact_cts_keys=n_I + (R + 1) * n_P,
    )

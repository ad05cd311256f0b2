"""Contextual-token sharing on a toy multimodal diffusion transformer.

A deterministic, CPU-only lab for three attention mechanisms: sharing
reference runs' prompt ("contextual") tokens into an output run's keys and
values, Otsu-masked reference passes, and winner-takes-all reference
assignment, plus the sampler, diagnostics and cost model around them.
"""

from .errors import (
    BadImageShape,
    CtxShareError,
    DegenerateHistogram,
    InvalidConfig,
    RowFullyMasked,
    ShapeMismatch,
)
from .kernels import backend_name
from .model import (
    Model,
    ModelConfig,
    TokenBlock,
    encode_image,
    encode_prompt,
    init_model,
    mma_forward,
    predict_velocity,
    project_qkv,
)
from .numerics import (
    binarize,
    derive_seed,
    fnv1a64,
    masked_attention,
    masked_attention_weights,
    otsu_threshold,
    row_softmax,
    seeded_gaussian,
)
from .pipeline import (
    ReferenceSpec,
    RunConfig,
    RunResult,
    TraceFlags,
    noise_to_t,
    parse_run_config,
    run_pipeline,
    run_t2i_baseline,
)
from .refmask import (
    CostReport,
    RcmResult,
    TokenLayout,
    attention_cost,
    build_rcm_mask,
    build_wta_mask,
    cts_forward,
    rcm_saliency,
    reference_forward,
    wta_saliency,
    wta_winners,
)

__version__ = "0.1.0"

__all__ = [
    "BadImageShape",
    "CostReport",
    "CtxShareError",
    "DegenerateHistogram",
    "InvalidConfig",
    "Model",
    "ModelConfig",
    "RcmResult",
    "ReferenceSpec",
    "RowFullyMasked",
    "RunConfig",
    "RunResult",
    "ShapeMismatch",
    "TokenBlock",
    "TokenLayout",
    "TraceFlags",
    "attention_cost",
    "backend_name",
    "binarize",
    "build_rcm_mask",
    "build_wta_mask",
    "cts_forward",
    "derive_seed",
    "encode_image",
    "encode_prompt",
    "fnv1a64",
    "init_model",
    "masked_attention",
    "masked_attention_weights",
    "mma_forward",
    "noise_to_t",
    "otsu_threshold",
    "parse_run_config",
    "predict_velocity",
    "project_qkv",
    "rcm_saliency",
    "reference_forward",
    "row_softmax",
    "run_pipeline",
    "run_t2i_baseline",
    "seeded_gaussian",
    "wta_saliency",
    "wta_winners",
]

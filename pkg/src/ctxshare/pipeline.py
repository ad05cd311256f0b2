"""Full run orchestration.

A run is a sequential state machine over (step, layer). Each step re-noises
every reference from its clean latent to the current level, resets reference
prompt tokens to their encoded values, runs the layer stack (reference
passes first, then the output pass with contextual sharing), predicts a
velocity and takes one Euler step of the rectified-flow interpolation
x_t = (1 - t/T) x_0 + (t/T) eps. References never see the output latent, so
their per-step state depends only on (clean latent, seed, ref index, t).
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import InvalidConfig
from .imageio import read_image
from .model import (
    VISION,
    Model,
    ModelConfig,
    TokenBlock,
    encode_image,
    encode_prompt,
    init_model,
    mma_forward,
    predict_velocity,
    zero_mask,
)
from .numerics import derive_seed, seeded_gaussian
from .refmask import cts_forward, reference_forward

GENERATE = "generate"
EDIT = "edit"


@dataclass(frozen=True)
class TraceFlags:
    tokens: bool = False
    masks: bool = False
    saliency: bool = False

    @property
    def any(self) -> bool:
        return self.tokens or self.masks or self.saliency


@dataclass(frozen=True)
class ReferenceSpec:
    image: str
    prompt: str = ""  # empty reference prompts are fine


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    steps: int = 4  # full-scale default is 28
    cfg_scale: float = 0.0  # full-scale default is 5
    prompt: str = ""
    references: tuple = ()
    rcm_enabled: bool = True
    wta_enabled: bool = True
    trace: TraceFlags = field(default_factory=TraceFlags)
    seed: int = 0
    mode: str = GENERATE
    init_image: Optional[str] = None

    def validate(self) -> "RunConfig":
        self.model.validate()
        if self.steps < 1:
            raise InvalidConfig(f"steps must be >= 1, got {self.steps}")
        if self.cfg_scale < 0:
            raise InvalidConfig(f"cfg_scale must be >= 0, got {self.cfg_scale}")
        if self.mode not in (GENERATE, EDIT):
            raise InvalidConfig(f"mode must be '{GENERATE}' or '{EDIT}', got {self.mode!r}")
        if self.mode == EDIT and not self.init_image:
            raise InvalidConfig("edit mode requires init_image")
        return self


@dataclass
class ReferenceBundle:
    """One reference's clean latent, prompt tokens and per-step noised latent."""

    clean_latent: TokenBlock
    prompt_tokens: TokenBlock
    noised_latent: Optional[TokenBlock] = None


@dataclass
class TraceEntry:
    """Everything observed at one (step, layer), per the trace flags.

    Token snapshots are the states *entering* the layer.
    """

    out_prompt_tokens: Optional[np.ndarray] = None
    ref_prompt_tokens: Optional[list] = None
    rcm_saliency: Optional[list] = None
    rcm_salient: Optional[list] = None
    rcm_degenerate: Optional[list] = None
    rcm_masks: Optional[list] = None
    wta_saliency: Optional[np.ndarray] = None
    wta_winners: Optional[np.ndarray] = None
    wta_mask: Optional[np.ndarray] = None


@dataclass
class RunTrace:
    flags: TraceFlags
    entries: dict = field(default_factory=dict)  # (t, l) -> TraceEntry


@dataclass
class RunResult:
    final_latent: TokenBlock
    trace: RunTrace
    metrics: dict


@dataclass
class RunState:
    """Mutable per-run state threaded through run_step / run_layer."""

    model: Model
    config: RunConfig
    trace: RunTrace
    x: np.ndarray
    encoded_prompt: TokenBlock
    empty_prompt: TokenBlock
    bundles: list
    gate: int
    out_vision: Optional[TokenBlock] = None
    out_prompt: Optional[TokenBlock] = None
    ref_visions: list = field(default_factory=list)
    ref_prompts: list = field(default_factory=list)
    t: int = 0
    rcm_degenerate_events: int = 0


def _reject_unknown(doc: dict, allowed, what: str) -> None:
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise InvalidConfig(f"unknown {what} key(s): {', '.join(unknown)}")


def _typed(doc: dict, key, kind, default, what: str):
    if key not in doc:
        return default
    val = doc[key]
    if kind is float and isinstance(val, int) and not isinstance(val, bool):
        val = float(val)
    if kind is int and isinstance(val, bool):
        raise InvalidConfig(f"{what}.{key} must be {kind.__name__}, got bool")
    if not isinstance(val, kind):
        raise InvalidConfig(f"{what}.{key} must be {kind.__name__}, got {type(val).__name__}")
    return val


def parse_model_config(doc: dict) -> ModelConfig:
    if not isinstance(doc, dict):
        raise InvalidConfig("model config must be a JSON object")
    _reject_unknown(doc, ("L", "d", "H", "n_I", "n_P", "rcm_gate_layer", "seed"), "model")
    base = ModelConfig()
    return ModelConfig(
        L=_typed(doc, "L", int, base.L, "model"),
        d=_typed(doc, "d", int, base.d, "model"),
        H=_typed(doc, "H", int, base.H, "model"),
        n_I=_typed(doc, "n_I", int, base.n_I, "model"),
        n_P=_typed(doc, "n_P", int, base.n_P, "model"),
        rcm_gate_layer=_typed(doc, "rcm_gate_layer", int, base.rcm_gate_layer, "model"),
        seed=_typed(doc, "seed", int, base.seed, "model"),
    ).validate()


def parse_trace_flags(doc) -> TraceFlags:
    if not isinstance(doc, dict):
        raise InvalidConfig("trace config must be a JSON object")
    _reject_unknown(doc, ("tokens", "masks", "saliency"), "trace")
    return TraceFlags(
        tokens=_typed(doc, "tokens", bool, False, "trace"),
        masks=_typed(doc, "masks", bool, False, "trace"),
        saliency=_typed(doc, "saliency", bool, False, "trace"),
    )


def _parse_reference(doc, base_dir: Optional[Path]) -> ReferenceSpec:
    if not isinstance(doc, dict):
        raise InvalidConfig("each reference must be a JSON object")
    _reject_unknown(doc, ("image", "prompt"), "reference")
    if "image" not in doc:
        raise InvalidConfig("reference entry missing 'image'")
    image = _typed(doc, "image", str, None, "reference")
    prompt = _typed(doc, "prompt", str, "", "reference")
    return ReferenceSpec(image=_resolve(image, base_dir), prompt=prompt)


def _resolve(path: Optional[str], base_dir: Optional[Path]) -> Optional[str]:
    if path is None or base_dir is None:
        return path
    p = Path(path)
    return str(p if p.is_absolute() else base_dir / p)


def parse_run_config(doc: dict, base_dir: Optional[Path] = None) -> RunConfig:
    """Strict RunConfig parser: unknown keys are fatal, relative image paths
    resolve against base_dir (normally the config file's directory)."""
    if not isinstance(doc, dict):
        raise InvalidConfig("run config must be a JSON object")
    _reject_unknown(
        doc,
        (
            "model",
            "steps",
            "cfg_scale",
            "prompt",
            "references",
            "rcm_enabled",
            "wta_enabled",
            "trace",
            "seed",
            "mode",
            "init_image",
        ),
        "run",
    )
    refs_doc = doc.get("references", [])
    if not isinstance(refs_doc, list):
        raise InvalidConfig("run.references must be a JSON array")
    init_image = doc.get("init_image")
    if init_image is not None and not isinstance(init_image, str):
        raise InvalidConfig("run.init_image must be a string or null")
    return RunConfig(
        model=parse_model_config(doc.get("model", {})),
        steps=_typed(doc, "steps", int, 4, "run"),
        cfg_scale=_typed(doc, "cfg_scale", float, 0.0, "run"),
        prompt=_typed(doc, "prompt", str, "", "run"),
        references=tuple(_parse_reference(r, base_dir) for r in refs_doc),
        rcm_enabled=_typed(doc, "rcm_enabled", bool, True, "run"),
        wta_enabled=_typed(doc, "wta_enabled", bool, True, "run"),
        trace=parse_trace_flags(doc.get("trace", {})),
        seed=_typed(doc, "seed", int, 0, "run"),
        mode=_typed(doc, "mode", str, GENERATE, "run"),
        init_image=_resolve(init_image, base_dir),
    ).validate()


def noise_to_t(clean: TokenBlock, t: int, steps: int, noise_seed: int) -> TokenBlock:
    """Rectified-flow noising x_t = (1 - t/T) x_0 + (t/T) eps, 0 <= t <= T.

    Gaussian eps only; swapping in an inversion-based noise source would slot
    in here.
    """
    sigma = t / steps
    eps = seeded_gaussian(noise_seed, *clean.tokens.shape)
    return TokenBlock(clean.modality, (1.0 - sigma) * clean.tokens + sigma * eps, clean.origin)


def thread_count() -> int:
    """Worker cap for per-reference forwards, from TFTI2I_THREADS (default 1)."""
    raw = os.environ.get("TFTI2I_THREADS", "1").strip()
    try:
        n = int(raw)
    except ValueError as exc:
        raise InvalidConfig(f"TFTI2I_THREADS must be an integer, got {raw!r}") from exc
    return max(1, n)


def _record_layer(state: RunState, l: int, snaps, rcms, cts_trace) -> None:
    flags = state.trace.flags
    if not flags.any:
        return
    entry = TraceEntry()
    if flags.tokens:
        entry.out_prompt_tokens = state.out_prompt.tokens.copy()
        entry.ref_prompt_tokens = [s.tokens.copy() for s in snaps]
    if flags.saliency:
        entry.rcm_saliency = [r.saliency.copy() for r in rcms]
        entry.rcm_salient = [r.salient.copy() for r in rcms]
        entry.rcm_degenerate = [r.degenerate for r in rcms]
        if cts_trace.saliency is not None:
            entry.wta_saliency = cts_trace.saliency.copy()
            entry.wta_winners = cts_trace.winners.copy()
    if flags.masks:
        entry.rcm_masks = [r.mask.copy() for r in rcms]
        entry.wta_mask = cts_trace.mask.copy()
    state.trace.entries[(state.t, l)] = entry


def run_layer(state: RunState, l: int) -> RunState:
    """One layer: reference passes on layer-l snapshots, then the output pass.

    Reference passes are independent of each other and of the output update;
    the output pass consumes the pre-update contextual snapshots, so the
    per-reference order (or parallelism) cannot change the result.
    """
    model = state.model
    snaps = [p.copy() for p in state.ref_prompts]

    def one_ref(r):
        return reference_forward(
            state.ref_visions[r], state.ref_prompts[r], state.out_prompt, l, model, state.gate
        )

    n_refs = len(state.ref_visions)
    workers = min(thread_count(), n_refs) if n_refs else 1
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one_ref, range(n_refs)))
    else:
        results = [one_ref(r) for r in range(n_refs)]

    rcms = []
    for r, (v_new, p_new, rcm) in enumerate(results):
        state.ref_visions[r] = v_new
        state.ref_prompts[r] = p_new
        rcms.append(rcm)
        if rcm.degenerate:
            state.rcm_degenerate_events += 1

    out_v, out_p, cts_trace = cts_forward(
        state.out_vision, state.out_prompt, snaps, l, model, state.config.wta_enabled
    )
    _record_layer(state, l, snaps, rcms, cts_trace)
    state.out_vision = out_v
    state.out_prompt = out_p
    return state


def _cfg_velocity(state: RunState, v_cond: np.ndarray) -> np.ndarray:
    """Classifier-free guidance: lerp between an unconditional pass and v_cond."""
    g = state.config.cfg_scale
    if g == 0.0:
        return v_cond
    model = state.model
    uv = TokenBlock(VISION, state.x.copy(), "output")
    up = state.empty_prompt.copy()
    zm = zero_mask(uv.n + up.n, uv.n + up.n)
    for l in range(model.config.L):
        uv, up = mma_forward(uv, up, zm, l, model)
    v_uncond = predict_velocity(uv, model)
    return (1.0 - g) * v_uncond + g * v_cond


def begin_step(state: RunState, t: int) -> RunState:
    """Start-of-step refresh: re-noise references from clean latents to level t
    and reset all working token blocks to their encoded values."""
    cfg = state.config
    state.t = t
    for r, bundle in enumerate(state.bundles):
        bundle.noised_latent = noise_to_t(
            bundle.clean_latent, t, cfg.steps, derive_seed(cfg.seed, "ref_noise", r, t)
        )
    state.ref_visions = [b.noised_latent.copy() for b in state.bundles]
    state.ref_prompts = [b.prompt_tokens.copy() for b in state.bundles]
    state.out_vision = TokenBlock(VISION, state.x.copy(), "output")
    state.out_prompt = state.encoded_prompt.copy()
    return state


def run_step(state: RunState, t: int) -> RunState:
    """One sampler step at level t: refresh references, run all layers, Euler update."""
    begin_step(state, t)
    for l in range(state.model.config.L):
        run_layer(state, l)
    v = _cfg_velocity(state, predict_velocity(state.out_vision, state.model))
    state.x = state.x - v / state.config.steps
    return state


def _initial_latent(config: RunConfig, model: Model) -> np.ndarray:
    init_seed = derive_seed(config.seed, "init")
    cfg = model.config
    if config.mode == EDIT:
        clean = encode_image(read_image(config.init_image), model)
        return noise_to_t(clean, config.steps, config.steps, init_seed).tokens
    return seeded_gaussian(init_seed, cfg.n_I, cfg.d)


def _metrics(state: RunState) -> dict:
    x = state.x
    return {
        "final_latent_norm": float(np.linalg.norm(x)),
        "final_latent_mean": float(x.mean()),
        "final_latent_min": float(x.min()),
        "final_latent_max": float(x.max()),
        "rcm_degenerate_events": float(state.rcm_degenerate_events),
        "reference_count": float(len(state.bundles)),
        "steps": float(state.config.steps),
    }


def prepare_state(config: RunConfig) -> RunState:
    """Model init, reference encoding and the initial latent for one run."""
    config.validate()
    model = init_model(config.model)
    bundles = [
        ReferenceBundle(
            clean_latent=encode_image(read_image(ref.image), model),
            prompt_tokens=encode_prompt(ref.prompt, model),
        )
        for ref in config.references
    ]
    return RunState(
        model=model,
        config=config,
        trace=RunTrace(config.trace),
        x=_initial_latent(config, model),
        encoded_prompt=encode_prompt(config.prompt, model),
        empty_prompt=encode_prompt("", model),
        bundles=bundles,
        gate=config.model.rcm_gate_layer if config.rcm_enabled else config.model.L,
    )


def run_pipeline(config: RunConfig) -> RunResult:
    """Full reference-conditioned run; deterministic under (config, seed)."""
    state = prepare_state(config)
    for t in range(config.steps, 0, -1):
        run_step(state, t)
    return RunResult(TokenBlock(VISION, state.x, "output"), state.trace, _metrics(state))


def run_t2i_baseline(config: RunConfig) -> RunResult:
    """Vanilla text-to-image loop: no references, no masks.

    Written as its own plain loop (not a delegation) so it can serve as the
    regression oracle for the R = 0 sharing path.
    """
    config.validate()
    model = init_model(config.model)
    cfg = model.config
    trace = RunTrace(config.trace)
    encoded = encode_prompt(config.prompt, model)
    baseline_config = replace(config, references=(), rcm_enabled=False, wta_enabled=False)
    state = RunState(
        model=model,
        config=baseline_config,
        trace=trace,
        x=_initial_latent(config, model),
        encoded_prompt=encoded,
        empty_prompt=encode_prompt("", model),
        bundles=[],
        gate=cfg.L,
    )
    zm = zero_mask(cfg.n_I + cfg.n_P, cfg.n_I + cfg.n_P)
    for t in range(config.steps, 0, -1):
        state.t = t
        vision = TokenBlock(VISION, state.x.copy(), "output")
        prompt = encoded.copy()
        for l in range(cfg.L):
            if trace.flags.tokens:
                trace.entries[(t, l)] = TraceEntry(out_prompt_tokens=prompt.tokens.copy())
            vision, prompt = mma_forward(vision, prompt, zm, l, model)
        state.out_vision = vision
        v = _cfg_velocity(state, predict_velocity(vision, model))
        state.x = state.x - v / config.steps
    return RunResult(TokenBlock(VISION, state.x, "output"), trace, _metrics(state))

"""Desk-scale diagnostics.

* cluster_separation: do prompt tokens absorb image information during the
  forward pass? Pooled prompt tokens from many prompts, grouped by which
  image they ran with, should separate in deeper layers; the score is a
  Fisher ratio (squared centroid distance over mean within-group variance).
* token_replacement: are those absorbed features transferable? Re-running a
  seed while substituting the prompt-token trajectory recorded from another
  seed should pull the output toward the donor run.
* reference_variance: how much do attention heads disagree per vision token
  as references are added, with and without winner-takes-all masking?
* cost_report: closed-form key-count comparison, per reference count.
"""

from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidConfig
from .model import (
    TEXT,
    VISION,
    Model,
    TokenBlock,
    encode_image,
    encode_prompt,
    mma_forward,
    predict_velocity,
    zero_mask,
)
from .numerics import derive_seed, seeded_gaussian
from .pipeline import RunConfig, begin_step, noise_to_t, prepare_state, run_layer
from .refmask import attention_cost, cts_forward

# Word banks for the four-slot prompt template; 50 deterministic draws below.
OBJECTS = ("leopard", "zebra", "lion", "lizard", "kangaroo", "car", "television", "house")
TEXTURES = ("stars and galaxy", "water", "fire", "cloud", "smoke", "grass", "sand", "stone", "ice")
ACTIONS = ("sleeping", "playing ball", "wearing glasses", "eating a burger", "hugging", "handstand", "smiling", "crying")
BACKGROUNDS = ("haunted mansion", "palace", "church", "graveyard", "school", "hospital", "restaurant", "beach")

TEMPLATE = "{obj} with the texture of {tex} doing {act} in the background of {bg}"


def template_prompts(count: int = 50) -> list:
    """Deterministic prompt set from the four word banks (coprime strides)."""
    out = []
    for i in range(count):
        out.append(
            TEMPLATE.format(
                obj=OBJECTS[i % len(OBJECTS)],
                tex=TEXTURES[(2 * i) % len(TEXTURES)],
                act=ACTIONS[(3 * i) % len(ACTIONS)],
                bg=BACKGROUNDS[(5 * i) % len(BACKGROUNDS)],
            )
        )
    return out


def builtin_images(size: int = 64):
    """Two visually distinct deterministic byte grids (stripes, checkerboard)."""
    i = np.arange(size)[:, None]
    j = np.arange(size)[None, :]
    stripes = ((i * 3 + j * 5) % 256).astype(np.uint8)
    checker = (((i // 8 + j // 8) % 2) * 255).astype(np.uint8)
    return stripes, checker


@dataclass(frozen=True)
class ClusterReport:
    """Fisher separation of image-conditioned pooled prompt tokens."""

    prompt_count: int
    layers: tuple
    timesteps: tuple
    steps: int
    scores: dict  # (layer, t) -> float


@dataclass(frozen=True)
class ReplacementReport:
    seed_a: int
    seed_b: int
    d_aa_prime: float  # identity replacement; exactly 0
    d_aprime_b: float  # cross-replaced run vs donor B
    d_aprime_a: float  # cross-replaced run vs original A


@dataclass(frozen=True)
class VarianceEntry:
    R: int
    wta_off: float
    wta_on: float


@dataclass(frozen=True)
class VarianceReport:
    probe_t: int
    probe_layer: int
    entries: tuple


def _fisher_separation(group_a: np.ndarray, group_b: np.ndarray) -> float:
    """||c_a - c_b||^2 over the mean within-group variance; exact 0 when the
    centroids coincide bit-for-bit."""
    c_a = group_a.mean(axis=0)
    c_b = group_b.mean(axis=0)
    between = float(np.sum((c_a - c_b) ** 2))
    if between == 0.0:
        return 0.0
    var_a = float(np.mean(np.sum((group_a - c_a) ** 2, axis=1)))
    var_b = float(np.mean(np.sum((group_b - c_b) ** 2, axis=1)))
    return between / ((var_a + var_b) / 2.0)


def cluster_separation(
    model: Model,
    prompts: list,
    images,
    layers,
    timesteps,
    steps: int = 4,
) -> ClusterReport:
    """Vanilla dual-update forwards at fixed noise levels, pooled per prompt.

    For each (prompt, image) pair the image tokens are noised to level t with
    a per-(image, t) stream off the model seed, then the pair runs through
    the layer stack; the prompt tokens entering layer l are mean-pooled into
    one vector. Scores compare the two image-conditioned groups.
    """
    if len(prompts) < 2:
        raise InvalidConfig("need at least 2 prompts")
    if len(images) != 2:
        raise InvalidConfig("need exactly 2 images")
    cfg = model.config
    layers = tuple(layers)
    timesteps = tuple(timesteps)
    for l in layers:
        if not 0 <= l < cfg.L:
            raise InvalidConfig(f"probe layer {l} outside [0, {cfg.L})")
    zm = zero_mask(cfg.n_I + cfg.n_P, cfg.n_I + cfg.n_P)
    # pooled[(layer, t)][image_idx] -> list of d-vectors, one per prompt
    pooled = {(l, t): ([], []) for l in layers for t in timesteps}
    for t in timesteps:
        for img_idx, img in enumerate(images):
            clean = encode_image(np.asarray(img), model)
            noised = noise_to_t(clean, t, steps, derive_seed(cfg.seed, "cluster_noise", img_idx, t))
            for prompt in prompts:
                vision = noised.copy()
                text = encode_prompt(prompt, model)
                for l in range(cfg.L):
                    if l in layers:
                        pooled[(l, t)][img_idx].append(text.tokens.mean(axis=0))
                    vision, text = mma_forward(vision, text, zm, l, model)
    scores = {
        key: _fisher_separation(np.asarray(groups[0]), np.asarray(groups[1]))
        for key, groups in pooled.items()
    }
    return ClusterReport(
        prompt_count=len(prompts), layers=layers, timesteps=timesteps, steps=steps, scores=scores
    )


def _vanilla_run(model: Model, prompt: str, seed: int, steps: int, inject=None, record=False):
    """Plain dual-update sampling loop; optionally records or overrides the
    prompt tokens entering each (t, layer)."""
    cfg = model.config
    zm = zero_mask(cfg.n_I + cfg.n_P, cfg.n_I + cfg.n_P)
    encoded = encode_prompt(prompt, model)
    x = seeded_gaussian(derive_seed(seed, "init"), cfg.n_I, cfg.d)
    recorded = {} if record else None
    for t in range(steps, 0, -1):
        vision = TokenBlock(VISION, x.copy(), "output")
        text = encoded.copy()
        for l in range(cfg.L):
            if inject is not None:
                text = TokenBlock(TEXT, inject[(t, l)].copy(), text.origin)
            if record:
                recorded[(t, l)] = text.tokens.copy()
            vision, text = mma_forward(vision, text, zm, l, model)
        x = x - predict_velocity(vision, model) / steps
    return x, recorded


def token_replacement(model: Model, prompt: str, seed_a: int, seed_b: int, steps: int = 4) -> ReplacementReport:
    """Record two runs of one prompt under different seeds, then re-run the
    first with the second's prompt-token trajectory spliced in."""
    final_a, rec_a = _vanilla_run(model, prompt, seed_a, steps, record=True)
    final_b, rec_b = _vanilla_run(model, prompt, seed_b, steps, record=True)
    final_identity, _ = _vanilla_run(model, prompt, seed_a, steps, inject=rec_a)
    final_cross, _ = _vanilla_run(model, prompt, seed_a, steps, inject=rec_b)
    return ReplacementReport(
        seed_a=seed_a,
        seed_b=seed_b,
        d_aa_prime=float(np.linalg.norm(final_identity - final_a)),
        d_aprime_b=float(np.linalg.norm(final_cross - final_b)),
        d_aprime_a=float(np.linalg.norm(final_cross - final_a)),
    )


def _head_output_probe(config: RunConfig, probe_layer: int) -> np.ndarray:
    """Per-head output-pass attention outputs at (t = steps, probe_layer)."""
    state = prepare_state(config)
    begin_step(state, config.steps)
    for l in range(probe_layer):
        run_layer(state, l)
    snaps = [p.copy() for p in state.ref_prompts]
    _, _, trace = cts_forward(
        state.out_vision,
        state.out_prompt,
        snaps,
        probe_layer,
        state.model,
        config.wta_enabled,
        keep_head_outputs=True,
    )
    return trace.head_outputs


def reference_variance(config: RunConfig, r_values, probe_layer=None) -> VarianceReport:
    """Across-head variance of per-token head outputs as references grow.

    Probes the first sampler step (t = steps). For each R the first R
    references of the config are used; the run is executed once with
    winner-takes-all off and once with it on. Values are reported, not
    judged: the comparison itself is the measurement.
    """
    r_values = [int(r) for r in r_values]
    if not r_values:
        raise InvalidConfig("r_values must be nonempty")
    if max(r_values) > len(config.references):
        raise InvalidConfig(
            f"config provides {len(config.references)} references, need {max(r_values)}"
        )
    cfg = config.model
    lp = cfg.L - 1 if probe_layer is None else int(probe_layer)
    if not 0 <= lp < cfg.L:
        raise InvalidConfig(f"probe layer {lp} outside [0, {cfg.L})")
    entries = []
    for r in r_values:
        values = {}
        for wta in (False, True):
            sub = replace(config, references=config.references[:r], wta_enabled=wta)
            ho = _head_output_probe(sub, lp)  # (H, n_I + n_P, d_h)
            vision_ho = ho[:, : cfg.n_I, :]
            per_token = np.var(vision_ho, axis=0).mean(axis=1)
            values[wta] = float(per_token.mean())
        entries.append(VarianceEntry(R=r, wta_off=values[False], wta_on=values[True]))
    return VarianceReport(probe_t=config.steps, probe_layer=lp, entries=tuple(entries))


def cost_report(r_values, n_I: int, n_P: int) -> list:
    """attention_cost per R value; see CostReport.cts_over_share for the ratio."""
    return [attention_cost(int(r), n_I, n_P) for r in r_values]

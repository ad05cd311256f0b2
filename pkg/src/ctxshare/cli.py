"""Command-line entry point.

Every command reads a strict JSON config (unknown keys are fatal), writes its
outputs under --out and finishes with a manifest.json listing each emitted
file with a 64-bit FNV-1a content checksum. Outputs carry no timestamps, so
identical configs produce byte-identical manifests.

Exit codes: 0 success, 1 config error, 2 runtime error.
"""

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .analysis import (
    builtin_images,
    cluster_separation,
    cost_report,
    reference_variance,
    template_prompts,
    token_replacement,
)
from .errors import CtxShareError, InvalidConfig
from .imageio import read_image, write_pgm
from .model import init_model
from .numerics import fnv1a64
from .pipeline import (
    RunConfig,
    TraceFlags,
    parse_model_config,
    parse_run_config,
    run_pipeline,
    run_t2i_baseline,
)

COMMANDS = ("generate", "baseline", "cluster", "replace", "variance", "cost", "dump-masks", "selftest")


class _Outputs:
    """Collects written files and renders the manifest."""

    def __init__(self, out_dir: Path):
        self.out_dir = out_dir
        self.files = []

    def path(self, name: str) -> Path:
        p = self.out_dir / name
        self.files.append(name)
        return p

    def write_json(self, name: str, obj) -> None:
        self.path(name).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def write_csv(self, name: str, arr, fmt: str = "%.17g") -> None:
        np.savetxt(self.path(name), np.asarray(arr), delimiter=",", fmt=fmt)

    def write_mask_pgm(self, name: str, mask) -> None:
        # 0 = blocked, 255 = pass
        write_pgm(self.path(name), np.where(np.isneginf(mask), 0, 255).astype(np.uint8))

    def finish(self) -> None:
        entries = []
        for name in sorted(self.files):
            data = (self.out_dir / name).read_bytes()
            entries.append(
                {"path": name, "bytes": len(data), "fnv1a64": f"{fnv1a64(data):016x}"}
            )
        manifest = json.dumps({"files": entries}, indent=2, sort_keys=True) + "\n"
        (self.out_dir / "manifest.json").write_text(manifest)


def _load_config(path: str) -> tuple:
    p = Path(path)
    try:
        doc = json.loads(p.read_text())
    except OSError as exc:
        raise InvalidConfig(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise InvalidConfig(f"config {path} must hold a JSON object")
    return doc, p.parent


def _apply_overrides(config: RunConfig, args) -> RunConfig:
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.trace is not None:
        wanted = [s for s in args.trace.split(",") if s]
        unknown = sorted(set(wanted) - {"tokens", "masks", "saliency"})
        if unknown:
            raise InvalidConfig(f"unknown trace flag(s): {', '.join(unknown)}")
        config = replace(
            config,
            trace=TraceFlags(
                tokens="tokens" in wanted, masks="masks" in wanted, saliency="saliency" in wanted
            ),
        )
    return config


def _dump_trace(out: _Outputs, trace) -> None:
    for (t, l), e in sorted(trace.entries.items()):
        if e.out_prompt_tokens is not None:
            out.write_csv(f"tokens_out_prompt_t{t}_l{l}.csv", e.out_prompt_tokens)
            for r, tok in enumerate(e.ref_prompt_tokens, start=1):
                out.write_csv(f"tokens_ref{r}_prompt_t{t}_l{l}.csv", tok)
        if e.rcm_saliency is not None:
            for r, sal in enumerate(e.rcm_saliency, start=1):
                out.write_csv(f"saliency_rcm_t{t}_l{l}_ref{r}.csv", sal)
        if e.wta_saliency is not None:
            out.write_csv(f"saliency_wta_t{t}_l{l}.csv", e.wta_saliency)
            out.write_csv(f"winners_t{t}_l{l}.csv", e.wta_winners, fmt="%d")
        if e.rcm_masks is not None:
            for r, mask in enumerate(e.rcm_masks, start=1):
                out.write_mask_pgm(f"mask_rcm_{t}_{l}_{r}.pgm", mask)
            out.write_mask_pgm(f"mask_wta_{t}_{l}_0.pgm", e.wta_mask)


def _run_result_outputs(out: _Outputs, result) -> None:
    out.write_csv("final_latent.csv", result.final_latent.tokens)
    out.write_json("metrics.json", result.metrics)
    _dump_trace(out, result.trace)


def _cmd_generate(doc, base_dir, args, out):
    config = _apply_overrides(parse_run_config(doc, base_dir), args)
    _run_result_outputs(out, run_pipeline(config))


def _cmd_baseline(doc, base_dir, args, out):
    config = _apply_overrides(parse_run_config(doc, base_dir), args)
    _run_result_outputs(out, run_t2i_baseline(config))


def _pop_typed(doc, key, default):
    return doc.pop(key) if key in doc else default


def _as_int(val, what: str) -> int:
    if isinstance(val, bool) or not isinstance(val, int):
        raise InvalidConfig(f"{what} must be an integer, got {val!r}")
    return val


def _as_int_list(val, what: str) -> list:
    if not isinstance(val, list) or not val:
        raise InvalidConfig(f"{what} must be a nonempty JSON array of integers")
    return [_as_int(v, what) for v in val]


def _cmd_cluster(doc, base_dir, args, out):
    doc = dict(doc)
    model_doc = _pop_typed(doc, "model", {})
    prompt_count = _pop_typed(doc, "prompt_count", 50)
    images = _pop_typed(doc, "images", None)
    layers = _pop_typed(doc, "layers", None)
    timesteps = _pop_typed(doc, "timesteps", None)
    steps = _pop_typed(doc, "steps", 4)
    if doc:
        raise InvalidConfig(f"unknown cluster key(s): {', '.join(sorted(doc))}")
    prompt_count = _as_int(prompt_count, "cluster.prompt_count")
    steps = _as_int(steps, "cluster.steps")
    if steps < 1:
        raise InvalidConfig("cluster.steps must be >= 1")
    model_config = parse_model_config(model_doc)
    if args.seed is not None:
        model_config = replace(model_config, seed=args.seed).validate()
    model = init_model(model_config)
    if layers is None:
        layers = sorted({1, (model_config.L + 1) // 2, model_config.L - 1} | {0})
    else:
        layers = _as_int_list(layers, "cluster.layers")
    if timesteps is None:
        timesteps = sorted({round(0.8 * steps), round(0.5 * steps)})
    else:
        timesteps = _as_int_list(timesteps, "cluster.timesteps")
    if images is None:
        imgs = builtin_images()
    else:
        if not isinstance(images, list) or len(images) != 2:
            raise InvalidConfig("cluster.images must be a 2-element array of paths")
        imgs = tuple(read_image(str(Path(base_dir) / p) if not Path(p).is_absolute() else p) for p in images)
    report = cluster_separation(
        model, template_prompts(prompt_count), imgs, layers, timesteps, steps
    )
    rows = [
        {"layer": l, "t": t, "separation": report.scores[(l, t)]}
        for (l, t) in sorted(report.scores)
    ]
    out.write_json(
        "cluster_report.json",
        {
            "prompt_count": report.prompt_count,
            "steps": report.steps,
            "layers": list(report.layers),
            "timesteps": list(report.timesteps),
            "scores": rows,
        },
    )
    out.write_csv(
        "separation_scores.csv",
        np.array([[r["layer"], r["t"], r["separation"]] for r in rows]),
    )


def _cmd_replace(doc, base_dir, args, out):
    doc = dict(doc)
    model_doc = _pop_typed(doc, "model", {})
    prompt = _pop_typed(doc, "prompt", "a princess in the dress")
    seed_a = _pop_typed(doc, "seed_a", 1)
    seed_b = _pop_typed(doc, "seed_b", 2)
    steps = _pop_typed(doc, "steps", 4)
    if doc:
        raise InvalidConfig(f"unknown replace key(s): {', '.join(sorted(doc))}")
    if not isinstance(prompt, str):
        raise InvalidConfig("replace.prompt must be a string")
    seed_a = _as_int(seed_a, "replace.seed_a")
    seed_b = _as_int(seed_b, "replace.seed_b")
    steps = _as_int(steps, "replace.steps")
    if steps < 1:
        raise InvalidConfig("replace.steps must be >= 1")
    model = init_model(parse_model_config(model_doc))
    report = token_replacement(model, prompt, seed_a, seed_b, steps)
    out.write_json(
        "replacement_report.json",
        {
            "prompt": prompt,
            "seed_a": report.seed_a,
            "seed_b": report.seed_b,
            "d_aa_prime": report.d_aa_prime,
            "d_aprime_b": report.d_aprime_b,
            "d_aprime_a": report.d_aprime_a,
        },
    )


def _cmd_variance(doc, base_dir, args, out):
    doc = dict(doc)
    r_values = _pop_typed(doc, "r_values", None)
    probe_layer = _pop_typed(doc, "probe_layer", None)
    if r_values is None:
        raise InvalidConfig("variance config requires r_values")
    r_values = _as_int_list(r_values, "variance.r_values")
    if probe_layer is not None:
        probe_layer = _as_int(probe_layer, "variance.probe_layer")
    config = _apply_overrides(parse_run_config(doc, base_dir), args)
    report = reference_variance(config, r_values, probe_layer)
    out.write_json(
        "variance_report.json",
        {
            "probe_t": report.probe_t,
            "probe_layer": report.probe_layer,
            "entries": [
                {"R": e.R, "wta_off": e.wta_off, "wta_on": e.wta_on} for e in report.entries
            ],
        },
    )


def _cmd_cost(doc, base_dir, args, out):
    doc = dict(doc)
    r_values = _pop_typed(doc, "r_values", [1, 2, 4])
    n_i = _pop_typed(doc, "n_I", 4096)
    n_p = _pop_typed(doc, "n_P", 333)
    if doc:
        raise InvalidConfig(f"unknown cost key(s): {', '.join(sorted(doc))}")
    r_values = _as_int_list(r_values, "cost.r_values")
    n_i = _as_int(n_i, "cost.n_I")
    n_p = _as_int(n_p, "cost.n_P")
    if n_i < 1 or n_p < 1 or min(r_values) < 0:
        raise InvalidConfig("cost needs n_I, n_P >= 1 and r_values >= 0")
    reports = cost_report(r_values, n_i, n_p)
    out.write_json(
        "cost_report.json",
        {
            "n_I": n_i,
            "n_P": n_p,
            "reports": [
                {
                    "R": r.R,
                    "prompt_to_vision_ratio": r.prompt_to_vision_ratio,
                    "share_factor": r.share_factor,
                    "cts_factor": r.cts_factor,
                    "cts_over_share": r.cts_over_share,
                    "exact_share_keys": r.exact_share_keys,
                    "exact_cts_keys": r.exact_cts_keys,
                }
                for r in reports
            ],
        },
    )


def _cmd_dump_masks(doc, base_dir, args, out):
    config = _apply_overrides(parse_run_config(doc, base_dir), args)
    config = replace(config, trace=TraceFlags(tokens=False, masks=True, saliency=True))
    result = run_pipeline(config)
    for (t, l), e in sorted(result.trace.entries.items()):
        for r, mask in enumerate(e.rcm_masks, start=1):
            out.write_mask_pgm(f"mask_rcm_{t}_{l}_{r}.pgm", mask)
        out.write_mask_pgm(f"mask_wta_{t}_{l}_0.pgm", e.wta_mask)
    out.write_json("metrics.json", result.metrics)


def _cmd_selftest(doc, base_dir, args, out):
    doc = dict(doc)
    seeds = _pop_typed(doc, "seeds", [0, 1])
    if doc:
        raise InvalidConfig(f"unknown selftest key(s): {', '.join(sorted(doc))}")
    seeds = _as_int_list(seeds, "selftest.seeds")
    checks = []
    for seed in seeds:
        config = RunConfig(rcm_enabled=False, wta_enabled=False, prompt="self test", seed=int(seed))
        a = run_pipeline(config).final_latent.tokens
        b = run_t2i_baseline(config).final_latent.tokens
        same = a.tobytes() == b.tobytes()
        checks.append({"name": f"vanilla_equivalence_seed{seed}", "passed": bool(same)})
    out.write_json("selftest.json", {"checks": checks})
    if not all(c["passed"] for c in checks):
        raise CtxShareError("selftest failed: R=0 run diverged from the baseline")


_RUNNERS = {
    "generate": _cmd_generate,
    "baseline": _cmd_baseline,
    "cluster": _cmd_cluster,
    "replace": _cmd_replace,
    "variance": _cmd_variance,
    "cost": _cmd_cost,
    "dump-masks": _cmd_dump_masks,
    "selftest": _cmd_selftest,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctxshare",
        description="Contextual-token sharing experiments on a toy multimodal DiT.",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON config path (optional for cost/selftest)")
    parser.add_argument("--out", required=True, help="output directory (must not exist unless --force)")
    parser.add_argument("--force", action="store_true", help="allow writing into an existing directory")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--trace", default=None, help="comma list of tokens,masks,saliency")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.config is not None:
            doc, base_dir = _load_config(args.config)
        elif args.command in ("cost", "selftest"):
            doc, base_dir = {}, Path(".")
        else:
            raise InvalidConfig(f"command {args.command!r} requires --config")
        out_dir = Path(args.out)
        if out_dir.exists() and not args.force:
            raise InvalidConfig(f"output directory {out_dir} exists (use --force)")
        out_dir.mkdir(parents=True, exist_ok=True)
    except InvalidConfig as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1

    out = _Outputs(out_dir)
    try:
        _RUNNERS[args.command](doc, base_dir, args, out)
        out.finish()
    except InvalidConfig as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (CtxShareError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

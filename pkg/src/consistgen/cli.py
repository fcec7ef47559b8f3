"""Command-line entry point: generate, reuse, personalize, eval, ablate, replay."""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .denoiser import DenoiserConfig, init_denoiser
from .io import latent_digest, read_json, read_latent, write_json, write_latent, write_preview
from .masking import write_pgm
from .metrics import EvalSummary, write_pairs_csv, write_scatter_svg, write_summary_json
from .pipeline import (
    GenerationConfig,
    PipelineError,
    RunResult,
    config_from_manifest,
    evaluate_latents,
    generate,
    invert_anchor,
    personalization_config,
    personalize,
    replay,
    reuse_subject,
)
from .prompts import PromptSet, PromptSetError, parse_prompt_sets

log = logging.getLogger("consistgen")

GRID_KEYS = {
    "dropout": ("dropout_p", float),
    "alpha": ("alpha", float),
    "guidance": ("guidance_scale", float),
    "sdsa": ("sdsa", lambda s: _parse_bool(s)),
    "fi": ("feature_injection", lambda s: _parse_bool(s)),
    "blend": ("query_blend", lambda s: _parse_bool(s)),
}


class CliError(Exception):
    pass


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "on", "yes"):
        return True
    if lowered in ("0", "false", "off", "no"):
        return False
    raise CliError(f"not a boolean: {text!r}")


def _anchors_arg(text: str):
    if text == "all":
        return "all"
    try:
        k = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError("anchors must be a count or 'all'") from None
    if k < 1:
        raise argparse.ArgumentTypeError("anchor count must be >= 1")
    return k


def parse_grid(specs: list[str]) -> list[dict]:
    """``["dropout=0,0.5", "alpha=0,0.8"]`` -> cartesian product of config overrides."""
    axes = []
    for spec in specs:
        key, sep, values = spec.partition("=")
        key = key.strip()
        if not sep or key not in GRID_KEYS:
            raise CliError(f"bad grid spec {spec!r}; keys: {', '.join(GRID_KEYS)}")
        field_name, conv = GRID_KEYS[key]
        try:
            parsed = [conv(v) for v in values.split(",") if v.strip()]
        except ValueError as exc:
            raise CliError(f"bad value in grid spec {spec!r}: {exc}") from None
        if not parsed:
            raise CliError(f"grid spec {spec!r} lists no values")
        axes.append([(key, field_name, v) for v in parsed])
    return [{f: v for _, f, v in combo} | {"_label": ",".join(f"{k}={v}" for k, _, v in combo)}
            for combo in itertools.product(*axes)]


def load_set(path, index: int) -> PromptSet:
    sets = parse_prompt_sets(path)
    if not 0 <= index < len(sets):
        raise CliError(f"{path}: no prompt set {index} (file has {len(sets)})")
    return sets[index]


def build_config(ps: PromptSet, args) -> GenerationConfig:
    denoiser = DenoiserConfig()
    specs = ps.specs(denoiser.vocab_size)
    seed = ps.seed if args.seed is None else args.seed
    anchors = args.anchors
    if anchors != "all":
        if anchors > len(specs):
            raise CliError(f"{anchors} anchors requested but the set has {len(specs)} prompts")
        anchors = list(range(anchors))
    return GenerationConfig(
        prompts=specs,
        seeds=[seed + i for i in range(len(specs))],
        steps=args.steps,
        guidance_scale=args.guidance,
        dropout_p=args.dropout,
        alpha=args.alpha,
        anchors=anchors,
        denoiser=denoiser,
        run_seed=seed,
    )


def write_run(out: Path, result: RunResult, extra: dict | None = None) -> dict:
    """Lay out manifest.json, latents/, previews/ and reports/ under ``out``."""
    side = result.config.denoiser.latent_side
    for sub in ("latents", "previews", "reports/masks"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for i, z in enumerate(result.latents):
        write_latent(out / "latents" / f"{i:02d}.cstl", z)
        write_preview(out / "previews" / f"{i:02d}.png", z, side)
        write_pgm(out / "reports" / "masks" / f"{i:02d}.pgm", result.masks[i], side)
    manifest = dict(result.manifest)
    if extra:
        manifest.update(extra)
    write_json(out / "manifest.json", manifest)
    return manifest


def load_run(run_dir: Path) -> tuple[dict, GenerationConfig, list[np.ndarray], list[np.ndarray]]:
    manifest = read_json(run_dir / "manifest.json")
    config = config_from_manifest(manifest)
    latents, masks = [], []
    for img in manifest["images"]:
        z = read_latent(run_dir / img["latent"])
        if latent_digest(z) != img["digest"]:
            raise CliError(f"{run_dir / img['latent']}: digest does not match the manifest")
        latents.append(z)
        masks.append(np.array([int(c) for c in img["mask"]], dtype=np.uint8))
    return manifest, config, latents, masks


def _report(out: Path, summary: EvalSummary) -> None:
    (out / "reports").mkdir(parents=True, exist_ok=True)
    write_summary_json(out / "reports" / "summary.json", summary)
    write_pairs_csv(out / "reports" / "pairs.csv", summary)


def _print_summary(manifest: dict) -> None:
    print(json.dumps({"digests": [img["digest"] for img in manifest["images"]],
                      "metrics": manifest.get("metrics", {})}, indent=2))


# -- commands ------------------------------------------------------------------------------------


def cmd_generate(args) -> int:
    ps = load_set(args.prompts, args.set)
    config = build_config(ps, args)
    if args.vanilla:
        config = config.vanilla()
    model = init_denoiser(config.denoiser)
    result = generate(config, model, evaluate=not args.no_eval)
    out = Path(args.out)
    manifest = write_run(out, result)
    if not args.no_eval:
        _report(out, evaluate_latents(model, config, result.latents, result.masks))
    _print_summary(manifest)
    return 0


def cmd_reuse(args) -> int:
    manifest = read_json(args.manifest)
    old = config_from_manifest(manifest)
    ps = load_set(args.prompts, args.set)
    specs = ps.specs(old.denoiser.vocab_size)
    anchors = old.anchor_indices
    base = (ps.seed if args.seed is None else args.seed)
    # slot i keeps its old seed when it existed, so unchanged prompts reproduce the run
    new_prompts, new_seeds = [], []
    for i, spec in enumerate(specs):
        if i in anchors:
            continue
        new_prompts.append(spec)
        new_seeds.append(old.seeds[i] if i < len(old.seeds) else base + i)
    model = init_denoiser(old.denoiser)
    result = reuse_subject(manifest, new_prompts, new_seeds, model)
    out = Path(args.out)
    out_manifest = write_run(out, result, {"reused_from": manifest["config_hash"]})
    _report(out, evaluate_latents(model, result.config, result.latents, result.masks))
    _print_summary(out_manifest)
    return 0


def cmd_personalize(args) -> int:
    ps = load_set(args.prompts, args.set)
    seed = ps.seed if args.seed is None else args.seed
    denoiser = DenoiserConfig()
    specs = ps.specs(denoiser.vocab_size)
    seeds = [seed + i for i in range(len(specs))]
    config = personalization_config(specs, seeds, denoiser=denoiser, run_seed=seed, steps=args.steps)
    model = init_denoiser(denoiser)
    anchor_prompt = ps.anchor_spec(denoiser.vocab_size)
    inverted = []
    for k, path in enumerate(args.anchors):
        z0 = read_latent(path)
        if z0.shape != (denoiser.n_patches, denoiser.latent_channels):
            raise CliError(f"{path}: latent shape {z0.shape} does not fit the denoiser")
        inverted.append(invert_anchor(z0, anchor_prompt, config, model, seed=seed + 1000 + k))
    result = personalize(inverted, specs, seeds, config, model)
    out = Path(args.out)
    extra = {"personalization": {"anchor_files": [str(p) for p in args.anchors],
                                 "inversion_seeds": [seed + 1000 + k for k in range(len(args.anchors))]}}
    manifest = write_run(out, result, extra)
    _report(out, evaluate_latents(model, result.config, result.latents, result.masks))
    _print_summary(manifest)
    return 0


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    _, config, latents, masks = load_run(run_dir)
    summary = evaluate_latents(init_denoiser(config.denoiser), config, latents, masks)
    if args.baseline:
        _, bcfg, blat, bmasks = load_run(Path(args.baseline))
        base = evaluate_latents(init_denoiser(bcfg.denoiser), bcfg, blat, bmasks)
        summary.diversity = summary.diversity.with_baseline(base.diversity)
        summary.diversity_masked = summary.diversity_masked.with_baseline(base.diversity_masked)
        summary.extra["baseline_consistency"] = base.consistency.aggregate
    _report(run_dir, summary)
    print(json.dumps(summary.to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_ablate(args) -> int:
    ps = load_set(args.prompts, args.set)
    points = parse_grid(args.grid)
    base_cfg = build_config(ps, args)
    model = init_denoiser(base_cfg.denoiser)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    for r in range(args.replicates):
        seeds = [s + 100 * r for s in base_cfg.seeds]
        cfg_r = replace(base_cfg, seeds=seeds, run_seed=base_cfg.run_seed + r)
        vanilla = generate(cfg_r.vanilla(), model, evaluate=False)
        base = evaluate_latents(model, cfg_r, vanilla.latents, vanilla.masks)
        runs = [("vanilla", {}, vanilla)]
        for point in points:
            overrides = {k: v for k, v in point.items() if k != "_label"}
            runs.append((point["_label"], overrides, generate(replace(cfg_r, **overrides), model, evaluate=False)))
        for label, overrides, res in runs:
            s = evaluate_latents(model, cfg_r, res.latents, res.masks)
            rows.append({"replicate": r, "label": label, "consistency": s.consistency.aggregate,
                         "diversity": s.diversity.aggregate,
                         "diversity_normalized": s.diversity.with_baseline(base.diversity).normalized})
            log.info("replicate %d %s: consistency %.6f diversity %.4f", r, label,
                     s.consistency.aggregate, s.diversity.aggregate)

    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    labels = list(dict.fromkeys(row["label"] for row in rows))
    points_xy = []
    for label in labels:
        sel = [row for row in rows if row["label"] == label]
        points_xy.append((label, float(np.mean([s["diversity_normalized"] for s in sel])),
                          float(np.mean([s["consistency"] for s in sel]))))
    write_scatter_svg(out / "scatter.svg", points_xy)
    print(json.dumps([{"label": l, "diversity_normalized": d, "consistency": c} for l, d, c in points_xy],
                     indent=2))
    return 0


def cmd_replay(args) -> int:
    manifest = read_json(args.manifest)
    if "personalization" in manifest:
        raise CliError("personalization runs depend on their anchor files; re-run personalize instead")
    result = replay(manifest)
    expected = [img["digest"] for img in manifest["images"]]
    if result.digests != expected:
        bad = [i for i, (a, b) in enumerate(zip(result.digests, expected)) if a != b]
        raise CliError(f"replay diverged from the manifest for images {bad}")
    out = write_run(Path(args.out), result)
    _print_summary(out)
    return 0


# -- argument parsing ----------------------------------------------------------------------------


def _add_prompt_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--prompts", required=True, type=Path, help="YAML prompt-set file")
    p.add_argument("--set", type=int, default=0, help="index of the prompt set in the file (default 0)")
    p.add_argument("--seed", type=int, default=None, help="base seed; image i uses seed+i (default: the set's seed)")


def _add_generation_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dropout", type=float, default=0.5, help="self-attention dropout probability")
    p.add_argument("--alpha", type=float, default=0.8, help="feature-injection blend weight")
    p.add_argument("--anchors", type=_anchors_arg, default=2, help="number of anchor images, or 'all'")
    p.add_argument("--steps", type=int, default=50, help="DDIM steps")
    p.add_argument("--guidance", type=float, default=5.0, help="classifier-free guidance scale")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="consistgen", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a consistent batch from one prompt set")
    _add_prompt_args(p)
    _add_generation_args(p)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--no-eval", action="store_true", help="skip metric computation")
    p.add_argument("--vanilla", action="store_true", help="turn all cross-image sharing off (a baseline run)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("reuse", help="re-create a run's anchors next to new prompts")
    p.add_argument("--manifest", required=True, type=Path)
    _add_prompt_args(p)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_reuse)

    p = sub.add_parser("personalize", help="use two real latents as inverted anchors")
    p.add_argument("--anchors", required=True, nargs=2, type=Path, metavar="LATENT")
    _add_prompt_args(p)
    p.add_argument("--steps", type=int, default=100, help="DDPM steps")
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_personalize)

    p = sub.add_parser("eval", help="score a run directory")
    p.add_argument("--run", required=True, type=Path)
    p.add_argument("--baseline", type=Path, default=None, help="run directory used to normalize diversity")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="sweep config values and report consistency against diversity")
    _add_prompt_args(p)
    _add_generation_args(p)
    p.add_argument("--grid", required=True, action="append",
                   help="key=v1,v2,... with key in: " + ", ".join(GRID_KEYS) + " (repeatable)")
    p.add_argument("--replicates", type=int, default=1, help="seed replicates per grid point")
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("replay", help="re-run a manifest and check its digests")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, PromptSetError, PipelineError, ValueError, OSError, KeyError) as exc:
        print(f"consistgen {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

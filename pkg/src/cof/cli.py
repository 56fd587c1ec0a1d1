"""Command-line interface: curate, train, infer, trajectory, eval, ablate,
codec-check.

Config precedence: built-in defaults < --config JSON file < flags <
environment (COF_AGENT_URL / COF_AGENT_TOKEN override any configured agent
endpoint). Exit codes are stable: 0 success, 1 check failure, 2 config
error, 3 I/O error, 4 remote-agent failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import codec, evalsuite, flow, net, pipeline
from .codec import CodecConfig, CodecMode
from .errors import ConfigError, RemoteMalformed, RemoteTimeout
from .flow import SamplerConfig, TrainConfig
from .scenes import (
    BACKGROUNDS,
    COLORS,
    RELATIONS,
    SHAPES,
    Category,
    Constraint,
    ConstraintKind,
    PromptSpec,
    render_text,
)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_REMOTE = 4

CATEGORY_ALIASES = {
    "colors": Category.ATTRIBUTE_BINDING,
    "counting": Category.QUANTITY_CONTROL,
    "position": Category.SPATIAL_ARRANGEMENT,
    "background": Category.CONTEXT_MANIPULATION,
}


def _load_config_file(path):
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file {p} does not exist")
    with open(p, encoding="utf-8") as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {e}") from e


def _merge(section: dict, args: argparse.Namespace, mapping: dict) -> dict:
    """defaults (implicit in dataclasses) < config-file section < flags."""
    out = dict(section)
    for key, attr in mapping.items():
        val = getattr(args, attr, None)
        if val is not None:
            out[key] = val
    return out


def _resolved_manifest(kind: str, cfg: dict) -> dict:
    return {"kind": kind, "config": cfg, "config_hash": pipeline.config_hash(cfg)}


def _parse_category(name: str) -> Category:
    name = name.strip().lower()
    for cat in Category:
        if name == cat.slug:
            return cat
    if name in CATEGORY_ALIASES:
        return CATEGORY_ALIASES[name]
    raise ConfigError(
        f"unknown category {name!r}; use one of "
        + ", ".join(c.slug for c in Category)
    )


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def cmd_curate(args) -> int:
    file_cfg = _load_config_file(args.config).get("pipeline", {})
    merged = _merge(
        file_cfg,
        args,
        {
            "pool_size": "pool",
            "master_seed": "seed",
            "max_retries": "retries",
            "tau_a": "tau_a",
            "backend": "backend",
            "workers": "workers",
        },
    )
    if args.tier_probs is not None:
        merged["tier_probs"] = tuple(float(x) for x in args.tier_probs.split(","))
    if "tier_probs" in merged:
        merged["tier_probs"] = tuple(merged["tier_probs"])
    if "category_mix" in merged:
        merged["category_mix"] = tuple(merged["category_mix"])
    cfg = pipeline.PipelineConfig(**merged)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _, manifest = pipeline.curate(cfg, out_dir)
    print(
        f"curated {manifest['completed']} chains "
        f"({manifest['dropped']} dropped, drop rate {manifest['drop_rate']:.3%}, "
        f"fallback rate {manifest['fallback_rate']:.3%})"
    )
    print(f"tiers: {manifest['counts']['tier']}")
    print(f"strategies: {manifest['counts']['strategy']}")
    print(f"manifest: {out_dir / 'manifest.json'} (config {manifest['config_hash'][:12]})")
    return EXIT_OK


def cmd_train(args) -> int:
    file_cfg = _load_config_file(args.config).get("train", {})
    merged = _merge(
        file_cfg,
        args,
        {
            "steps": "steps",
            "batch_size": "batch_size",
            "learning_rate": "lr",
            "weight_decay": "weight_decay",
            "t_distribution": "t_dist",
            "seed": "seed",
        },
    )
    tc = TrainConfig(**merged)
    encoding = args.encoding
    chains, ys, _ = pipeline.load_training_arrays(args.data, encoding=encoding)
    mode = CodecMode.CONTINUOUS if encoding == "continuous" else CodecMode.FRAMEWISE
    cfg = net.ModelConfig(frames=chains.shape[1], mode=mode)
    params = net.init_params(cfg, seed=tc.seed)
    params, trace = flow.train(params, cfg, chains, ys, tc)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dataset_hash = pipeline.load_manifest(args.data)["config_hash"]
    flow.save_checkpoint(
        out,
        params,
        cfg,
        steps=tc.steps,
        extra={
            "train_config": tc.__dict__ | {},
            "encoding": encoding,
            "dataset_config_hash": dataset_hash,
        },
    )
    flow.write_loss_trace(out.with_suffix(".loss.csv"), trace)
    final = trace[-1][1] if trace else float("nan")
    print(f"trained {tc.steps} steps on {len(chains)} chains (F'={cfg.frames}); "
          f"final loss {final:.4f}")
    print(f"checkpoint: {out}")
    return EXIT_OK


def _spec_from_flags(args) -> PromptSpec:
    category = _parse_category(args.category)
    cons: list[Constraint] = []
    objects = args.object or []
    if not objects:
        raise ConfigError("at least one --object shape[:color] is required")
    for slot, spec_str in enumerate(objects):
        parts = spec_str.split(":")
        if len(parts) > 2 or parts[0] not in SHAPES:
            raise ConfigError(f"malformed --object {spec_str!r} (shape[:color])")
        cons.append(Constraint(ConstraintKind.OBJECT_PRESENT, slot, parts[0]))
        if len(parts) == 2:
            if parts[1] not in COLORS:
                raise ConfigError(f"unknown color {parts[1]!r}")
            cons.append(Constraint(ConstraintKind.COLOR, slot, parts[1]))
    if args.count is not None:
        if args.count not in (1, 2, 3, 4):
            raise ConfigError("--count must be 1..4")
        cons.append(Constraint(ConstraintKind.COUNT, 0, args.count))
    if args.relation is not None:
        if args.relation not in RELATIONS:
            raise ConfigError(f"--relation must be one of {RELATIONS}")
        if len(objects) < 2:
            raise ConfigError("--relation needs two --object slots")
        cons.append(Constraint(ConstraintKind.RELATIVE_POSITION, 0, args.relation))
    if args.background is not None:
        if args.background not in BACKGROUNDS:
            raise ConfigError(f"--background must be one of {BACKGROUNDS}")
        cons.append(Constraint(ConstraintKind.BACKGROUND, 0, args.background))
    cons_t = tuple(cons)
    try:
        return PromptSpec(
            id=f"cli-{category.slug}-{args.seed}",
            category=category,
            constraints=cons_t,
            rendered_text=render_text(category, cons_t),
            seed=args.seed,
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e


def cmd_infer(args) -> int:
    params, cfg, header = flow.load_checkpoint(args.ckpt)
    if args.prompt_text is not None:
        if args.backend != "remote":
            raise ConfigError("--prompt-text is accepted only with --backend remote")
        from .remote import SYSTEM_PREFIX
        from .scenes import parse_prompt_text

        wire_prompt = f"{SYSTEM_PREFIX}\n\nPrompt: {args.prompt_text}"
        try:
            cons = parse_prompt_text(args.prompt_text)
        except ValueError as e:
            raise ConfigError(f"cannot parse prompt text: {e}") from e
        from .remote import _infer_category

        category = _infer_category(cons)
        spec = PromptSpec(
            id=f"cli-text-{args.seed}",
            category=category,
            constraints=cons,
            rendered_text=render_text(category, cons),
            seed=args.seed,
        )
        print(f"wire prompt: {wire_prompt.splitlines()[0]} ...")
    else:
        spec = _spec_from_flags(args)
    sampler = SamplerConfig(num_steps=args.sampler_steps)
    out = Path(args.out)
    if args.trajectory:
        if cfg.mode is not CodecMode.FRAMEWISE:
            raise ConfigError("--trajectory requires a frame-wise checkpoint")
        out.mkdir(parents=True, exist_ok=True)
        rasters = flow.decode_trajectory(params, cfg, spec, sampler, args.seed)
        for i, r in enumerate(rasters, start=1):
            r.save_png(out / f"f{i}.png")
        print(f"wrote {len(rasters)} frames to {out}")
    else:
        raster = flow.generate(params, cfg, spec, sampler, args.seed)
        out.parent.mkdir(parents=True, exist_ok=True)
        raster.save_png(out)
        print(f"wrote {out}")
    return EXIT_OK


def _load_suite(args):
    return evalsuite.build_suite(args.suite_size, args.suite_seed)


def cmd_eval(args) -> int:
    params, cfg, header = flow.load_checkpoint(args.ckpt)
    suite = _load_suite(args)
    sampler = SamplerConfig(num_steps=args.sampler_steps)
    report = evalsuite.evaluate(
        params, cfg, suite, sampler, args.seed, repeats=args.repeats
    )
    out = Path(args.out)
    evalsuite.emit_report(report, out)
    resolved = {
        "suite_size": args.suite_size,
        "suite_seed": args.suite_seed,
        "sample_seed": args.seed,
        "sampler_steps": args.sampler_steps,
        "repeats": args.repeats,
        "checkpoint": str(args.ckpt),
    }
    summary = _resolved_manifest("eval", resolved) | {"report": report.to_dict()}
    with open(out / "summary.json", "w", encoding="utf-8") as f:
        json.dump(summary, f, sort_keys=True, separators=(",", ":"))
    print(f"overall {report.overall:.4f}  " +
          "  ".join(f"{t}={report.task_rates[t]:.3f}" for t in evalsuite.TASKS))
    print(f"reports in {out}")
    return EXIT_OK


def cmd_trajectory(args) -> int:
    params, cfg, header = flow.load_checkpoint(args.ckpt)
    if cfg.mode is not CodecMode.FRAMEWISE:
        raise ConfigError("trajectory analysis requires a frame-wise checkpoint")
    suite = _load_suite(args)
    sampler = SamplerConfig(num_steps=args.sampler_steps)
    reports, summary = evalsuite.evaluate_trajectory(
        params, cfg, suite, sampler, args.seed
    )
    out = Path(args.out)
    evalsuite.emit_report(reports, out, summary)
    resolved = {
        "suite_size": args.suite_size,
        "suite_seed": args.suite_seed,
        "sample_seed": args.seed,
        "sampler_steps": args.sampler_steps,
        "checkpoint": str(args.ckpt),
    }
    doc = _resolved_manifest("trajectory", resolved) | {
        "summary": summary,
        "reports": [r.to_dict() for r in reports],
    }
    with open(out / "summary.json", "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True, separators=(",", ":"))
    print("per-frame overall: " + " / ".join(f"{o:.4f}" for o in summary["overalls"]))
    print("reference (full-scale): " + " / ".join(f"{v:.2f}" for v in summary["reference"]))
    print(f"monotone: {summary['monotone']}; reports in {out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    file_cfg = _load_config_file(args.config).get("train", {})
    merged = _merge(file_cfg, args, {"steps": "steps", "seed": "seed"})
    tc = TrainConfig(**merged)
    suite = _load_suite(args)
    sampler = SamplerConfig(num_steps=args.sampler_steps)
    eval_seed = args.seed if args.seed is not None else 0
    result = evalsuite.compare_target_only(
        args.data, tc, sampler, suite, eval_seed=eval_seed, model_seed=tc.seed
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.json", "w", encoding="utf-8") as f:
        json.dump(result, f, sort_keys=True, separators=(",", ":"))
    full = result["results"]["chain"]["overall"]
    target = result["results"]["final-frame"]["overall"]
    ref = result["reference"]
    print(f"full-chain overall:  {full:.4f}")
    print(f"target-only overall: {target:.4f}")
    print(f"delta: {result['delta']:+.4f}")
    print(f"reference (full-scale): {ref['target_only']:.2f} vs {ref['full_chain']:.2f}")
    print(f"details: {out / 'ablation.json'}")
    return EXIT_OK


def cmd_codec_check(args) -> int:
    if args.raster_size % 8:
        raise ConfigError("codec patch size (8) must divide the raster size")
    cfg = CodecConfig(beta=args.beta)
    results = codec.run_codec_checks(cfg, seed=args.seed)
    failed = False
    for name, ok in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
        failed |= not ok
    return EXIT_CHECK_FAILED if failed else EXIT_OK


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="cof",
        description="chain-of-frame refinement sandbox: curation, training, "
        "inference, and evaluation over a synthetic scene domain",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("curate", help="build a refinement-chain dataset")
    p.add_argument("--config")
    p.add_argument("--pool", type=int, default=None, help="prompt pool size")
    p.add_argument("--seed", type=int, default=None, help="master seed")
    p.add_argument("--tier-probs", default=None, help="weak,medium,strong")
    p.add_argument("--retries", type=int, default=None, help="max edit retries (K)")
    p.add_argument("--tau-a", type=float, default=None)
    p.add_argument("--backend", choices=["deterministic", "remote"], default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("train", help="train the velocity model on a dataset")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--weight-decay", type=float, default=None)
    p.add_argument("--t-dist", choices=["uniform", "logit-normal"], default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument(
        "--encoding",
        choices=["framewise", "continuous", "final-frame"],
        default="framewise",
    )
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="generate one image (or a trajectory)")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--category", default="object-combination")
    p.add_argument("--object", action="append", help="shape[:color], repeatable")
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--relation", default=None)
    p.add_argument("--background", default=None)
    p.add_argument("--prompt-text", default=None, help="free text (remote mode only)")
    p.add_argument("--backend", choices=["deterministic", "remote"], default="deterministic")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sampler-steps", type=int, default=50)
    p.add_argument("--trajectory", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    for name, fn in (("eval", cmd_eval), ("trajectory", cmd_trajectory)):
        p = sub.add_parser(name, help=f"{name} a checkpoint on the held-out suite")
        p.add_argument("--ckpt", required=True)
        p.add_argument("--suite-size", type=int, default=100, help="prompts per task")
        p.add_argument("--suite-seed", type=int, default=1)
        p.add_argument("--seed", type=int, default=0, help="sampling seed")
        p.add_argument("--sampler-steps", type=int, default=50)
        p.add_argument("--out", required=True)
        if name == "eval":
            p.add_argument("--repeats", type=int, default=1)
        p.set_defaults(func=fn)

    p = sub.add_parser("ablate", help="full-chain vs target-only comparison")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--suite-size", type=int, default=100)
    p.add_argument("--suite-seed", type=int, default=1)
    p.add_argument("--sampler-steps", type=int, default=50)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("codec-check", help="run the codec invariant suite")
    p.add_argument("--beta", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--raster-size", type=int, default=128)
    p.set_defaults(func=cmd_codec_check)

    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (RemoteMalformed, RemoteTimeout) as e:
        print(f"remote agent failure: {e}", file=sys.stderr)
        return EXIT_REMOTE
    except (FileNotFoundError, NotADirectoryError, PermissionError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

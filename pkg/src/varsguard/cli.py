"""Command-line entry point: ``varsguard <command> [options]``.

Every command works on one run directory. The config comes from ``--config``
(or the run directory's ``config.snapshot`` when present), then ``--set
key=value`` overrides and the dedicated flags are applied on top.

Exit codes: 0 success, 1 runtime failure, 2 invalid config, 3 missing
dependency. Failures print one JSON object on stderr.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import yaml

from .config import ConfigError, RunConfig, apply_override
from .data import DataError
from .io import CheckpointError
from .pipeline import (DependencyError, RunDir, build_report, configure_torch, default_run_root,
                       export_embeddings, make_catalog, run_pipeline, run_stage, stage_defend_eval,
                       stage_detect_eval, stage_key, stage_shift_eval)

TRAIN_COMMANDS = {"train-rs": "rs", "attack": "attack", "train-denoiser": "denoiser",
                  "train-detector": "detector", "finetune-joint": "joint"}
EVAL_COMMANDS = {"defend-eval": stage_defend_eval, "detect-eval": stage_detect_eval,
                 "shift-eval": stage_shift_eval}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="varsguard", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config")
    common.add_argument("--run-dir", help="run directory (default: $VARSGUARD_RUN_ROOT/default)")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int, help="worker threads for catalog generation")
    common.add_argument("--profile", choices=("desk", "paper"))
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, e.g. loss.beta=50")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate the seeded synthetic dataset")
    ing = sub.add_parser("ingest", parents=[common], help="load a ratings CSV and an image directory")
    ing.add_argument("--interactions", help="ratings CSV (user,item,rating)")
    ing.add_argument("--images", help="directory of <item_key>.npy/.png images")
    sub.add_parser("train-rs", parents=[common], help="pretrain extractor, recommender and AMR baseline")
    att = sub.add_parser("attack", parents=[common], help="build adversarial catalogs")
    att.add_argument("--method", choices=("fgsm", "pgd"))
    att.add_argument("--eps", type=float, nargs="+", help="one or more budgets (8-bit units)")
    att.add_argument("--target", choices=("vbpr", "amr"), default="vbpr")
    for name in ("train-denoiser", "train-detector", "finetune-joint", "defend-eval", "detect-eval",
                 "shift-eval", "report"):
        sub.add_parser(name, parents=[common])
    exp = sub.add_parser("export-embeddings", parents=[common], help="write detector embeddings of test items")
    exp.add_argument("--out", help="output path (default: report/embeddings.bin)")
    run = sub.add_parser("run", parents=[common], help="every stage, evaluation and the report")
    run.add_argument("--reuse-from", help="finished run whose matching upstream stages are reused")
    return p


def _read_yaml(path: Path):
    try:
        return yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as e:
        raise ConfigError(str(path), f"not valid YAML ({e.__class__.__name__})") from None


def resolve_config(args) -> tuple[RunConfig, Path]:
    run_dir = Path(args.run_dir) if args.run_dir else default_run_root() / "default"
    raw = {}
    if args.config:
        raw = _read_yaml(Path(args.config))
    elif (run_dir / "config.snapshot").exists():
        raw = _read_yaml(run_dir / "config.snapshot")
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config file must hold a mapping")
    for item in args.overrides:
        apply_override(raw, item)
    for flag, key in (("seed", "seed"), ("jobs", "jobs"), ("profile", "profile")):
        if getattr(args, flag, None) is not None:
            raw[key] = getattr(args, flag)
    if args.command == "ingest":
        data = raw.setdefault("data", {})
        data["source"] = "ingest"
        if args.interactions:
            data["interactions_path"] = args.interactions
        if args.images:
            data["images_path"] = args.images
    elif args.command == "synth":
        raw.setdefault("data", {})["source"] = "synthetic"
    return RunConfig.from_dict(raw), run_dir


def execute(args) -> dict:
    cfg, run_dir = resolve_config(args)
    configure_torch()
    if args.command == "run":
        report = run_pipeline(cfg, run_dir, reuse_from=args.reuse_from)
        return {"run_dir": str(run_dir), "HR@10": {c: m.get("HR@10") for c, m in report.ranking.items()}}
    run = RunDir(run_dir, cfg)
    if args.command in ("synth", "ingest"):
        run_stage(run, cfg, "data", force=True)
        return {"stage": "data", "key": stage_key(cfg, "data")}
    if args.command == "attack" and (args.method or args.eps):
        run.require("rs", "attack")
        methods = [args.method] if args.method else list(cfg.attack.methods)
        budgets = args.eps or list(cfg.attack.epsilons)
        made = [make_catalog(run, cfg, "eval", m, e, target=args.target).name for m in methods for e in budgets]
        manifests = [run.manifest(n) / "manifest.json" for n in made]
        run.snapshot("attack", manifests)
        return {"catalogs": made}
    if args.command in TRAIN_COMMANDS:
        stage = TRAIN_COMMANDS[args.command]
        run_stage(run, cfg, stage, force=True)
        return {"stage": stage, "key": stage_key(cfg, stage)}
    if args.command in EVAL_COMMANDS:
        out = EVAL_COMMANDS[args.command](run, cfg)
        name = args.command.replace("-", "_")
        run.mark(name, stage_key(cfg, "joint"))
        run.snapshot(args.command, sorted((run.root / "checkpoints").glob("*.safetensors")))
        return {"command": args.command, "keys": sorted(out)}
    if args.command == "report":
        report = build_report(run, cfg)
        return {"report": str(run.root / "report"), "conditions": sorted(report.ranking)}
    if args.command == "export-embeddings":
        return {"embeddings": str(export_embeddings(run, cfg, args.out))}
    raise ConfigError("command", f"unknown command {args.command!r}")


def _fail(code: int, payload: dict) -> int:
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = execute(args)
    except ConfigError as e:
        return _fail(2, {"error": "config", "field": e.field, "message": str(e)})
    except DependencyError as e:
        return _fail(3, {"error": "dependency", "command": e.command, "message": str(e)})
    except (DataError, CheckpointError, ValueError, RuntimeError, OSError) as e:
        return _fail(1, {"error": type(e).__name__, "message": str(e)})
    print(json.dumps(result, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())

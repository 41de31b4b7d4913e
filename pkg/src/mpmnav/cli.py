"""Command-line entry point. Every command prints one JSON result as its
final stdout line."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import harness as H
from .data import make_mpm_dataset, save_episodes
from .world import generate_world_set, load_world_set, save_world_set

WORLD_KEYS = ("n_train", "n_val_seen", "n_val_unseen", "n_nodes", "connect_radius")


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise H.HarnessError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise H.HarnessError(f"config {path} must hold a JSON object")
    return raw


def _train_config(raw: dict, seed, stage: str | None = None) -> H.TrainConfig:
    raw = {k: v for k, v in raw.items() if k != "experiment"}
    if seed is not None:
        raw["seed"] = seed
    if stage is not None:
        raw.setdefault("stage", stage)
    return H.TrainConfig.from_dict(raw)


def _bundle(cfg: H.TrainConfig) -> H.DataBundle:
    return H.load_bundle(cfg.world_set, cfg.datasets)


def cmd_gen_world(raw, seed, out):
    unknown = sorted(set(raw) - set(WORLD_KEYS))
    if unknown:
        raise H.HarnessError(f"unknown gen-world fields: {unknown}")
    ws = generate_world_set(seed or 0, **raw)
    save_world_set(ws, out)
    return {"world_set": str(out), "splits": ws.manifest()}


def cmd_make_data(raw, seed, out):
    world = load_world_set(raw["world_set"]) if "world_set" in raw else None
    if world is None:
        raise H.HarnessError("make-data needs world_set in its config")
    bundle = H.build_datasets(
        world,
        seed or 0,
        raw.get("train_per_env", 200),
        raw.get("val_per_env", 100),
        raw.get("long_sets", True),
    )
    files = H.save_bundle_data(bundle, out)
    n_mpm = raw.get("mpm_paths", 0)
    if n_mpm:
        mpm = make_mpm_dataset(world, "train", bundle.hist, n_mpm, raw.get("mask_ratio", 0.25), seed or 0)
        save_episodes(Path(out) / "mpm_train.jsonl", mpm)
        files["mpm_train"] = str(Path(out) / "mpm_train.jsonl")
    counts = {s: len(e) for s, e in bundle.vln.items()}
    return {"files": files, "counts": counts, "hist": {str(k): v for k, v in bundle.hist.counts.items()}}


def cmd_pretrain(raw, seed, out):
    cfg = _train_config(raw, seed, "pretrain")
    manifest, _ = H.pretrain(cfg, _bundle(cfg), out=out)
    return {"checkpoint": manifest.checkpoint, "steps": len(manifest.losses), "final_loss": _last(manifest.losses)}


def cmd_finetune(raw, seed, out):
    cfg = _train_config(raw, seed, "finetune")
    manifest, _, _ = H.finetune(cfg, _bundle(cfg), out=out)
    best = next((h for h in manifest.history if h["step"] == manifest.best_step), None)
    return {
        "checkpoint": manifest.checkpoint,
        "steps": len(manifest.losses),
        "best_step": manifest.best_step,
        "best_val_unseen": best["val_unseen"] if best else None,
    }


def cmd_evaluate(raw, seed, out):
    cfg = _train_config({k: v for k, v in raw.items() if k not in ("checkpoint", "split")}, seed, "finetune")
    checkpoint = raw.get("checkpoint") or cfg.init_checkpoint
    if checkpoint is None:
        raise H.HarnessError("evaluate needs a checkpoint")
    split = raw.get("split", "val_unseen")
    _, summary = H.evaluate_checkpoint(checkpoint, _bundle(cfg), split, out, cfg.agent_config())
    return {"split": split, "metrics": summary, "csv": str(Path(out) / f"metrics_{split}.csv")}


def cmd_preexplore(raw, seed, out):
    cfg = _train_config(raw, seed, "preexplore")
    if not cfg.init_checkpoint:
        raise H.HarnessError("preexplore needs init_checkpoint")
    agent = H.NavAgent.load(cfg.init_checkpoint, cfg.agent_config())
    manifest, agent = H.preexplore(agent, _bundle(cfg), cfg)
    Path(out).mkdir(parents=True, exist_ok=True)
    agent.save(Path(out) / "best", with_optimizer=False)
    (Path(out) / "manifest.json").write_text(manifest.to_json())
    return {"checkpoint": str(Path(out) / "best"), **manifest.extra}


def _experiment(raw) -> dict:
    exp = raw.get("experiment", {})
    return {"pt_steps": exp.get("pt_steps", 2000), "ft_steps": exp.get("ft_steps", 4000), **exp}


def cmd_ablate_mask_ratio(raw, seed, out):
    cfg = _train_config(raw, seed, "finetune")
    exp = _experiment(raw)
    seeds = exp.get("seeds", [cfg.seed, cfg.seed + 1, cfg.seed + 2])
    table = H.ablate_mask_ratio(
        cfg, _bundle(cfg), exp["pt_steps"], exp["ft_steps"], exp.get("ratios", [0.0, 0.25, 0.5, 0.75, 1.0]), seeds
    )
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "mask_ratio_table.csv").write_text(H.mask_ratio_csv(table))
    (out / "mask_ratio.json").write_text(json.dumps(table, sort_keys=True, indent=1))
    H.mask_ratio_svg(table, out / "mask_ratio.svg")
    return {"table": str(out / "mask_ratio_table.csv"), "ordering": H.ratio_ordering(table)}


def cmd_ablate_path_design(raw, seed, out):
    cfg = _train_config(raw, seed, "finetune")
    exp = _experiment(raw)
    table = H.ablate_path_design(cfg, _bundle(cfg), exp["pt_steps"], exp["ft_steps"], exp.get("seeds", [cfg.seed]))
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "path_design_table.csv").write_text(H.path_design_csv(table))
    (out / "path_design.json").write_text(json.dumps(table, sort_keys=True, indent=1))
    return {"table": str(out / "path_design_table.csv"), "cells": len(table)}


def cmd_gradcheck(raw, seed, out):
    result = H.gradcheck_all(seed or 0)
    Path(out).mkdir(parents=True, exist_ok=True)
    (Path(out) / "gradcheck.json").write_text(json.dumps(result, sort_keys=True, indent=1))
    return result


def cmd_report(raw, seed, out):
    inputs = [Path(p) for p in raw.get("inputs", [out])]
    text, ordering = H.build_report(inputs, Path(out))
    return {"report": str(Path(out) / "report.md"), "ordering": ordering, "sections": text.count("\n## ")}


def _last(values):
    return values[-1] if values else None


COMMANDS = {
    "gen-world": cmd_gen_world,
    "make-data": cmd_make_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "ablate-mask-ratio": cmd_ablate_mask_ratio,
    "ablate-path-design": cmd_ablate_path_design,
    "preexplore": cmd_preexplore,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mpmnav", description="Train and evaluate navigation agents with masked-path objectives")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="unsigned 64-bit seed")
        p.add_argument("--out", required=True, help="output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print(json.dumps({"command": args.command, "ok": False, "error": "seed must be an unsigned 64-bit integer"}))
        return 2
    try:
        result = COMMANDS[args.command](_read_config(args.config), args.seed, Path(args.out))
    except (H.HarnessError, H.TrainingError, ValueError, KeyError, OSError) as exc:
        print(json.dumps({"command": args.command, "ok": False, "error": f"{type(exc).__name__}: {exc}"}))
        return 1
    ok = bool(result.get("passed", True))
    print(json.dumps({"command": args.command, "ok": ok, **result}, sort_keys=True))
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())

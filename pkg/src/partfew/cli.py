"""Command-line surface: pretrain, extract, eval, ablate, viz-crops, viz-attn."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import store, viz
from .config import apply_overrides, load_config, serialize_config
from .data import load_from_config
from .encoder import extract_feature_map
from .episodes import Variant, evaluate, run_ablation
from .discovery import pretrain


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="config file (sectioned key=value text)")
    p.add_argument("--preset", help="named preset: desk, paper-mini, paper-tiered")
    p.add_argument("--seed", type=int, help="global seed override")
    p.add_argument("--out", help="output directory or path prefix")
    p.add_argument("--data", help="dataset root override (data.root)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="partfew")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="self-supervised pretraining on the base split")
    _add_common(p)

    p = sub.add_parser("extract", help="cache base-pool feature maps for a checkpoint")
    _add_common(p)
    p.add_argument("--ckpt", required=True)

    p = sub.add_parser("eval", help="episodic evaluation of a checkpoint")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--way", type=int)
    p.add_argument("--shot", type=int)
    p.add_argument("--episodes", type=int)
    p.add_argument("--pan", choices=["on", "off"])
    p.add_argument("--report", help="report output path (JSON; CSV written beside)")
    p.add_argument("--cache", help="feature cache prefix (required with --pan on)")
    p.add_argument("--trace-out", help="write the first episode's augmentation trace here")

    p = sub.add_parser("ablate", help="evaluate a grid of named variants")
    _add_common(p)
    p.add_argument("--grid", required=True, help="JSON file: [{name, ckpt, overrides}, ...]")
    p.add_argument("--report", help="comparison table output path (JSON)")

    p = sub.add_parser("viz-crops", help="render global view + distance-ordered parts")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--count", type=int, default=8)

    p = sub.add_parser("viz-attn", help="render retrieved images with attention overlays")
    _add_common(p)
    p.add_argument("--trace", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--limit", type=int, default=16)

    return parser


def _resolve_config(args):
    overrides = {}
    if args.data:
        overrides["data.root"] = args.data
    return load_config(
        path=args.config, preset=args.preset, seed=args.seed, overrides=overrides
    )


def _cmd_pretrain(args) -> int:
    cfg = _resolve_config(args)
    out_dir = Path(args.out or "runs/pretrain")
    handle = load_from_config(cfg)
    result = pretrain(handle, cfg, out_dir=out_dir)
    (out_dir / "resolved_config.txt").write_text(serialize_config(cfg))
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"log: {out_dir / 'train_log.jsonl'} ({len(result.log)} steps)")
    return 0


def _cmd_extract(args) -> int:
    cfg = _resolve_config(args)
    encoder, header = store.load_checkpoint(args.ckpt)
    ckpt_hash = store.file_sha256(args.ckpt)
    prefix = Path(args.out or "runs/feature_cache")
    if store.feature_cache_matches(prefix, ckpt_hash):
        print(f"cache up to date: {prefix}")
        return 0
    handle = load_from_config(cfg)
    if handle.images.shape[-1] != encoder.input_side:
        raise ValueError(
            f"dataset side {handle.images.shape[-1]} does not match checkpoint "
            f"side {encoder.input_side}"
        )
    base_idx = handle.split_indices("base")
    maps = extract_feature_map(encoder, torch.from_numpy(handle.images[base_idx]))
    store.save_feature_cache(
        prefix, maps, base_idx, encoder_hash=ckpt_hash,
        config_hash=store.run_config_hash(cfg),
    )
    print(f"cached {len(base_idx)} feature maps at {prefix}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    if args.way is not None:
        cfg.eval.way = args.way
    if args.shot is not None:
        cfg.eval.shot = args.shot
    if args.episodes is not None:
        cfg.eval.episodes = args.episodes
    if args.pan is not None:
        cfg.eval.pan = args.pan == "on"

    encoder, header = store.load_checkpoint(args.ckpt)
    ckpt_hash = store.file_sha256(args.ckpt)
    handle = load_from_config(cfg)

    pool_maps = pool_ids = None
    if cfg.eval.pan:
        if not args.cache:
            raise ValueError("--pan on requires --cache (run `partfew extract` first)")
        pool_maps, sidecar = store.load_feature_cache(
            args.cache, expected_encoder_hash=ckpt_hash
        )
        pool_ids = sidecar["image_ids"]

    traces = []
    report = evaluate(
        encoder, handle, cfg,
        pool_maps=pool_maps, pool_ids=pool_ids, ckpt_hash=ckpt_hash,
        trace_sink=traces.append if args.trace_out else None,
    )
    report_path = args.report or (Path(args.out or "runs") / "eval_report.json")
    json_path, csv_path = store.write_report(report_path, report)
    if args.trace_out and traces:
        viz.save_trace(args.trace_out, traces[0])
    print(f"{report.way}-way {report.shot}-shot over {report.episodes} episodes: "
          f"{report.mean * 100:.2f}% +- {report.ci95 * 100:.2f}%")
    print(f"report: {json_path} / {csv_path}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    grid = json.loads(Path(args.grid).read_text())
    variants = [
        Variant(v["name"], v["ckpt"], v.get("overrides", {})) for v in grid
    ]
    handle = load_from_config(cfg)
    table = run_ablation(variants, handle, cfg)
    for name, rep in table["variants"].items():
        print(f"{name:>24}: {rep['mean'] * 100:.2f}% +- {rep['ci95'] * 100:.2f}%")
    for d in table["deltas"]:
        flag = " (CIs overlap)" if d["ci_overlap"] else ""
        print(f"{d['a']} -> {d['b']}: {d['delta'] * 100:+.2f}%{flag}")
    report_path = Path(args.report or (Path(args.out or "runs") / "ablation.json"))
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
    print(f"table: {report_path}")
    return 0


def _cmd_viz_crops(args) -> int:
    cfg = _resolve_config(args)
    encoder, _ = store.load_checkpoint(args.ckpt)
    handle = load_from_config(cfg)
    paths = viz.render_crop_panels(
        encoder, handle, cfg, args.out or "runs/viz_crops", count=args.count
    )
    print(f"wrote {len(paths)} panels under {Path(paths[0]).parent}" if paths else "no panels")
    return 0


def _cmd_viz_attn(args) -> int:
    cfg = _resolve_config(args)
    trace = viz.load_trace(args.trace)
    pool_maps, sidecar = store.load_feature_cache(args.cache)
    handle = load_from_config(cfg)
    paths = viz.render_attention_overlays(
        trace, pool_maps, sidecar["image_ids"], handle,
        args.out or "runs/viz_attn", limit=args.limit,
    )
    print(f"wrote {len(paths)} overlays" if paths else "no records in trace")
    return 0


_COMMANDS = {
    "pretrain": _cmd_pretrain,
    "extract": _cmd_extract,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "viz-crops": _cmd_viz_crops,
    "viz-attn": _cmd_viz_attn,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (FileNotFoundError, ValueError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

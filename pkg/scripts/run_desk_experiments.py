#!/usr/bin/env python3
"""Full desk-scale study: build the toy dataset, pretrain every variant,
and print the directional comparison tables (pretraining ablation, part-count
sweep, augmentation sweep). Artifacts are cached under --workdir and reused
on re-runs; the first run takes roughly an hour on a 2-core CPU box.
"""

import argparse
import json
import time
from pathlib import Path

from partfew.experiments import (
    EvalSpec,
    build_all_checkpoints,
    ensure_report,
    overlap,
)


def _show(title, rows):
    print(f"\n== {title}")
    for name, rep in rows:
        print(f"  {name:>16}: {rep.mean * 100:6.2f}% +- {rep.ci95 * 100:.2f}%")
    for (na, ra), (nb, rb) in zip(rows, rows[1:]):
        delta = (rb.mean - ra.mean) * 100
        flag = " (CIs overlap)" if overlap(ra, rb) else ""
        print(f"  {na} -> {nb}: {delta:+.2f}%{flag}")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workdir", default=".acceptance_cache")
    ap.add_argument("--episodes", type=int, default=600)
    ap.add_argument("--epochs", type=int, default=None)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    t0 = time.time()
    art = build_all_checkpoints(args.workdir, seed=args.seed, epochs=args.epochs)
    handle, cfg, ck = art["handle"], art["cfg"], art["ckpts"]
    cfg.eval.episodes = args.episodes
    print(f"checkpoints ready ({(time.time() - t0) / 60:.1f} min)")

    def rep(name, ckpt, overrides):
        return ensure_report(handle, cfg, args.workdir, EvalSpec(name, ck[ckpt], overrides))

    probe_rows = [
        ("random_untrained", rep("random_untrained", "random", {"pan.init_steps": 0})),
        ("random_probe", rep("random_probe", "random", {})),
        ("pretrained_probe", rep("pretrained_probe", "pdn", {})),
    ]
    _show("linear probe: pretrained vs random encoder", probe_rows)

    ablation_rows = [
        ("baseline", rep("baseline", "baseline", {})),
        ("no_select", rep("no_select", "no_select", {})),
        ("pdn", rep("pretrained_probe", "pdn", {})),
        ("pdn_pan", rep("pdn_pan", "pdn", {"eval.pan": True})),
    ]
    _show("pretraining + augmentation ablation", ablation_rows)

    ncrop_rows = [
        ("n=2", rep("n2", "n2", {})),
        ("n=4", rep("n4", "n4", {})),
        ("n=6", rep("pretrained_probe", "pdn", {})),
    ]
    _show("part-count sweep", ncrop_rows)

    na_rows = [
        ("n_a=0", rep("pan_na0", "pdn", {"eval.pan": True, "pan.n_a": 0})),
        ("n_a=1024", rep("pdn_pan", "pdn", {"eval.pan": True})),
    ]
    _show("augmentation-count sweep", na_rows)

    cam_rows = [
        ("plain_cam", rep("pdn_pan_plain", "pdn", {"eval.pan": True, "pan.cam_mode": "plain"})),
        ("competitive", rep("pdn_pan", "pdn", {"eval.pan": True})),
    ]
    _show("attention-map comparison", cam_rows)

    print(f"\ntotal {(time.time() - t0) / 60:.1f} min")


if __name__ == "__main__":
    main()

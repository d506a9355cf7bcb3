#!/usr/bin/env python3
"""Ablations over the pipeline's design axes, one trained model per cell:

  map-form : no noise map / std map / variance map / normalized map
  map-mode : carry the map through the real render vs linearized gains
  raw-loss : supervised raw branch (weight 1) vs rendered-only (weight 0)

Every cell trains on the same scenes with the same seed and is evaluated
against the shared noisy baseline on the same test noise draws.

Example:
    python scripts/run_ablations.py --out runs/abl --iters 1500 --axes map-form
"""

import argparse
import os
import sys
import time

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from dualdenoise import dataio, nets, training  # noqa: E402

AXES = {
    "map-form": [
        ("no_map", dict(noise_map_form="none"), {}),
        ("std_map", dict(noise_map_form="std"), {}),
        ("variance_map", dict(noise_map_form="variance"), {}),
        ("normalized_map", dict(noise_map_form="normalized"), {}),
    ],
    "map-mode": [
        ("signal_path", dict(map_mode="signal_path"), {}),
        ("linearized", dict(map_mode="linearized"), {}),
    ],
    "raw-loss": [
        ("raw_weight_1", {}, dict(raw_loss_weight=1.0)),
        ("raw_weight_0", {}, dict(raw_loss_weight=0.0)),
    ],
}


def build_parser():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--axes", nargs="+", choices=sorted(AXES), default=sorted(AXES))
    ap.add_argument("--iters", type=int, default=1500)
    ap.add_argument("--scenes", type=int, default=64)
    ap.add_argument("--size", type=int, default=96)
    ap.add_argument("--patch", type=int, default=64)
    ap.add_argument("--batch", type=int, default=4)
    ap.add_argument("--width", type=int, default=16)
    ap.add_argument("--depth", type=int, default=3)
    ap.add_argument("--lr0", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--K", type=float, default=0.02)
    ap.add_argument("--alphas", type=float, nargs="+", default=[0.5])
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    os.makedirs(args.out, exist_ok=True)
    train_m, test_m = dataio.gen_dataset(os.path.join(args.out, "data"),
                                         count=args.scenes, seed=args.seed,
                                         size=args.size)
    train_scenes = dataio.load_scenes(train_m)
    test_scenes = dataio.load_scenes(test_m)

    net = nets.NetConfig(depth=args.depth, width=args.width)
    base_train = dict(iters=args.iters, batch=args.batch, patch=args.patch,
                      lr0=args.lr0, seed=args.seed,
                      milestones=(max(args.iters // 2, 1),
                                  max(3 * args.iters // 4, 2)),
                      log_every=max(args.iters // 50, 1))

    models = {"noisy": None}
    for axis in args.axes:
        for label, pipe_kw, train_kw in AXES[axis]:
            if label in models:
                continue
            pipe = nets.PipelineConfig(**pipe_kw)
            cfg = training.TrainConfig(**{**base_train, **train_kw})
            model = nets.build_model(pipe, net, net, seed=args.seed,
                                     dtype=np.float32)
            t0 = time.time()
            hist = training.run_training(
                model, train_scenes, cfg,
                csv_path=os.path.join(args.out, f"train_{label}.csv"),
                weights_path=os.path.join(args.out, f"{label}.wbin"))
            print(f"[{label}] final loss {hist[-1]['loss']:.5f}, "
                  f"{time.time() - t0:.1f}s")
            models[label] = model

    rows = training.evaluate_models(models, test_scenes, gain=args.K,
                                    tone_strengths=tuple(args.alphas),
                                    seed=args.seed)
    csv_path = training.write_eval_csv(rows, os.path.join(args.out, "eval.csv"))
    print(f"\npaired evaluation at gain {args.K}:")
    for row in sorted(rows, key=lambda r: (r["tone_strength"], -r["psnr_db"])):
        print(f"  alpha={row['tone_strength']:.2f} {row['config']:>16s}  "
              f"psnr {row['psnr_db']:7.3f} dB   ssim {row['ssim']:.4f}")
    print(f"\nwrote {csv_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

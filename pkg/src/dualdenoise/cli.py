"""Command-line front door.

Subcommands: gen, render, train, eval, infer, gradcheck.  Exit codes:
0 success, 2 usage errors (argparse), 3 recoverable toolkit errors, which
are printed to stderr as one line "error:<category>: <message>".
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from dataclasses import replace

import numpy as np

from . import autodiff as ad
from . import config as config_mod
from . import dataio, isp, nets, rawnoise, training
from .errors import ParameterError, ToolkitError

GRAD_TOL = 1e-4


def _cmd_gen(args) -> int:
    if args.config:
        cfg = config_mod.load_experiment(args.config)
        out = os.path.dirname(cfg.train_manifest)
        if os.path.dirname(cfg.test_manifest) != out:
            raise ParameterError("train and test manifests must share a directory")
        train_m, test_m = dataio.gen_dataset(
            out,
            count=args.count if args.count is not None else cfg.scene_count,
            seed=args.seed if args.seed is not None else cfg.data_seed,
            size=cfg.scene_size,
            train_name=os.path.basename(cfg.train_manifest),
            test_name=os.path.basename(cfg.test_manifest))
    elif args.out:
        train_m, test_m = dataio.gen_dataset(
            args.out, count=args.count if args.count is not None else 80,
            seed=args.seed if args.seed is not None else 0, size=args.size)
    else:
        raise ParameterError("gen needs --config or --out")
    print(train_m)
    print(test_m)
    return 0


def _rephase(raw: rawnoise.RawImage) -> rawnoise.RawImage:
    """Largest even-sized RGGB view of an arbitrary-layout frame."""
    r_idx = raw.bayer.index("R")
    sy, sx = r_idx // 2, r_idx % 2
    h, w = raw.plane.shape
    h2, w2 = (h - sy) & ~1, (w - sx) & ~1
    plane = raw.plane[sy:sy + h2, sx:sx + w2]
    return rawnoise.RawImage(plane=plane, bayer="RGGB", params=raw.params)


def _postprocess(srgb: np.ndarray, args) -> np.ndarray:
    if getattr(args, "sharpen", None):
        srgb = isp.sharpen(srgb, amount=args.sharpen)
    if getattr(args, "clahe", None):
        srgb = isp.clahe_local_tm(srgb, clip=args.clahe)
    return srgb


def _cmd_render(args) -> int:
    raw = _rephase(dataio.load_raw_image(args.raw))
    p = replace(raw.params, tone_strength=args.alpha, demosaic_kind=args.demosaic)
    with ad.pause_recording():
        srgb = isp.run_isp(raw, p).data[0]
    dataio.write_png8(args.out, _postprocess(srgb, args))
    print(args.out)
    return 0


def _load_training_inputs(args):
    cfg = config_mod.load_experiment(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.train = replace(cfg.train, seed=args.seed)
    config_mod.validate_data_split(cfg)
    return cfg


def _cmd_train(args) -> int:
    cfg = _load_training_inputs(args)
    scenes = config_mod.apply_demosaic_kind(
        dataio.load_scenes(cfg.train_manifest), cfg.demosaic_kind)
    start_iter, opt_state = 0, None
    if args.resume:
        model, meta = dataio.load_model(args.resume)
        start_iter, opt_state = meta["iteration"], meta["opt_state"]
        if opt_state is None:
            raise ParameterError(
                f"{args.resume} has no optimizer state; cannot resume exactly")
    else:
        model = nets.build_model(cfg.pipeline, cfg.raw_net, cfg.srgb_net,
                                 seed=cfg.train.seed, dtype=np.float32)
    os.makedirs(cfg.out_dir, exist_ok=True)
    history = training.run_training(
        model, scenes, cfg.train, sampler=cfg.sampler,
        csv_path=cfg.train_csv_path, weights_path=cfg.weights_path,
        checkpoint_dir=os.path.join(cfg.out_dir, "checkpoints"),
        start_iter=start_iter, opt_state=opt_state)
    print(cfg.weights_path)
    print(f"final loss {history[-1]['loss']:.6f} over {cfg.train.iters} iterations")
    return 0


def _cmd_eval(args) -> int:
    cfg = _load_training_inputs(args)
    scenes = config_mod.apply_demosaic_kind(
        dataio.load_scenes(cfg.test_manifest), cfg.demosaic_kind)
    if args.K <= 0:
        raise ParameterError(f"--K must be positive, got {args.K}")
    models = {"noisy": None}
    for path in args.weights:
        label = os.path.splitext(os.path.basename(path))[0]
        models[label], _ = dataio.load_model(path)
    alphas = args.alpha or [0.0]
    rows = training.evaluate_models(models, scenes, gain=args.K,
                                    tone_strengths=alphas,
                                    seed=cfg.train.seed)
    training.write_eval_csv(rows, args.csv)
    for row in rows:
        print(f"{row['config']:>16s} alpha={row['tone_strength']:.2f} "
              f"psnr={row['psnr_db']:.3f} ssim={row['ssim']:.4f}")
    print(args.csv)
    return 0


def _cmd_infer(args) -> int:
    raw = _rephase(dataio.load_raw_image(args.raw))
    model, _ = dataio.load_model(args.weights)
    gain = args.gain
    read_var = args.read_var if args.read_var is not None else rawnoise.expected_read_var(gain)
    nparams = rawnoise.NoiseParams(gain=gain, read_var=read_var)
    p = replace(raw.params, tone_strength=args.alpha, demosaic_kind=args.demosaic)
    with ad.using_mode("train"), ad.pause_recording():
        raw_out, srgb = nets.forward_dual(model, raw.plane, nparams, p)
        dataio.write_png8(args.out, _postprocess(srgb.data[0], args))
        if args.save_intermediate_raw:
            if raw_out is None:
                raise ParameterError(
                    "this pipeline has no raw-domain stage to export")
            plane = np.clip(rawnoise.unpack_bayer(raw_out), 0.0, 1.0)
            span = p.white_level - p.black_level
            dn = np.clip(np.floor(p.black_level + plane * span + 0.5),
                         0, 65535).astype(np.uint16)
            dataio.write_raw_container(args.save_intermediate_raw, dn, "RGGB", p)
    print(args.out)
    return 0


# ----------------------------------------------------------------- gradcheck

def _stage_checks(seed: int) -> dict:
    rng = rawnoise.stream_rng(seed, 0xC4EC)
    interior = lambda shape: rng.uniform(0.1, 0.9, size=shape)
    p = isp.IspParams(tone_strength=0.5)

    def elementwise():
        x = ad.param(interior((3, 5)))
        f = lambda t: ad.mean_all(ad.mul(ad.exp(ad.mul(t, 0.3)),
                                         ad.sqrt(ad.add(ad.log(ad.add(t, 1.0)), 0.5))))
        return ad.gradcheck(f, x)

    def conv():
        x = ad.param(interior((1, 3, 8, 8)))
        w = ad.constant(rng.normal(0, 0.4, size=(2, 3, 3, 3)))
        return ad.gradcheck(lambda t: ad.mean_all(ad.conv2d(t, w)), x)

    def shuffle():
        x = ad.param(interior((1, 1, 8, 8)))
        return ad.gradcheck(
            lambda t: ad.mean_all(ad.mul(ad.pixel_shuffle(ad.pixel_unshuffle(t, 2), 2), 2.0)), x)

    def stage_fn(fn):
        x = ad.param(interior((1, 4, 4, 4)))
        return ad.gradcheck(lambda t: ad.mean_all(fn(t)), x)

    def demosaic_check():
        x = ad.param(interior((1, 1, 8, 8)))
        worst = 0.0
        for kind in isp.DEMOSAIC_KINDS:
            pk = replace(p, demosaic_kind=kind)
            worst = max(worst, ad.gradcheck(
                lambda t: ad.mean_all(isp.demosaic(t, pk)), x))
        return worst

    def rgb_stage(fn):
        x = ad.param(interior((1, 3, 6, 6)))
        return ad.gradcheck(lambda t: ad.mean_all(fn(t)), x)

    def full_isp():
        x = ad.param(interior((1, 1, 10, 10)))
        return ad.gradcheck(lambda t: ad.mean_all(isp.run_isp(t, p)), x)

    def noise_map():
        x = ad.param(interior((1, 4, 4, 4)))
        npar = rawnoise.NoiseParams(gain=0.01, read_var=1e-4)
        return ad.gradcheck(
            lambda t: ad.mean_all(rawnoise.noise_map_variants(t, npar, "std")), x)

    def fusion():
        block = nets.FusionBlock("fb", 4, 4, 6, 3, rng, "gated", True, np.float64)
        block.gate.w = ad.param(rng.normal(0, 0.3, size=block.gate.w.data.shape))
        feat = ad.constant(interior((1, 4, 6, 6)))
        nmap = ad.constant(interior((1, 4, 6, 6)))

        def f(w):
            old = block.gate.w
            block.gate.w = w
            try:
                return ad.mean_all(block.fuse(feat, nmap))
            finally:
                block.gate.w = old

        return ad.gradcheck(f, ad.param(block.gate.w.data.copy()))

    def loss_end_to_end():
        model = nets.build_model(
            nets.PipelineConfig(), nets.NetConfig(depth=1, width=4),
            nets.NetConfig(depth=1, width=4), seed=seed, dtype=np.float64)
        # zero-initialized heads would hide the inner weights from the loss
        for t in model.parameters().values():
            t.data = t.data + rng.normal(0.0, 0.05, size=t.data.shape)
        plane = interior((8, 8))
        npar = rawnoise.NoiseParams(gain=0.01, read_var=1e-4)
        target_raw = ad.constant(interior((1, 4, 4, 4)))
        target_srgb = ad.constant(interior((1, 3, 8, 8)))
        layer = model.raw_net.blocks[0]

        def f(w):
            old = layer.w
            layer.w = w
            try:
                raw_out, srgb = nets.forward_dual(model, plane, npar, p)
                loss, _, _ = training.dual_loss(raw_out, target_raw, srgb,
                                                target_srgb, 1.0)
                return loss
            finally:
                layer.w = old

        return ad.gradcheck(f, ad.param(layer.w.data.copy()))

    return {
        "elementwise": elementwise,
        "conv": conv,
        "shuffle": shuffle,
        "white_balance": lambda: stage_fn(lambda t: isp.white_balance(t, p)),
        "demosaic": demosaic_check,
        "color_correct": lambda: rgb_stage(lambda t: isp.color_correct(t, p)),
        "tonemap": lambda: rgb_stage(lambda t: isp.global_tonemap(t, 0.7)),
        "gamma": lambda: rgb_stage(isp.gamma_encode),
        "isp": full_isp,
        "noise_map": noise_map,
        "fusion": fusion,
        "loss": loss_end_to_end,
    }


def _cmd_gradcheck(args) -> int:
    checks = _stage_checks(args.seed)
    if args.stage != "all" and args.stage not in checks:
        raise ParameterError(
            f"unknown stage {args.stage!r}; choose from {sorted(checks)} or 'all'")
    names = sorted(checks) if args.stage == "all" else [args.stage]
    worst = 0.0
    with ad.using_mode("test"):
        for name in names:
            err = checks[name]()
            worst = max(worst, err)
            status = "ok" if err <= GRAD_TOL else "FAIL"
            print(f"{name:>16s} max_rel_err={err:.3e} {status}")
    return 0 if worst <= GRAD_TOL else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dualdenoise",
        description="raw noise synthesis, differentiable rendering, dual-domain denoising")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="synthesize a raw dataset with manifests")
    g.add_argument("--config", default=None,
                   help="experiment config naming the manifests to create")
    g.add_argument("--out", default=None,
                   help="bare output directory (alternative to --config)")
    g.add_argument("--count", type=int, default=None)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--size", type=int, default=96)
    g.set_defaults(func=_cmd_gen)

    r = sub.add_parser("render", help="render one raw container to 8-bit sRGB")
    r.add_argument("--raw", required=True)
    r.add_argument("--alpha", type=float, default=0.0)
    r.add_argument("--demosaic", choices=isp.DEMOSAIC_KINDS, default="bilinear")
    r.add_argument("--sharpen", type=float, default=None,
                   help="unsharp-mask amount appended after rendering")
    r.add_argument("--clahe", type=float, default=None,
                   help="clip limit for local contrast applied after rendering")
    r.add_argument("--out", required=True)
    r.set_defaults(func=_cmd_render)

    t = sub.add_parser("train", help="train the configured pipeline")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, default=None,
                   help="override the config's training seed")
    t.add_argument("--resume", default=None,
                   help="weights bundle with optimizer state to continue from")
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="paired evaluation on the test manifest")
    e.add_argument("--config", required=True)
    e.add_argument("--weights", action="append", default=[],
                   help="weights bundle; repeatable")
    e.add_argument("--K", type=float, required=True,
                   help="sensor gain of the synthetic test noise")
    e.add_argument("--alpha", type=float, action="append", default=None,
                   help="tone strength; repeatable (default 0)")
    e.add_argument("--csv", required=True)
    e.set_defaults(func=_cmd_eval)

    i = sub.add_parser("infer", help="denoise and render one raw container")
    i.add_argument("--raw", required=True)
    i.add_argument("--weights", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--save-intermediate-raw", default=None,
                   help="also store the denoised mosaic as a raw container")
    i.add_argument("--gain", type=float, default=math.sqrt(2e-4 * 2e-2),
                   help="sensor gain for the noise map (default: calibrated midpoint)")
    i.add_argument("--read-var", type=float, default=None,
                   help="read-noise variance (default: fit line at --gain)")
    i.add_argument("--alpha", type=float, default=0.0)
    i.add_argument("--demosaic", choices=isp.DEMOSAIC_KINDS, default="bilinear")
    i.add_argument("--sharpen", type=float, default=None)
    i.add_argument("--clahe", type=float, default=None)
    i.set_defaults(func=_cmd_infer)

    c = sub.add_parser("gradcheck", help="finite-difference audit of the stages")
    c.add_argument("--stage", default="all")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=_cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ToolkitError as exc:
        print(f"error:{exc.category}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

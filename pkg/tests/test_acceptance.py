"""Release acceptance gate.

Eleven numbered criteria, one test each, at pinned tolerances.  The verbose
test listing therefore reads as the release checklist.  Criteria 6-9 and 11
share a desk-scale training matrix (three pipelines plus two ablation arms,
three seeds each) built once per session; the matrix dominates the gate's
runtime, so expect the full file to take tens of minutes on one CPU core.
"""

import time
from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest

from dualdenoise import autodiff as ad
from dualdenoise import cli, dataio, isp, metrics, nets, rawnoise, training
from dualdenoise.nets import NetConfig, PipelineConfig
from dualdenoise.rawnoise import NoiseParams, RawImage, SamplerConfig

GAIN = 0.02
ALPHAS = (0.0, 0.5)
SEEDS = (0, 1, 2)
DATA_SEED = 7
EVAL_SEED = 0
REPLICATION_ARMS = ("dual", "raw_only", "srgb_only")
ABLATION_ARMS = ("no_map", "raw_loss_off")


def _report(num: int, detail: str) -> None:
    print(f"[criterion {num:02d}] PASS {detail}")


# --------------------------------------------------- shared training matrix

def _build_arm(arm: str, seed: int) -> nets.DualModel:
    if arm in ("raw_only", "srgb_only"):
        pc = PipelineConfig(mode=arm)
        depth = 6  # single-domain nets get double depth for parameter parity
    elif arm == "no_map":
        pc = PipelineConfig(mode="dual", noise_map_form="none")
        depth = 3
    else:  # "dual" and "raw_loss_off" share the full architecture
        pc = PipelineConfig(mode="dual")
        depth = 3
    nc = NetConfig(depth=depth, width=16)
    return nets.build_model(pc, nc, nc, seed=seed, dtype=np.float32)


def _train_arm(arm: str, seed: int, scenes, out_dir) -> SimpleNamespace:
    kw = {"raw_loss_weight": 0.0} if arm == "raw_loss_off" else {}
    cfg = training.TrainConfig.desk_profile(seed=seed, log_every=100, **kw)
    model = _build_arm(arm, seed)
    csv_path = str(out_dir / f"{arm}_s{seed}.csv")
    weights_path = str(out_dir / f"{arm}_s{seed}.wbin")
    t0 = time.perf_counter()
    training.run_training(model, scenes, cfg,
                          csv_path=csv_path, weights_path=weights_path)
    return SimpleNamespace(model=model, csv=csv_path, weights=weights_path,
                           seconds=time.perf_counter() - t0)


@pytest.fixture(scope="session")
def accept_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("accept_data")
    train_m, test_m = dataio.gen_dataset(str(root), count=80, seed=DATA_SEED,
                                         size=96)
    return dataio.load_scenes(train_m), dataio.load_scenes(test_m)


@pytest.fixture(scope="session")
def replication_runs(accept_data, tmp_path_factory):
    train, _ = accept_data
    out = tmp_path_factory.mktemp("accept_runs")
    return {(arm, seed): _train_arm(arm, seed, train, out)
            for seed in SEEDS for arm in REPLICATION_ARMS}


@pytest.fixture(scope="session")
def ablation_runs(accept_data, tmp_path_factory):
    train, _ = accept_data
    out = tmp_path_factory.mktemp("accept_ablations")
    return {(arm, seed): _train_arm(arm, seed, train, out)
            for seed in SEEDS for arm in ABLATION_ARMS}


@pytest.fixture(scope="session")
def eval_table(accept_data, replication_runs, ablation_runs):
    """Paired test-set scores: every config of a seed sees the same noisy
    realization per scene, across both render strengths."""
    _, test = accept_data
    psnr_at = {}
    t0 = time.perf_counter()
    for seed in SEEDS:
        models = {"noisy": None}
        models.update({a: replication_runs[(a, seed)].model
                       for a in REPLICATION_ARMS})
        models.update({a: ablation_runs[(a, seed)].model
                       for a in ABLATION_ARMS})
        for row in training.evaluate_models(models, test, GAIN,
                                            tone_strengths=ALPHAS,
                                            seed=EVAL_SEED):
            psnr_at[(seed, row["config"], row["tone_strength"])] = row["psnr_db"]
    return SimpleNamespace(psnr=psnr_at, seconds=time.perf_counter() - t0)


def _median_at(table, label: str, alpha: float) -> float:
    return float(np.median([table.psnr[(s, label, alpha)] for s in SEEDS]))


def _median_overall(table, label: str) -> float:
    per_seed = [np.mean([table.psnr[(s, label, a)] for a in ALPHAS])
                for s in SEEDS]
    return float(np.median(per_seed))


# ------------------------------------------------------------ the criteria

def test_criterion_01_gradient_correctness():
    t0 = time.perf_counter()
    for seed in range(5):
        assert cli.main(["gradcheck", "--stage", "all", "--seed", str(seed)]) == 0
    elapsed = time.perf_counter() - t0
    assert elapsed <= 60.0
    _report(1, f"all stages <= 1e-4 rel err on 5 seeds in {elapsed:.1f}s")


def test_criterion_02_noise_model_fidelity():
    t0 = time.perf_counter()
    worst_mean, worst_var = 0.0, 0.0
    p = isp.IspParams()
    for i, gain in enumerate((2e-4, 2e-3, 2e-2)):
        read_var = rawnoise.expected_read_var(gain)
        for j, level in enumerate((0.05, 0.25, 0.8)):
            clean = RawImage(np.full((1000, 1000), level), "RGGB", p)
            noisy = rawnoise.synthesize_noise(
                clean, NoiseParams(gain=gain, read_var=read_var),
                rawnoise.stream_rng(800, i, j))
            mean_err = abs(noisy.plane.mean() - level)
            expected_var = gain * level + read_var
            var_rel = abs(noisy.plane.var() - expected_var) / expected_var
            assert mean_err <= 1e-3, (gain, level, mean_err)
            assert var_rel <= 0.02, (gain, level, var_rel)
            worst_mean = max(worst_mean, mean_err)
            worst_var = max(worst_var, var_rel)
    elapsed = time.perf_counter() - t0
    assert elapsed <= 30.0
    _report(2, f"9 x 1e6 samples: mean err <= {worst_mean:.1e}, "
               f"var rel err <= {worst_var:.3f} in {elapsed:.1f}s")


def test_criterion_03_sampler_calibration():
    rng = rawnoise.stream_rng(801)
    draws = [rawnoise.sample_noise_params(SamplerConfig(), rng)
             for _ in range(10_000)]
    log_gain = np.log([d.gain for d in draws])
    log_var = np.log([d.read_var for d in draws])
    slope, intercept = np.polyfit(log_gain, log_var, 1)
    residual_std = float(np.std(log_var - (slope * log_gain + intercept)))
    assert abs(slope - 2.540) <= 0.05
    assert abs(intercept - 1.218) <= 0.05
    assert abs(residual_std - 0.268) <= 0.02
    _report(3, f"slope {slope:.3f}, intercept {intercept:.3f}, "
               f"residual std {residual_std:.3f}")


def test_criterion_04_tone_curve_contract():
    grid = np.linspace(0.0, 1.0, 1001)
    for alpha in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = isp.global_tonemap(ad.constant(grid), alpha).data
        assert abs(y[0] - 0.0) <= 1e-12
        assert abs(y[-1] - 1.0) <= 1e-12
        assert (np.diff(y) >= 0).all(), f"not monotone at alpha={alpha}"
        assert (np.diff(y, 2) <= 1e-9).all(), f"convex segment at alpha={alpha}"
    assert np.array_equal(isp.global_tonemap(ad.constant(grid), 0.0).data, grid)
    mid = isp.global_tonemap(ad.constant(np.array(0.5)), 1.0).data
    assert float(mid) == 0.9375
    _report(4, "1001-point grid: endpoints, monotone, concave, identity, "
               "midpoint 0.9375 exact")


def test_criterion_05_structural_identities():
    rng = rawnoise.stream_rng(802)
    # shuffle round trips, both directions, bit-exact
    x = rng.uniform(0, 1, size=(2, 4, 6, 6))
    assert np.array_equal(
        ad.pixel_unshuffle(ad.pixel_shuffle(ad.constant(x), 2), 2).data, x)
    y = rng.uniform(0, 1, size=(2, 1, 8, 8))
    assert np.array_equal(
        ad.pixel_shuffle(ad.pixel_unshuffle(ad.constant(y), 2), 2).data, y)

    # crop phase table: every layout and origin parity yields a true RGGB tile
    code = {"R": 0.1, "G": 0.5, "B": 0.9}
    p = isp.IspParams()
    cases = 0
    for layout in dataio.BAYER_LAYOUTS:
        plane = np.empty((12, 12))
        for dy in (0, 1):
            for dx in (0, 1):
                plane[dy::2, dx::2] = code[layout[dy * 2 + dx]]
        raw = RawImage(plane, layout, p)
        for ox in (0, 1):
            for oy in (0, 1):
                c = dataio.crop_rggb(raw, ox, oy, 8)
                assert c.bayer == "RGGB"
                assert (c.plane[0::2, 0::2] == 0.1).all()
                assert (c.plane[0::2, 1::2] == 0.5).all()
                assert (c.plane[1::2, 0::2] == 0.5).all()
                assert (c.plane[1::2, 1::2] == 0.9).all()
                cases += 1
    assert cases == 16

    # demosaic of a constant mosaic is exactly constant, both kinds
    const = ad.constant(np.full((1, 1, 8, 8), 0.37))
    for kind in isp.DEMOSAIC_KINDS:
        out = isp.demosaic(const, replace(p, demosaic_kind=kind)).data
        assert np.array_equal(out, np.full((1, 3, 8, 8), 0.37))

    # full render of a spatially constant mosaic stays spatially constant
    for alpha in (0.0, 0.7):
        pc = replace(p, tone_strength=alpha)
        out = isp.run_isp(RawImage(np.full((10, 10), 0.42), "RGGB", pc), pc).data
        flat = out.reshape(3, -1)
        assert np.abs(flat - flat.mean(axis=1, keepdims=True)).max() <= 1e-9
    _report(5, "shuffle round trips bit-exact, 16/16 crop phases, constant "
               "demosaic exact, render constancy <= 1e-9")


def test_criterion_06_dual_beats_noisy_and_both_singles(replication_runs,
                                                        eval_table):
    margins = []
    for alpha in ALPHAS:
        dual = _median_at(eval_table, "dual", alpha)
        noisy = _median_at(eval_table, "noisy", alpha)
        margins.append(dual - noisy)
        assert dual - noisy >= 6.0, f"margin {dual - noisy:.2f} dB at alpha={alpha}"
        for single in ("raw_only", "srgb_only"):
            other = _median_at(eval_table, single, alpha)
            assert dual >= other, (f"dual {dual:.2f} < {single} {other:.2f} "
                                   f"at alpha={alpha}")
    runtime = sum(replication_runs[k].seconds for k in replication_runs)
    runtime += eval_table.seconds
    assert runtime <= 1800.0, f"replication took {runtime / 60:.1f} min"
    _report(6, f"dual over noisy {margins[0]:+.2f}/{margins[1]:+.2f} dB, "
               f"beats both singles, {runtime / 60:.1f} min")


def test_criterion_07_noise_map_helps(eval_table):
    with_map = _median_overall(eval_table, "dual")
    without = _median_overall(eval_table, "no_map")
    assert with_map >= without, f"{with_map:.2f} < {without:.2f}"
    _report(7, f"std map {with_map:.2f} dB >= no map {without:.2f} dB")


def test_criterion_08_raw_loss_not_harmful(eval_table):
    both = _median_overall(eval_table, "dual")
    srgb_only_loss = _median_overall(eval_table, "raw_loss_off")
    assert both >= srgb_only_loss - 0.1, f"{both:.2f} vs {srgb_only_loss:.2f}"
    _report(8, f"raw loss on {both:.2f} dB vs off {srgb_only_loss:.2f} dB "
               f"(slack 0.1 dB)")


def test_criterion_09_unseen_postprocessing(accept_data, replication_runs):
    _, test = accept_data
    model = replication_runs[("dual", 0)].model
    nparams = NoiseParams(gain=GAIN, read_var=rawnoise.expected_read_var(GAIN))
    ops = {"sharpen": lambda img: isp.sharpen(img, amount=0.7, radius=2),
           "clahe": lambda img: isp.clahe_local_tm(img, clip=2.5, tiles=4)}
    scores = {(name, a): [] for name in ops for a in ALPHAS}
    with ad.using_mode("train"), ad.pause_recording():
        for idx, scene in enumerate(test):
            noisy = rawnoise.synthesize_noise(scene, nparams,
                                              rawnoise.stream_rng(803, idx))
            for alpha in ALPHAS:
                p = replace(scene.params, tone_strength=alpha)
                gt = isp.run_isp(scene, p).data[0]
                base = isp.run_isp(noisy, p).data[0]
                denoised = nets.forward_dual(model, noisy.plane, nparams,
                                             p)[1].data[0]
                for name, op in ops.items():
                    ref, a, b = op(gt), op(denoised), op(base)
                    for img in (ref, a, b):
                        assert img.min() >= 0.0 and img.max() <= 1.0
                    scores[(name, alpha)].append(
                        (metrics.psnr(a, ref), metrics.psnr(b, ref)))
    details = []
    for (name, alpha), pairs in scores.items():
        dual_db = float(np.mean([q[0] for q in pairs]))
        noisy_db = float(np.mean([q[1] for q in pairs]))
        assert dual_db >= noisy_db, (name, alpha, dual_db, noisy_db)
        details.append(f"{name}@{alpha:g} {dual_db - noisy_db:+.2f}")
    _report(9, "post-op margins " + ", ".join(details) + " dB, outputs in [0,1]")


def test_criterion_10_metric_sanity():
    base = np.zeros((3, 16, 16))
    assert abs(metrics.psnr(base + 0.1, base) - 20.0) <= 1e-9
    assert abs(metrics.psnr(base + 0.5, base) - 6.020599913279624) <= 1e-9
    img = rawnoise.stream_rng(804).uniform(0, 1, size=(3, 24, 24))
    assert abs(metrics.ssim(img, img) - 1.0) <= 1e-9
    _report(10, "20.0 dB, 6.0206 dB, self-SSIM 1.0 within 1e-9")


def test_criterion_11_bit_exact_repeatability(accept_data, replication_runs,
                                              eval_table, tmp_path):
    train, test = accept_data
    models = {}
    for arm in REPLICATION_ARMS:
        first = replication_runs[(arm, 0)]
        again = _train_arm(arm, 0, train, tmp_path)
        models[arm] = again.model
        with open(first.weights, "rb") as fa, open(again.weights, "rb") as fb:
            assert fa.read() == fb.read(), f"{arm} weights differ"
        sidecar = first.weights.replace(".wbin", ".json")
        sidecar_again = again.weights.replace(".wbin", ".json")
        with open(sidecar, "rb") as fa, open(sidecar_again, "rb") as fb:
            assert fa.read() == fb.read(), f"{arm} weight manifests differ"
        with open(first.csv, "r", encoding="utf-8") as fa, \
             open(again.csv, "r", encoding="utf-8") as fb:
            assert fa.read() == fb.read(), f"{arm} training logs differ"
    rows = training.evaluate_models(models, test, GAIN, tone_strengths=ALPHAS,
                                    seed=EVAL_SEED)
    for row in rows:
        previous = eval_table.psnr[(0, row["config"], row["tone_strength"])]
        assert row["psnr_db"] == previous
    _report(11, "seed-0 retrain: weights, logs, and scores bit-identical")

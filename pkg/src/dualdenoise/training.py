"""End-to-end training of the dual denoiser through the rendering chain.

Every random decision is keyed by (seed, purpose, iteration, sample), so a
run is a pure function of its config and a rerun reproduces weights and
logs bit for bit.  Supervision happens in both domains at once: an L1 term
on the packed raw output plus an L1 term on the rendered output, with the
clean target pushed through the identical render parameters the noisy
branch saw.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import isp as isp_mod
from . import rawnoise
from .errors import ParameterError, TrainingDiverged
from .metrics import MetricReport, psnr, ssim
from .nets import DualModel, forward_dual
from .rawnoise import NoiseParams, RawImage, SamplerConfig, stream_rng

ADAM_EPS = 1e-8

# rng stream tags; distinct constants keep draw order independent of code paths
_TAG_BATCH = 0xBA
_TAG_SAMPLE = 0x5A
_TAG_EVAL = 0xE7A


@dataclass(frozen=True)
class TrainConfig:
    """Optimization schedule and degradation ranges.

    Defaults are the full-scale profile; desk_profile() shrinks everything
    to minutes on a CPU while exercising the identical code path.
    """

    iters: int = 120_000
    batch: int = 2
    patch: int = 256
    lr0: float = 1e-5
    milestones: tuple = (40_000, 60_000, 80_000, 100_000)
    decay: float = 0.6
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 1e-2
    raw_loss_weight: float = 1.0
    gain_range: tuple = (2e-4, 2e-2)
    tone_range: tuple = (0.0, 1.0)
    seed: int = 0
    log_every: int = 10
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.iters < 1 or self.batch < 1:
            raise ParameterError("iters and batch must be positive")
        if self.patch < 8 or self.patch % 2:
            raise ParameterError(f"patch must be even and >= 8, got {self.patch}")
        if self.lr0 <= 0 or not 0 < self.decay <= 1:
            raise ParameterError("need lr0 > 0 and decay in (0, 1]")
        if any(m <= 0 for m in self.milestones) or list(self.milestones) != sorted(
                set(self.milestones)):
            raise ParameterError(f"milestones must be increasing: {self.milestones}")
        b1, b2 = self.betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ParameterError(f"betas must lie in [0, 1), got {self.betas}")
        if self.weight_decay < 0 or self.raw_loss_weight < 0:
            raise ParameterError("weight_decay and raw_loss_weight must be >= 0")
        lo, hi = self.gain_range
        if not 0 < lo <= hi:
            raise ParameterError(f"bad gain_range {self.gain_range}")
        tlo, thi = self.tone_range
        if not 0.0 <= tlo <= thi <= 1.0:
            raise ParameterError(f"tone_range must sit inside [0, 1]: {self.tone_range}")

    @classmethod
    def paper_profile(cls, **kw) -> "TrainConfig":
        return cls(**kw)

    @classmethod
    def desk_profile(cls, **kw) -> "TrainConfig":
        base = dict(iters=2000, batch=4, patch=64, lr0=1e-3,
                    milestones=(1000, 1500))
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return {
            "iters": self.iters, "batch": self.batch, "patch": self.patch,
            "lr0": self.lr0, "milestones": list(self.milestones),
            "decay": self.decay, "betas": list(self.betas),
            "weight_decay": self.weight_decay,
            "raw_loss_weight": self.raw_loss_weight,
            "gain_range": list(self.gain_range),
            "tone_range": list(self.tone_range), "seed": self.seed,
            "log_every": self.log_every,
            "checkpoint_every": self.checkpoint_every,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        for key in ("milestones", "betas", "gain_range", "tone_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """Stepwise schedule: lr0 decayed once per milestone already reached."""
    passed = sum(1 for m in cfg.milestones if m <= iteration)
    return cfg.lr0 * cfg.decay ** passed


def sample_gain(cfg: TrainConfig, rng: np.random.Generator) -> float:
    lo, hi = cfg.gain_range
    return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))


# ------------------------------------------------------------------ optimizer

def adamw_update(theta, grad, m, v, t, lr, betas=(0.9, 0.999),
                 eps=ADAM_EPS, weight_decay=0.0):
    """One decoupled-weight-decay Adam step on raw arrays; returns new ones."""
    b1, b2 = betas
    m = b1 * m + (1.0 - b1) * grad
    v = b2 * v + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1 ** t)
    v_hat = v / (1.0 - b2 ** t)
    theta = theta - lr * weight_decay * theta
    theta = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
    return theta, m, v


class AdamW:
    """Holds first/second moments per parameter; step() consumes .grad."""

    def __init__(self, params: dict, betas=(0.9, 0.999),
                 weight_decay: float = 1e-2, eps: float = ADAM_EPS):
        self.params = params
        self.betas = tuple(betas)
        self.weight_decay = float(weight_decay)
        self.eps = float(eps)
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}

    @classmethod
    def for_config(cls, params: dict, cfg: TrainConfig) -> "AdamW":
        return cls(params, betas=cfg.betas, weight_decay=cfg.weight_decay)

    def step(self, lr: float):
        self.step_count += 1
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                raise TrainingDiverged(f"parameter {name!r} received no gradient")
            if not np.isfinite(g).all():
                raise TrainingDiverged(
                    f"non-finite gradient in {name!r} at optimizer step {self.step_count}")
            p.data, self.m[name], self.v[name] = adamw_update(
                p.data, g, self.m[name], self.v[name], self.step_count, lr,
                self.betas, self.eps, self.weight_decay)

    def state_dict(self) -> dict:
        return {"step": self.step_count,
                "m": {k: a.copy() for k, a in self.m.items()},
                "v": {k: a.copy() for k, a in self.v.items()}}

    def load_state_dict(self, state: dict):
        self.step_count = int(state["step"])
        for k in self.params:
            self.m[k] = np.asarray(state["m"][k]).astype(self.m[k].dtype).copy()
            self.v[k] = np.asarray(state["v"][k]).astype(self.v[k].dtype).copy()


# ----------------------------------------------------------------- loss/batch

def dual_loss(raw_out, raw_target, srgb_out, srgb_target, raw_weight: float):
    """weight * L1(raw) + L1(srgb); returns (loss, raw_value, srgb_value)."""
    srgb_term = ad.reduce_mean_abs(srgb_out, srgb_target)
    if raw_out is None:
        return srgb_term, 0.0, float(srgb_term.data)
    raw_term = ad.reduce_mean_abs(raw_out, raw_target)
    loss = ad.add(ad.mul(raw_term, float(raw_weight)), srgb_term)
    return loss, float(raw_term.data), float(srgb_term.data)


def augment_mosaic(plane: np.ndarray, flip_h: bool, flip_v: bool) -> np.ndarray:
    """Flip a mosaic without moving its color sites.

    A bare flip of an even-sized RGGB plane swaps the site parity along the
    flipped axis; rolling by one pixel afterwards restores it, at the cost
    of wrapping one row or column (harmless for photographic statistics).
    """
    out = plane
    if flip_h:
        out = np.roll(np.flip(out, axis=1), 1, axis=1)
    if flip_v:
        out = np.roll(np.flip(out, axis=0), 1, axis=0)
    return np.ascontiguousarray(out)


def augment(planes, rng: np.random.Generator) -> list:
    """Apply one shared flip decision to every plane in the group."""
    flip_h = bool(rng.integers(0, 2))
    flip_v = bool(rng.integers(0, 2))
    return [augment_mosaic(np.asarray(p), flip_h, flip_v) for p in planes]


def _pick_patch(scene: RawImage, patch: int, rng: np.random.Generator) -> np.ndarray:
    h, w = scene.plane.shape
    if patch > h or patch > w:
        raise ParameterError(f"patch {patch} exceeds scene {h}x{w}")
    y = 2 * int(rng.integers(0, (h - patch) // 2 + 1))
    x = 2 * int(rng.integers(0, (w - patch) // 2 + 1))
    return scene.plane[y:y + patch, x:x + patch]


def train_step(model: DualModel, opt: AdamW, batch: list, cfg: TrainConfig,
               sampler: SamplerConfig, iteration: int) -> dict:
    """One optimizer update from a list of clean RGGB patches.

    Per sample: draw a noise level and a tone strength, corrupt the clean
    mosaic, render the clean target through the very same parameters, run
    the model, and accumulate the two-domain loss.
    """
    losses = []
    raw_vals, srgb_vals = [], []
    with ad.Tape():
        for i, clean in enumerate(batch):
            rng = stream_rng(cfg.seed, _TAG_SAMPLE, iteration, i)
            nparams = rawnoise.sample_noise_params(
                replace(sampler, gain_min=cfg.gain_range[0], gain_max=cfg.gain_range[1]),
                rng)
            tlo, thi = cfg.tone_range
            alpha = float(rng.uniform(tlo, thi))
            p = replace(clean.params, tone_strength=alpha)
            noisy = rawnoise.synthesize_noise(clean, nparams, rng)
            with ad.pause_recording():
                raw_target = rawnoise.pack_bayer(clean).data.astype(model.dtype)
                srgb_target = isp_mod.run_isp(clean, p).data.astype(model.dtype)
            raw_out, srgb_out = forward_dual(model, noisy.plane, nparams, p)
            loss_i, rv, sv = dual_loss(raw_out, ad.constant(raw_target),
                                       srgb_out, ad.constant(srgb_target),
                                       cfg.raw_loss_weight)
            losses.append(loss_i)
            raw_vals.append(rv)
            srgb_vals.append(sv)
        total = losses[0]
        for extra in losses[1:]:
            total = ad.add(total, extra)
        total = ad.mul(total, 1.0 / len(losses))
        loss_value = float(total.data)
        if not math.isfinite(loss_value):
            raise TrainingDiverged(
                f"loss became {loss_value} at iteration {iteration}")
        model.zero_grad()
        ad.backward(total)
    lr = lr_at(iteration, cfg)
    opt.step(lr)
    return {"iter": iteration, "lr": lr, "loss": loss_value,
            "raw_term": float(np.mean(raw_vals)),
            "srgb_term": float(np.mean(srgb_vals))}


CSV_FIELDS = ("iter", "lr", "loss", "raw_term", "srgb_term")


def run_training(model: DualModel, scenes: list, cfg: TrainConfig,
                 sampler: SamplerConfig | None = None, csv_path: str | None = None,
                 weights_path: str | None = None, checkpoint_dir: str | None = None,
                 start_iter: int = 0, opt_state: dict | None = None,
                 log=None) -> list:
    """Full training loop; returns the per-logged-iteration history rows.

    Iterations are numbered 0..iters-1 and every stream is keyed by the
    absolute iteration, so resuming from a checkpoint at iteration k
    produces the same weights as an uninterrupted run.
    """
    if not scenes:
        raise ParameterError("no training scenes given")
    from . import dataio  # local import: dataio pulls nets, not training

    opt = AdamW.for_config(model.parameters(), cfg)
    if opt_state is not None:
        opt.load_state_dict(opt_state)
    history = []
    writer = None
    fh = None
    if csv_path:
        os.makedirs(os.path.dirname(os.path.abspath(csv_path)), exist_ok=True)
        fh = open(csv_path, "a" if start_iter else "w", encoding="utf-8", newline="")
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        if not start_iter:
            writer.writeheader()
    try:
        with ad.using_mode("train"):
            for it in range(start_iter, cfg.iters):
                rng = stream_rng(cfg.seed, _TAG_BATCH, it)
                idx = rng.integers(0, len(scenes), size=cfg.batch)
                batch = []
                for i in idx:
                    scene = scenes[int(i)]
                    window = _pick_patch(scene, cfg.patch, rng)
                    window = augment([window], rng)[0]
                    batch.append(RawImage(plane=window.astype(np.float64),
                                          bayer="RGGB", params=scene.params))
                row = train_step(model, opt, batch, cfg, sampler or SamplerConfig(), it)
                last = it == cfg.iters - 1
                if it % cfg.log_every == 0 or last:
                    history.append(row)
                    if writer:
                        writer.writerow({k: row[k] for k in CSV_FIELDS})
                    if log:
                        log(row)
                if checkpoint_dir and cfg.checkpoint_every and (
                        (it + 1) % cfg.checkpoint_every == 0 and not last):
                    os.makedirs(checkpoint_dir, exist_ok=True)
                    dataio.save_model(os.path.join(checkpoint_dir, f"ckpt_{it + 1:06d}"),
                                      model, iteration=it + 1,
                                      opt_state=opt.state_dict())
    finally:
        if fh:
            fh.close()
    if weights_path:
        dataio.save_model(weights_path, model, iteration=cfg.iters,
                          opt_state=opt.state_dict())
    return history


# ------------------------------------------------------------------ evaluate

def evaluate_models(models: dict, scenes: list, gain: float,
                    tone_strengths=(0.0,), seed: int = 0) -> list:
    """Paired evaluation at a fixed noise level across render strengths.

    models maps a label to a DualModel, or to None for the no-denoising
    baseline (the noisy mosaic rendered as-is).  Every entry sees the same
    noisy realization per scene.  Returns one aggregate row per
    (label, tone_strength) with mean PSNR/SSIM over scenes.
    """
    if gain <= 0:
        raise ParameterError(f"gain must be positive, got {gain}")
    nparams = NoiseParams(gain=gain, read_var=rawnoise.expected_read_var(gain))
    acc = {(label, a): [] for label in models for a in tone_strengths}
    with ad.using_mode("train"), ad.pause_recording():
        for s, scene in enumerate(scenes):
            rng = stream_rng(seed, _TAG_EVAL, s)
            noisy = rawnoise.synthesize_noise(scene, nparams, rng)
            for alpha in tone_strengths:
                p = replace(scene.params, tone_strength=float(alpha))
                target = isp_mod.run_isp(scene, p).data[0]
                for label, model in models.items():
                    if model is None:
                        out = isp_mod.run_isp(noisy, p).data[0]
                    else:
                        out = forward_dual(model, noisy.plane, nparams, p)[1].data[0]
                    acc[(label, alpha)].append(
                        (psnr(out, target), ssim(out, target)))
    rows = []
    for (label, alpha), pairs in acc.items():
        report = MetricReport(
            psnr_db=float(np.mean([q[0] for q in pairs])),
            ssim=float(np.mean([q[1] for q in pairs])),
            count=len(pairs))
        rows.append({"config": label, "gain": gain, "tone_strength": float(alpha),
                     **report.as_row()})
    return rows


def write_eval_csv(rows: list, path: str) -> str:
    fields = ("config", "gain", "tone_strength", "psnr_db", "ssim", "count")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in fields})
    return path

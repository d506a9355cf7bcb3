"""Denoising networks and the dual-domain pipeline assembly.

Two small residual conv nets: one on the packed 4-channel raw stack before
the ISP, one on rendered sRGB after it.  Each starts with a noise-map
fusion block, runs a few conv+activation blocks, and ends in a
zero-initialized head plus a long skip from the input, so a freshly built
pipeline is exactly the identity around the ISP.

The fusion block concatenates image and noise map, derives a switching
gate from a 3x3 conv squashed by a sigmoid, and scales a 1x1 input
projection by (1 + centered gate).  The gate conv is zero-initialized, so
the switch starts open at exactly 1 and the block passes the projection
through untouched; a saturated sigmoid doubles the projection.  This is
how the per-pixel noise level modulates feature strength.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import isp as isp_mod
from . import rawnoise
from .errors import DimensionError, ParameterError

ACTIVATIONS = ("relu", "leaky")
PIPELINE_MODES = ("dual", "raw_only", "srgb_only")
FUSION_KINDS = ("gated", "concat")
NOISE_MAP_FORMS = ("std", "variance", "normalized", "none")


@dataclass(frozen=True)
class NetConfig:
    """Size and nonlinearity of one denoiser."""

    depth: int = 3
    width: int = 16
    kernel: int = 3
    activation: str = "leaky"

    def __post_init__(self):
        if self.depth < 1 or self.width < 1:
            raise ParameterError(f"depth and width must be >= 1, got {self.depth}, {self.width}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ParameterError(f"kernel must be odd and >= 1, got {self.kernel}")
        if self.activation not in ACTIVATIONS:
            raise ParameterError(
                f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}"
            )

    def to_dict(self) -> dict:
        return {"depth": self.depth, "width": self.width,
                "kernel": self.kernel, "activation": self.activation}

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(depth=int(d["depth"]), width=int(d["width"]),
                   kernel=int(d["kernel"]), activation=d["activation"])


@dataclass(frozen=True)
class PipelineConfig:
    """Which nets run and how the noise map is built and carried."""

    mode: str = "dual"
    noise_map_form: str = "std"
    map_mode: str = "signal_path"
    fusion: str = "gated"

    def __post_init__(self):
        if self.mode not in PIPELINE_MODES:
            raise ParameterError(f"unknown pipeline mode {self.mode!r}")
        if self.noise_map_form not in NOISE_MAP_FORMS:
            raise ParameterError(f"unknown noise map form {self.noise_map_form!r}")
        if self.map_mode not in isp_mod.MAP_MODES:
            raise ParameterError(f"unknown map mode {self.map_mode!r}")
        if self.fusion not in FUSION_KINDS:
            raise ParameterError(f"unknown fusion kind {self.fusion!r}")

    @property
    def uses_noise_map(self) -> bool:
        return self.noise_map_form != "none"

    def to_dict(self) -> dict:
        return {"mode": self.mode, "noise_map_form": self.noise_map_form,
                "map_mode": self.map_mode, "fusion": self.fusion}

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        return cls(mode=d["mode"], noise_map_form=d["noise_map_form"],
                   map_mode=d["map_mode"], fusion=d["fusion"])


class ConvLayer:
    """One conv with bias; owns its parameter tensors."""

    def __init__(self, name: str, in_ch: int, out_ch: int, kernel: int,
                 rng: np.random.Generator, init: str, dtype):
        if init == "zero":
            w = np.zeros((out_ch, in_ch, kernel, kernel))
        elif init == "he":
            std = np.sqrt(2.0 / (in_ch * kernel * kernel))
            w = rng.normal(0.0, std, size=(out_ch, in_ch, kernel, kernel))
        else:
            raise ParameterError(f"unknown init {init!r}")
        self.name = name
        self.w = ad.param(w.astype(dtype))
        self.b = ad.param(np.zeros(out_ch, dtype=dtype))

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        return ad.conv2d(x, self.w, self.b)

    def parameters(self):
        yield self.name + ".w", self.w
        yield self.name + ".b", self.b


class FusionBlock:
    """Noise-map fusion at a denoiser's entry."""

    def __init__(self, name: str, in_ch: int, map_ch: int, width: int, kernel: int,
                 rng: np.random.Generator, fusion: str, use_map: bool, dtype):
        self.use_map = use_map
        self.fusion = fusion
        self.layers = []
        if not use_map:
            self.entry = ConvLayer(name + ".entry", in_ch, width, kernel, rng, "he", dtype)
            self.layers = [self.entry]
        elif fusion == "concat":
            self.entry = ConvLayer(name + ".entry", in_ch + map_ch, width, kernel, rng, "he", dtype)
            self.layers = [self.entry]
        else:
            self.proj = ConvLayer(name + ".proj", in_ch, width, 1, rng, "he", dtype)
            self.gate = ConvLayer(name + ".gate", in_ch + map_ch, width, kernel, rng, "zero", dtype)
            self.layers = [self.proj, self.gate]

    def fuse(self, x: ad.Tensor, nmap: ad.Tensor | None) -> ad.Tensor:
        if not self.use_map:
            return self.entry(x)
        if nmap is None:
            raise ParameterError("fusion block configured for a noise map but none was given")
        stack = ad.concat([x, nmap], axis=1)
        if self.fusion == "concat":
            return self.entry(stack)
        switch = ad.mul(ad.sigmoid(self.gate(stack)), 2.0)  # centered: zero logits pass 1.0
        return ad.mul(self.proj(x), switch)

    def parameters(self):
        for layer in self.layers:
            yield from layer.parameters()


def nfb_fuse(block: FusionBlock, x: ad.Tensor, nmap: ad.Tensor | None) -> ad.Tensor:
    return block.fuse(x, nmap)


class Denoiser:
    """Residual conv denoiser with fusion entry and zero-initialized head."""

    def __init__(self, name: str, channels: int, cfg: NetConfig, pipeline: PipelineConfig,
                 rng: np.random.Generator, clamp_output: bool, dtype):
        self.name = name
        self.channels = channels
        self.cfg = cfg
        self.clamp_output = clamp_output
        self.fusion = FusionBlock(name + ".fuse", channels, channels, cfg.width, cfg.kernel,
                                  rng, pipeline.fusion, pipeline.uses_noise_map, dtype)
        self.blocks = [
            ConvLayer(f"{name}.block{i}", cfg.width, cfg.width, cfg.kernel, rng, "he", dtype)
            for i in range(cfg.depth)
        ]
        self.head = ConvLayer(name + ".head", cfg.width, channels, cfg.kernel, rng, "zero", dtype)

    def _activate(self, x: ad.Tensor) -> ad.Tensor:
        if self.cfg.activation == "relu":
            return ad.relu(x)
        return ad.leaky_relu(x, 0.2)

    def forward(self, x: ad.Tensor, nmap: ad.Tensor | None) -> ad.Tensor:
        if x.data.ndim != 4 or x.data.shape[1] != self.channels:
            raise DimensionError(
                f"{self.name} expects (N,{self.channels},H,W), got {x.data.shape}")
        feat = self.fusion.fuse(x, nmap)
        for block in self.blocks:
            feat = self._activate(block(feat))
        out = ad.add(self.head(feat), x)  # long skip carries the signal
        if self.clamp_output:
            out = ad.clamp01(out)
        return out

    def parameters(self):
        yield from self.fusion.parameters()
        for block in self.blocks:
            yield from block.parameters()
        yield from self.head.parameters()


class DualModel:
    """The trainable bundle: up to two denoisers plus pipeline wiring."""

    def __init__(self, pipeline: PipelineConfig, raw_cfg: NetConfig, srgb_cfg: NetConfig,
                 seed: int = 0, dtype=None):
        dtype = dtype or ad.default_dtype()
        self.dtype = np.dtype(dtype)
        self.pipeline = pipeline
        self.raw_cfg = raw_cfg
        self.srgb_cfg = srgb_cfg
        self.seed = seed
        rng = rawnoise.stream_rng(seed, 0xD0)
        self.raw_net = None
        self.srgb_net = None
        if pipeline.mode in ("dual", "raw_only"):
            self.raw_net = Denoiser("raw", 4, raw_cfg, pipeline, rng, False, self.dtype)
        if pipeline.mode in ("dual", "srgb_only"):
            self.srgb_net = Denoiser("srgb", 3, srgb_cfg, pipeline, rng, True, self.dtype)

    def parameters(self) -> dict:
        out = {}
        for net in (self.raw_net, self.srgb_net):
            if net is not None:
                for name, t in net.parameters():
                    out[name] = t
        return out

    def zero_grad(self):
        for t in self.parameters().values():
            t.grad = None


def build_model(pipeline: PipelineConfig, raw_cfg: NetConfig, srgb_cfg: NetConfig,
                seed: int = 0, dtype=None) -> DualModel:
    return DualModel(pipeline, raw_cfg, srgb_cfg, seed=seed, dtype=dtype)


def count_parameters(model: DualModel) -> int:
    return int(sum(t.data.size for t in model.parameters().values()))


def parameter_parity_ratio(depth: int, width: int, kernel: int = 3) -> float:
    """Dual nets at a given depth versus one single-domain net at twice the
    depth: the parameter overhead ratio of the halving rule.

    The extra fusion block and head are constant in depth, so the ratio
    approaches 1 as depth grows.
    """
    pipeline = PipelineConfig()
    cfg = NetConfig(depth=depth, width=width, kernel=kernel)
    cfg2 = NetConfig(depth=2 * depth, width=width, kernel=kernel)
    dual = count_parameters(build_model(pipeline, cfg, cfg, seed=0))
    single = count_parameters(
        build_model(PipelineConfig(mode="raw_only"), cfg2, cfg2, seed=0))
    return dual / single


def forward_dual(model: DualModel, noisy_plane: np.ndarray, nparams: rawnoise.NoiseParams,
                 p: isp_mod.IspParams):
    """Run the configured pipeline on one noisy normalized mosaic.

    Returns (denoised_packed_raw or None, srgb_output) as tensors.  The
    noise map is built from the noisy frame itself (the deployment-time
    clean estimate) and carried across domains through the ISP.
    """
    arr = np.asarray(noisy_plane.plane if hasattr(noisy_plane, "plane") else noisy_plane)
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-d mosaic plane, got shape {arr.shape}")
    x = ad.constant(arr.astype(model.dtype, copy=False).reshape(1, 1, *arr.shape))
    packed = ad.pixel_unshuffle(x, 2)

    nmap4 = None
    if model.pipeline.uses_noise_map:
        nmap4 = rawnoise.noise_map_variants(packed, nparams, model.pipeline.noise_map_form)

    if model.raw_net is not None:
        raw_out = model.raw_net.forward(packed, nmap4)
    else:
        raw_out = packed
    mosaic = ad.pixel_shuffle(raw_out, 2)

    want_inter = (model.srgb_net is not None and model.pipeline.uses_noise_map
                  and model.pipeline.map_mode == "linearized")
    if want_inter:
        srgb, inter = isp_mod.run_isp(mosaic, p, want_intermediates=True)
    else:
        srgb = isp_mod.run_isp(mosaic, p)
        inter = None

    if model.srgb_net is not None:
        nmap3 = None
        if model.pipeline.uses_noise_map:
            nmap3 = isp_mod.propagate_noise_map(nmap4, p, model.pipeline.map_mode, inter)
        out = model.srgb_net.forward(srgb, nmap3)
    else:
        out = srgb
    trained_raw = raw_out if model.raw_net is not None else None
    return trained_raw, out

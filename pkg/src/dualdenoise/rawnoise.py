"""Physically modeled raw sensor noise.

The sensor model is Poisson photon shot noise scaled by the overall system
gain plus zero-mean Gaussian read noise:

    noisy = gain * Poisson(clean / gain) + Normal(0, read_var)

so the variance at signal level x is gain * x + read_var.  The square root
of that expression is the per-pixel noise map handed to the denoisers.
Gain / read-noise pairs are drawn jointly: log-gain uniform over the
calibrated range, log read variance linear in log gain plus Gaussian
scatter, mirroring how the two quantities co-vary across real ISO settings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import DimensionError, DomainError, LayoutError, ParameterError
from .isp import IspParams

BAYER_LAYOUTS = ("RGGB", "BGGR", "GRBG", "GBRG")

# mean of the Poisson branch above which the Gaussian approximation is used
_POISSON_NORMAL_CUTOFF = 50.0


def stream_rng(*keys: int) -> np.random.Generator:
    """Counter-based RNG stream keyed by integers.

    Philox is counter-based, so streams derived from distinct key tuples are
    independent and reproducible regardless of evaluation order.
    """
    seq = np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in keys])
    return np.random.Generator(np.random.Philox(seq))


@dataclass(frozen=True)
class NoiseParams:
    """Per-shot sensor noise description.

    gain: overall system gain; photon shot variance per unit of normalized
        signal.  Larger gain means a noisier exposure.
    read_var: variance of the signal-independent Gaussian read noise, in
        normalized signal units squared.
    """

    gain: float
    read_var: float

    def __post_init__(self):
        if not (math.isfinite(self.gain) and self.gain > 0):
            raise ParameterError(f"gain must be finite and positive, got {self.gain}")
        if not (math.isfinite(self.read_var) and self.read_var >= 0):
            raise ParameterError(f"read_var must be finite and non-negative, got {self.read_var}")


@dataclass(frozen=True)
class SamplerConfig:
    """Joint sampling model for (gain, read_var).

    log(read_var) is modeled as log_slope * log(gain) + log_intercept plus
    Gaussian scatter with standard deviation log_scatter (natural logs).
    Defaults are the calibrated smartphone-sensor fit used throughout.
    """

    gain_min: float = 2e-4
    gain_max: float = 2e-2
    log_slope: float = 2.540
    log_intercept: float = 1.218
    log_scatter: float = 0.268

    def __post_init__(self):
        if not (0 < self.gain_min <= self.gain_max):
            raise ParameterError(
                f"need 0 < gain_min <= gain_max, got [{self.gain_min}, {self.gain_max}]"
            )
        if self.log_scatter < 0:
            raise ParameterError(f"log_scatter must be non-negative, got {self.log_scatter}")


@dataclass
class RawImage:
    """A single-plane Bayer mosaic plus the metadata needed to render it.

    ``plane`` holds normalized values, nominally in [0, 1] for clean data.
    Noise synthesis deliberately returns unclamped planes (read noise can
    push below zero); range handling belongs to the ISP entry clamp.
    """

    plane: np.ndarray
    bayer: str
    params: IspParams

    def __post_init__(self):
        self.plane = np.asarray(self.plane)
        if self.plane.ndim != 2:
            raise DimensionError(f"raw plane must be 2-d, got shape {self.plane.shape}")
        if self.bayer not in BAYER_LAYOUTS:
            raise LayoutError(f"unknown Bayer layout {self.bayer!r}")
        if not np.isfinite(self.plane).all():
            raise DomainError("raw plane contains non-finite values")

    @property
    def shape(self):
        return self.plane.shape


def sample_noise_params(cfg: SamplerConfig, seed_or_rng) -> NoiseParams:
    """Draw one (gain, read_var) pair from the joint log-domain model."""
    rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) else stream_rng(seed_or_rng)
    log_gain = rng.uniform(math.log(cfg.gain_min), math.log(cfg.gain_max))
    log_var = cfg.log_slope * log_gain + cfg.log_intercept
    if cfg.log_scatter > 0:
        log_var += cfg.log_scatter * rng.standard_normal()
    return NoiseParams(gain=math.exp(log_gain), read_var=math.exp(log_var))


def expected_read_var(gain: float, cfg: SamplerConfig | None = None) -> float:
    """Scatter-free read variance implied by a gain (the fit line itself)."""
    cfg = cfg or SamplerConfig()
    return math.exp(cfg.log_slope * math.log(gain) + cfg.log_intercept)


def synthesize_noise(clean: RawImage, params: NoiseParams, seed_or_rng) -> RawImage:
    """Corrupt a clean normalized raw plane with shot + read noise.

    Not differentiable and not clamped: the returned plane keeps negative
    excursions from read noise.  Sampling is exact Poisson inversion for
    small means and a rounded Gaussian approximation above the cutoff,
    both driven by the same counter-based stream.
    """
    x = clean.plane
    if np.any(x < 0) or np.any(x > 1):
        raise DomainError("clean plane must lie in [0, 1] before noise synthesis")
    rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) else stream_rng(seed_or_rng)
    lam = x / params.gain
    u = rng.random(x.shape)
    z = rng.standard_normal(x.shape)
    counts = np.empty_like(lam)
    small = lam <= _POISSON_NORMAL_CUTOFF
    if small.any():
        counts[small] = _poisson_inverse_cdf(lam[small], u[small])
    big = ~small
    if big.any():
        approx = np.rint(lam[big] + np.sqrt(lam[big]) * z[big])
        counts[big] = np.maximum(approx, 0.0)
    noisy = params.gain * counts
    if params.read_var > 0:
        noisy = noisy + math.sqrt(params.read_var) * rng.standard_normal(x.shape)
    else:
        rng.standard_normal(x.shape)  # keep the stream layout independent of read_var
    return RawImage(plane=noisy, bayer=clean.bayer, params=clean.params)


def _poisson_inverse_cdf(lam: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Vectorized Poisson sampling by CDF inversion (small means only)."""
    k = np.zeros(lam.shape)
    p = np.exp(-lam)
    cdf = p.copy()
    active = u > cdf
    lam_max = float(lam.max()) if lam.size else 0.0
    cap = int(math.ceil(lam_max + 12.0 * math.sqrt(max(lam_max, 1.0)) + 25.0))
    n = 0
    while active.any():
        n += 1
        if n > cap:
            k[active] = cap
            break
        p = p * (lam / n)
        cdf = cdf + p
        k[active] = n
        active = u > cdf
    return k


def noise_map(est_clean, params: NoiseParams) -> ad.Tensor:
    """Per-pixel noise standard deviation sqrt(gain * x + read_var).

    Differentiable in ``est_clean``; the estimate is clamped below at zero
    before the square root so negative excursions cannot break the domain.
    In deployment the noisy frame itself stands in for the clean estimate.
    """
    x = est_clean if isinstance(est_clean, ad.Tensor) else ad.constant(est_clean)
    return ad.sqrt(ad.add(ad.mul(ad.relu(x), params.gain), params.read_var))


_NOISE_MAP_FORMS = ("std", "variance", "normalized")


def noise_map_variants(est_clean, params: NoiseParams, form: str = "std") -> ad.Tensor:
    """The noise map in one of three forms: std, variance, or std scaled by
    its per-image maximum (all-zero maps pass through unscaled)."""
    if form not in _NOISE_MAP_FORMS:
        raise ParameterError(f"unknown noise map form {form!r}; expected one of {_NOISE_MAP_FORMS}")
    x = est_clean if isinstance(est_clean, ad.Tensor) else ad.constant(est_clean)
    if form == "variance":
        return ad.add(ad.mul(ad.relu(x), params.gain), params.read_var)
    std = noise_map(x, params)
    if form == "std":
        return std
    peak = float(np.max(std.data))  # normalization scale held constant
    if peak == 0.0:
        return std
    return ad.div(std, peak)


def pack_bayer(raw: RawImage) -> ad.Tensor:
    """Fold an RGGB mosaic into a 1x4x(H/2)x(W/2) stack.

    Channel order is the row-major site order: R, G (red row), G (blue
    row), B.  Layouts other than RGGB must be phase-snapped first.
    """
    if raw.bayer != "RGGB":
        raise LayoutError(f"pack_bayer requires RGGB input, got {raw.bayer}")
    h, w = raw.plane.shape
    if h % 2 or w % 2:
        raise DimensionError(f"mosaic size {h}x{w} must be even in both axes")
    t = ad.constant(raw.plane.reshape(1, 1, h, w))
    return ad.pixel_unshuffle(t, 2)


def unpack_bayer(packed) -> np.ndarray:
    """Inverse of pack_bayer; returns the H x W mosaic plane."""
    arr = packed.data if isinstance(packed, ad.Tensor) else np.asarray(packed)
    if arr.ndim != 4 or arr.shape[0] != 1 or arr.shape[1] != 4:
        raise DimensionError(f"expected packed shape (1, 4, h, w), got {arr.shape}")
    t = ad.pixel_shuffle(ad.constant(arr), 2)
    return t.data[0, 0]

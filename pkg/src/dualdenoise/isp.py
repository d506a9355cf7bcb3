"""A small differentiable camera ISP.

Fixed stage order, every stage built from tape ops so gradients flow from
rendered sRGB all the way back to the raw mosaic:

    entry clamp -> white balance (on the packed 4-channel stack)
    -> demosaic -> color matrix -> global tone map -> display gamma -> clamp

Demosaicing is linear interpolation (per-site convolution kernels) with
reflective border padding; odd reflection preserves Bayer phase.  The tone
map is n applications of x + s * x * (1 - x), a smooth shoulder curve that
fixes 0 and 1.  Gamma is the standard piecewise display encoding with a
linear toe below 0.0031308.

The noise map accompanying an image can be pushed through the same chain in
two ways: re-using the signal path verbatim (default), or first-order
uncertainty propagation that multiplies by local slopes of the nonlinear
stages and absolute color-matrix rows.

Inference-only extras (never part of training graphs): unsharp masking and
a local contrast equalizer, both plain numpy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import DimensionError, LayoutError, ParameterError

GAMMA_KNEE = 0.0031308
GAMMA_EXP = 1.0 / 2.4
TONE_STEPS = 2

DEMOSAIC_KINDS = ("bilinear", "gradient_corrected")

_DEFAULT_CCM = (
    (1.66, -0.44, -0.22),
    (-0.30, 1.52, -0.22),
    (-0.14, -0.38, 1.52),
)


@dataclass
class IspParams:
    """Everything the render chain needs for one sensor/look combination."""

    black_level: float = 64.0
    white_level: float = 1023.0
    wb_gains: tuple = (2.0, 1.0, 1.7)  # (R, G, B) channel gains
    ccm: tuple = _DEFAULT_CCM  # 3x3, rows sum to 1
    tone_strength: float = 0.0  # shoulder strength in [0, 1]
    demosaic_kind: str = "bilinear"

    def __post_init__(self):
        self.wb_gains = tuple(float(g) for g in self.wb_gains)
        self.ccm = tuple(tuple(float(v) for v in row) for row in self.ccm)
        self.validate()

    def validate(self):
        if not (0 <= self.black_level < self.white_level):
            raise ParameterError(
                f"need 0 <= black_level < white_level, got {self.black_level}, {self.white_level}"
            )
        if len(self.wb_gains) != 3 or any(g <= 0 for g in self.wb_gains):
            raise ParameterError(f"wb_gains must be 3 positive values, got {self.wb_gains}")
        m = np.asarray(self.ccm, dtype=np.float64)
        if m.shape != (3, 3):
            raise ParameterError(f"ccm must be 3x3, got shape {m.shape}")
        if np.max(np.abs(m.sum(axis=1) - 1.0)) > 1e-6:
            raise ParameterError("ccm rows must each sum to 1 (white preserving)")
        if not (0.0 <= self.tone_strength <= 1.0):
            raise ParameterError(f"tone_strength must be in [0, 1], got {self.tone_strength}")
        if self.demosaic_kind not in DEMOSAIC_KINDS:
            raise ParameterError(
                f"unknown demosaic kind {self.demosaic_kind!r}; expected one of {DEMOSAIC_KINDS}"
            )

    def ccm_array(self) -> np.ndarray:
        return np.asarray(self.ccm, dtype=np.float64)

    def to_dict(self) -> dict:
        return {
            "black_level": self.black_level,
            "white_level": self.white_level,
            "wb_gains": list(self.wb_gains),
            "ccm": [list(r) for r in self.ccm],
            "tone_strength": self.tone_strength,
            "demosaic_kind": self.demosaic_kind,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IspParams":
        return cls(
            black_level=float(d["black_level"]),
            white_level=float(d["white_level"]),
            wb_gains=tuple(d["wb_gains"]),
            ccm=tuple(tuple(r) for r in d["ccm"]),
            tone_strength=float(d.get("tone_strength", 0.0)),
            demosaic_kind=d.get("demosaic_kind", "bilinear"),
        )


def _as_nchw(x, channels: int | None = None) -> ad.Tensor:
    t = x if isinstance(x, ad.Tensor) else ad.constant(np.asarray(x))
    if t.data.ndim == 2:
        t = ad.Tensor(t.data.reshape(1, 1, *t.data.shape), requires_grad=False) if not isinstance(x, ad.Tensor) else _reshape_view(t)
    if t.data.ndim != 4:
        raise DimensionError(f"expected 2-d plane or NCHW tensor, got shape {t.data.shape}")
    if channels is not None and t.data.shape[1] != channels:
        raise DimensionError(f"expected {channels} channels, got {t.data.shape[1]}")
    return t


def _reshape_view(t: ad.Tensor) -> ad.Tensor:
    # 2-d Tensors only appear as constants on data paths; reshaping a
    # grad-requiring tensor here would detach it, so refuse.
    if t.requires_grad:
        raise DimensionError("pass grad-requiring tensors as NCHW, not bare planes")
    return ad.constant(t.data.reshape(1, 1, *t.data.shape))


# ---------------------------------------------------------------------------
# Stages


def normalize_black_white(raw_dn, p: IspParams) -> ad.Tensor:
    """Digital numbers to normalized [0, 1]: subtract black, scale, clamp."""
    t = raw_dn if isinstance(raw_dn, ad.Tensor) else ad.constant(np.asarray(raw_dn, dtype=np.float64))
    span = p.white_level - p.black_level
    return ad.clamp01(ad.div(ad.sub(t, p.black_level), span))


def white_balance(packed, p: IspParams) -> ad.Tensor:
    """Channel gains on the packed (R, Gr, Gb, B) stack, then clamp."""
    t = _as_nchw(packed, 4)
    r, g, b = p.wb_gains
    gains = np.array([r, g, g, b], dtype=t.data.dtype).reshape(1, 4, 1, 1)
    return ad.clamp01(ad.mul(t, ad.constant(gains)))


def _bayer_site_masks(h: int, w: int, origin: int, dtype) -> dict:
    """Binary site masks for an RGGB mosaic whose (0,0) site sits at index
    ``origin`` of the padded grid (odd reflection shifts phase by pad)."""
    yy = (np.arange(h) + origin) % 2
    xx = (np.arange(w) + origin) % 2
    even_row = (yy == 0)[:, None]
    even_col = (xx == 0)[None, :]
    m = {
        "r": even_row & even_col,
        "g_rrow": even_row & ~even_col,
        "g_brow": ~even_row & even_col,
        "b": ~even_row & ~even_col,
    }
    return {k: v.astype(dtype).reshape(1, 1, h, w) for k, v in m.items()}


_BILINEAR_CROSS = np.array(
    [[0, 1, 0], [1, 4, 1], [0, 1, 0]], dtype=np.float64) / 4.0
_BILINEAR_CORNER = np.array(
    [[1, 2, 1], [2, 4, 2], [1, 2, 1]], dtype=np.float64) / 4.0

# 5x5 gradient-corrected interpolation kernels (all divide by 8):
# green at a red/blue site; same-color neighbors in-row; in-column; diagonal.
_GC_GREEN = np.array([
    [0, 0, -1, 0, 0],
    [0, 0, 2, 0, 0],
    [-1, 2, 4, 2, -1],
    [0, 0, 2, 0, 0],
    [0, 0, -1, 0, 0]], dtype=np.float64) / 8.0
_GC_ROW = np.array([
    [0, 0, 0.5, 0, 0],
    [0, -1, 0, -1, 0],
    [-1, 4, 5, 4, -1],
    [0, -1, 0, -1, 0],
    [0, 0, 0.5, 0, 0]], dtype=np.float64) / 8.0
_GC_COL = _GC_ROW.T.copy()
_GC_DIAG = np.array([
    [0, 0, -1.5, 0, 0],
    [0, 2, 0, 2, 0],
    [-1.5, 0, 6, 0, -1.5],
    [0, 2, 0, 2, 0],
    [0, 0, -1.5, 0, 0]], dtype=np.float64) / 8.0

# every kernel above sums to 1, so each is equivalently center + a weighted
# sum of (neighbor - center) differences; that difference form is what the
# implementation evaluates, making constant regions reproduce bit-exactly
_GC_OFFSETS = tuple(
    (i, j) for i in range(5) for j in range(5)
    if (i, j) != (2, 2) and any(k[i, j] for k in (_GC_GREEN, _GC_ROW, _GC_COL, _GC_DIAG)))
_GC_CORR = np.array([[k[i, j] for (i, j) in _GC_OFFSETS]
                     for k in (_GC_GREEN, _GC_ROW, _GC_COL, _GC_DIAG)])


def demosaic(mosaic, p: IspParams) -> ad.Tensor:
    """Interpolate an RGGB mosaic (N,1,H,W) to full RGB (N,3,H,W).

    Both kinds are linear in the input, so gradients are exact.  Reflective
    padding keeps borders usable on small training patches.
    """
    t = _as_nchw(mosaic, 1)
    if t.data.shape[2] % 2 or t.data.shape[3] % 2:
        raise DimensionError(
            f"mosaic spatial size {t.data.shape[2:]} must be even to hold full"
            " Bayer quads")
    if p.demosaic_kind == "bilinear":
        return _demosaic_bilinear(t)
    return _demosaic_gradient_corrected(t)


def _demosaic_bilinear(t: ad.Tensor) -> ad.Tensor:
    n, _, h, w = t.data.shape
    pad = 1
    xp = ad.pad_reflect(t, pad)
    masks = _bayer_site_masks(h + 2 * pad, w + 2 * pad, pad, t.data.dtype)
    mg = masks["g_rrow"] + masks["g_brow"]
    planes = ad.concat(
        [
            ad.mul(xp, ad.constant(masks["r"])),
            ad.mul(xp, ad.constant(mg)),
            ad.mul(xp, ad.constant(masks["b"])),
        ],
        axis=1,
    )
    weight = np.zeros((3, 3, 3, 3), dtype=t.data.dtype)
    weight[0, 0] = _BILINEAR_CORNER
    weight[1, 1] = _BILINEAR_CROSS
    weight[2, 2] = _BILINEAR_CORNER
    return ad.conv2d(planes, ad.constant(weight), pad=0)


def _demosaic_gradient_corrected(t: ad.Tensor) -> ad.Tensor:
    n, _, h, w = t.data.shape
    pad = 2
    xp = ad.pad_reflect(t, pad)
    diffs = [ad.sub(ad.narrow(ad.narrow(xp, 2, i, h), 3, j, w), t)
             for (i, j) in _GC_OFFSETS]
    stack = ad.concat(diffs, axis=1)
    wmat = _GC_CORR.astype(t.data.dtype).reshape(4, len(_GC_OFFSETS), 1, 1)
    corr = ad.conv2d(stack, ad.constant(wmat), pad=0)
    pg = ad.add(t, ad.narrow(corr, 1, 0, 1))
    prow = ad.add(t, ad.narrow(corr, 1, 1, 1))
    pcol = ad.add(t, ad.narrow(corr, 1, 2, 1))
    pdiag = ad.add(t, ad.narrow(corr, 1, 3, 1))
    m = {k: ad.constant(v) for k, v in _bayer_site_masks(h, w, 0, t.data.dtype).items()}
    red = ad.add(
        ad.add(ad.mul(m["r"], t), ad.mul(m["g_rrow"], prow)),
        ad.add(ad.mul(m["g_brow"], pcol), ad.mul(m["b"], pdiag)),
    )
    green = ad.add(
        ad.mul(ad.add(m["r"], m["b"]), pg),
        ad.mul(ad.add(m["g_rrow"], m["g_brow"]), t),
    )
    blue = ad.add(
        ad.add(ad.mul(m["b"], t), ad.mul(m["g_brow"], prow)),
        ad.add(ad.mul(m["g_rrow"], pcol), ad.mul(m["r"], pdiag)),
    )
    return ad.concat([red, green, blue], axis=1)


def color_correct(rgb, p: IspParams) -> ad.Tensor:
    """Per-pixel 3x3 color matrix (a 1x1 convolution), then clamp."""
    t = _as_nchw(rgb, 3)
    weight = p.ccm_array().astype(t.data.dtype).reshape(3, 3, 1, 1)
    return ad.clamp01(ad.conv2d(t, ad.constant(weight), pad=0))


def global_tonemap(rgb, strength, n_steps: int = TONE_STEPS) -> ad.Tensor:
    """n smooth shoulder steps x <- x + s * x * (1 - x).

    Monotone and concave on [0, 1] for s in [0, 1], fixing both endpoints;
    s = 0 is the identity.  Differentiable in the image and in s.
    """
    x = rgb if isinstance(rgb, ad.Tensor) else ad.constant(np.asarray(rgb))
    if isinstance(strength, ad.Tensor):
        s = strength
    else:
        if not (0.0 <= float(strength) <= 1.0):
            raise ParameterError(f"tone strength must be in [0, 1], got {strength}")
        # scalar constants follow the image dtype so float32 runs stay float32
        s = ad.constant(np.asarray(float(strength), dtype=x.data.dtype))
    for _ in range(n_steps):
        x = ad.add(x, ad.mul(s, ad.mul(x, ad.sub(1.0, x))))
    return x


def tone_curve(x: np.ndarray, strength: float, n_steps: int = TONE_STEPS) -> np.ndarray:
    """Numpy twin of global_tonemap for analysis and oracles."""
    y = np.asarray(x, dtype=np.float64).copy()
    for _ in range(n_steps):
        y = y + strength * y * (1.0 - y)
    return y


def tone_slope(x: np.ndarray, strength: float, n_steps: int = TONE_STEPS) -> np.ndarray:
    """Derivative of the composed tone curve at x (product of step slopes)."""
    xi = np.asarray(x, dtype=np.float64).copy()
    slope = np.ones_like(xi)
    for _ in range(n_steps):
        slope = slope * (1.0 + strength * (1.0 - 2.0 * xi))
        xi = xi + strength * xi * (1.0 - xi)
    return slope


def gamma_encode(rgb) -> ad.Tensor:
    """Piecewise display encoding: 12.92x below the knee, else a 1/2.4 power."""
    x = rgb if isinstance(rgb, ad.Tensor) else ad.constant(np.asarray(rgb))
    linear_side = x.data <= GAMMA_KNEE
    mask = ad.constant(linear_side.astype(x.data.dtype))
    inv_mask = ad.constant((~linear_side).astype(x.data.dtype))
    lin = ad.mul(x, 12.92)
    # max() pins the power branch input away from zero where it is unused
    z = ad.maximum(x, GAMMA_KNEE)
    powb = ad.sub(ad.mul(ad.power(z, GAMMA_EXP), 1.055), 0.055)
    return ad.add(ad.mul(mask, lin), ad.mul(inv_mask, powb))


def gamma_slope(u: np.ndarray) -> np.ndarray:
    """Derivative of the display encoding at linear value u >= 0."""
    u = np.asarray(u, dtype=np.float64)
    power = (1.055 * GAMMA_EXP) * np.power(np.maximum(u, GAMMA_KNEE), GAMMA_EXP - 1.0)
    return np.where(u <= GAMMA_KNEE, 12.92, power)


# ---------------------------------------------------------------------------
# Full chain


def run_isp(raw, p: IspParams, want_intermediates: bool = False):
    """Render a normalized RGGB mosaic to display sRGB.

    Accepts a RawImage, a 2-d plane, or an NCHW tensor with one channel.
    The entry clamp realizes the black/white handling for already
    normalized data (unclamped denoiser output included); loaders apply
    normalize_black_white before constructing RawImage planes.
    """
    plane = raw
    if hasattr(raw, "plane") and hasattr(raw, "bayer"):
        if raw.bayer != "RGGB":
            raise LayoutError(f"run_isp requires RGGB input, got {raw.bayer}")
        plane = raw.plane
    t = _as_nchw(plane, 1)
    if t.data.shape[2] % 2 or t.data.shape[3] % 2:
        raise DimensionError(f"mosaic spatial size {t.data.shape[2:]} must be even")
    x = ad.clamp01(t)
    packed = ad.pixel_unshuffle(x, 2)
    balanced = white_balance(packed, p)
    mosaic = ad.pixel_shuffle(balanced, 2)
    rgb = demosaic(mosaic, p)
    corrected = color_correct(rgb, p)
    toned = global_tonemap(corrected, p.tone_strength)
    srgb = ad.clamp01(gamma_encode(toned))
    if want_intermediates:
        return srgb, {"pre_tone": corrected.data.copy(), "post_tone": toned.data.copy()}
    return srgb


MAP_MODES = ("signal_path", "linearized")


def propagate_noise_map(nmap_packed, p: IspParams, mode: str = "signal_path",
                        intermediates: dict | None = None) -> ad.Tensor:
    """Carry a packed raw-domain noise map into the sRGB domain.

    signal_path: run the map through the rendering stages exactly like an
    image.  linearized: scale by white-balance gains, interpolate with the
    demosaic kernels, mix by absolute color-matrix rows, then multiply by
    the local slopes of the tone curve and gamma evaluated at the image
    values recorded by run_isp (pass its intermediates).
    """
    if mode not in MAP_MODES:
        raise ParameterError(f"unknown map mode {mode!r}; expected one of {MAP_MODES}")
    t = _as_nchw(nmap_packed, 4)
    if mode == "signal_path":
        balanced = white_balance(t, p)
        mosaic = ad.pixel_shuffle(balanced, 2)
        rgb = demosaic(mosaic, p)
        mixed = color_correct(rgb, p)
        toned = global_tonemap(mixed, p.tone_strength)
        return ad.clamp01(gamma_encode(toned))

    if intermediates is None:
        raise ParameterError("linearized map propagation needs run_isp intermediates")
    r, g, b = p.wb_gains
    gains = np.array([r, g, g, b], dtype=t.data.dtype).reshape(1, 4, 1, 1)
    scaled = ad.mul(t, ad.constant(gains))
    mosaic = ad.pixel_shuffle(scaled, 2)
    interp = demosaic(mosaic, p)
    mix = np.abs(p.ccm_array()).astype(t.data.dtype).reshape(3, 3, 1, 1)
    mixed = ad.conv2d(interp, ad.constant(mix), pad=0)
    slope = tone_slope(intermediates["pre_tone"], p.tone_strength) * gamma_slope(
        intermediates["post_tone"])
    return ad.mul(mixed, ad.constant(np.abs(slope).astype(t.data.dtype)))


# ---------------------------------------------------------------------------
# Inference-only post-processing (plain numpy, intentionally off-tape)


def _gaussian_kernel1d(radius: int) -> np.ndarray:
    sigma = float(radius)
    half = 2 * radius
    xs = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def _blur_reflect(img: np.ndarray, radius: int) -> np.ndarray:
    """Separable Gaussian blur with reflective borders on the last two axes."""
    k = _gaussian_kernel1d(radius)
    half = 2 * radius
    padded = np.pad(img, [(0, 0)] * (img.ndim - 2) + [(half, half), (half, half)], mode="reflect")
    out = np.apply_along_axis(lambda r: np.convolve(r, k, mode="valid"), -1, padded)
    out = np.apply_along_axis(lambda c: np.convolve(c, k, mode="valid"), -2, out)
    return out


def sharpen(srgb: np.ndarray, amount: float = 0.5, radius: int = 2) -> np.ndarray:
    """Unsharp mask: img + amount * (img - blur(img)), clipped to [0, 1].

    The effective impulse response sums to one, so flat regions are fixed
    points.  Not differentiable by design; inference only.
    """
    if amount < 0 or radius < 1:
        raise ParameterError(f"need amount >= 0 and radius >= 1, got {amount}, {radius}")
    img = np.asarray(srgb, dtype=np.float64)
    blur = _blur_reflect(img, radius)
    return np.clip(img + amount * (img - blur), 0.0, 1.0)


LUMA_WEIGHTS = np.array([0.2126, 0.7152, 0.0722])


def clahe_local_tm(srgb: np.ndarray, clip: float = 2.0, tiles: int = 8) -> np.ndarray:
    """Contrast-limited local histogram equalization on the luminance channel.

    The image is divided into tiles x tiles regions; each builds a clipped,
    renormalized histogram mapping, and every pixel blends the mappings of
    its four surrounding tile centers bilinearly.  Chroma is preserved by
    scaling RGB with the luminance ratio.  Inference only.
    """
    if clip <= 0 or tiles < 1:
        raise ParameterError(f"need clip > 0 and tiles >= 1, got {clip}, {tiles}")
    img = np.asarray(srgb, dtype=np.float64)
    squeeze = False
    if img.ndim == 3:
        img = img[None]
        squeeze = True
    if img.ndim != 4 or img.shape[1] != 3:
        raise DimensionError(f"expected (3,H,W) or (N,3,H,W) sRGB input, got {srgb.shape}")
    if tiles > min(img.shape[2], img.shape[3]):
        raise ParameterError(
            f"{tiles}x{tiles} tiles do not fit a {img.shape[2]}x{img.shape[3]} image")
    out = np.stack([_clahe_one(frame, clip, tiles) for frame in img])
    return out[0] if squeeze else out


def _clahe_one(img: np.ndarray, clip: float, tiles: int) -> np.ndarray:
    _, h, w = img.shape
    bins = 256
    luma = np.tensordot(LUMA_WEIGHTS, img, axes=([0], [0]))
    luma = np.clip(luma, 0.0, 1.0)
    pos = np.minimum(luma * bins, bins - 1e-9)
    idx = pos.astype(np.int64)
    frac = pos - idx

    ys = np.linspace(0, h, tiles + 1).astype(np.int64)
    xs = np.linspace(0, w, tiles + 1).astype(np.int64)
    # per-tile transform stored as exclusive cdf + pmf so values map through
    # a piecewise-linear CDF (no quantization to bin centers)
    lo = np.empty((tiles, tiles, bins))
    pmf = np.empty((tiles, tiles, bins))
    centers_y = np.empty(tiles)
    centers_x = np.empty(tiles)
    for i in range(tiles):
        for j in range(tiles):
            ti = idx[ys[i]:ys[i + 1], xs[j]:xs[j + 1]]
            lo[i, j], pmf[i, j] = _clipped_cdf_parts(ti, bins, clip)
            centers_y[i] = 0.5 * (ys[i] + ys[i + 1])
            centers_x[j] = 0.5 * (xs[j] + xs[j + 1])

    fy = np.interp(np.arange(h) + 0.5, centers_y, np.arange(tiles, dtype=np.float64))
    fx = np.interp(np.arange(w) + 0.5, centers_x, np.arange(tiles, dtype=np.float64))
    y0 = np.floor(fy).astype(np.int64)
    x0 = np.floor(fx).astype(np.int64)
    y1 = np.minimum(y0 + 1, tiles - 1)
    x1 = np.minimum(x0 + 1, tiles - 1)
    wy = (fy - y0)[:, None]
    wx = (fx - x0)[None, :]

    Y0 = y0[:, None]
    Y1 = y1[:, None]
    X0 = x0[None, :]
    X1 = x1[None, :]

    def sample(gy, gx):
        return lo[gy, gx, idx] + frac * pmf[gy, gx, idx]

    eq = ((1 - wy) * (1 - wx) * sample(Y0, X0)
          + (1 - wy) * wx * sample(Y0, X1)
          + wy * (1 - wx) * sample(Y1, X0)
          + wy * wx * sample(Y1, X1))

    ratio = np.where(luma > 1e-8, eq / np.maximum(luma, 1e-8), 1.0)
    return np.clip(img * ratio[None], 0.0, 1.0)


def _clipped_cdf_parts(bin_idx: np.ndarray, bins: int, clip: float):
    """Clipped-histogram CDF as (exclusive cumulative, per-bin mass).

    A tile with no luminance spread has nothing to equalize; it gets the
    identity ramp, which makes constant images exact fixed points.
    """
    if bin_idx.size == 0 or bin_idx.max() == bin_idx.min():
        ramp = np.arange(bins, dtype=np.float64) / bins
        return ramp, np.full(bins, 1.0 / bins)
    hist = np.bincount(bin_idx.ravel(), minlength=bins).astype(np.float64)
    limit = clip * bin_idx.size / bins
    excess = np.sum(np.maximum(hist - limit, 0.0))
    hist = np.minimum(hist, limit) + excess / bins
    hist /= hist.sum()
    cdf = np.cumsum(hist)
    return cdf - hist, hist

"""File formats and dataset synthesis.

Two on-disk containers, both a raw binary plus a JSON sidecar so nothing
depends on pickle:

  raw frames    <stem>.rawbin  uint16 little-endian, C-order, one mosaic
                <stem>.json    width/height/bayer plus sensor calibration
  model weights <stem>.wbin    float32 little-endian, parameters tiled
                               back to back in declaration order
                <stem>.json    name/shape/offset table, configs, iteration,
                               optional optimizer moments for exact resume

Offsets are in float32 elements and must tile the buffer exactly; loaders
reject gaps, overlaps, or trailing bytes rather than guessing.
"""

from __future__ import annotations

import json
import os

import numpy as np

from . import isp as isp_mod
from .errors import (BoundsError, DimensionError, FormatError, LayoutError,
                     ParameterError)
from .nets import DualModel, NetConfig, PipelineConfig, build_model
from .rawnoise import BAYER_LAYOUTS, RawImage, stream_rng

SCHEMA_VERSION = 1

_SIDECAR_KEYS = ("schema_version", "width", "height", "bayer",
                 "black_level", "white_level", "wb_gains", "ccm")


def _stem(path: str, suffix: str) -> str:
    return path[: -len(suffix)] if path.endswith(suffix) else path


def _load_json(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read sidecar {path}: {exc}") from None


# ---------------------------------------------------------------- raw frames

def write_raw_container(path: str, dn: np.ndarray, bayer: str,
                        p: isp_mod.IspParams) -> tuple[str, str]:
    """Store one mosaic of digital numbers plus its calibration sidecar."""
    dn = np.asarray(dn)
    if dn.ndim != 2:
        raise DimensionError(f"expected a 2-d mosaic, got shape {dn.shape}")
    if bayer not in BAYER_LAYOUTS:
        raise LayoutError(f"unknown bayer layout {bayer!r}")
    if dn.min() < 0 or dn.max() > 65535:
        raise FormatError("digital numbers fall outside uint16 range")
    stem = _stem(path, ".rawbin")
    bin_path, json_path = stem + ".rawbin", stem + ".json"
    with open(bin_path, "wb") as fh:
        fh.write(np.ascontiguousarray(dn, dtype="<u2").tobytes())
    sidecar = {
        "schema_version": SCHEMA_VERSION,
        "width": int(dn.shape[1]),
        "height": int(dn.shape[0]),
        "bayer": bayer,
        "black_level": p.black_level,
        "white_level": p.white_level,
        "wb_gains": list(p.wb_gains),
        "ccm": [v for row in p.ccm for v in row],  # 9 values, row-major
    }
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return bin_path, json_path


def read_raw_container(path: str) -> tuple[np.ndarray, str, isp_mod.IspParams]:
    """Load digital numbers, layout, and calibration from a container pair."""
    stem = _stem(path, ".rawbin")
    meta = _load_json(stem + ".json")
    missing = [k for k in _SIDECAR_KEYS if k not in meta]
    if missing:
        raise FormatError(f"sidecar {stem}.json missing fields {missing}")
    if meta["schema_version"] != SCHEMA_VERSION:
        raise FormatError(f"unsupported sidecar schema {meta['schema_version']!r}")
    h, w = int(meta["height"]), int(meta["width"])
    with open(stem + ".rawbin", "rb") as fh:
        buf = fh.read()
    if len(buf) != h * w * 2:
        raise FormatError(
            f"{stem}.rawbin holds {len(buf)} bytes, sidecar promises {h * w * 2}")
    dn = np.frombuffer(buf, dtype="<u2").reshape(h, w)
    flat = [float(c) for c in meta["ccm"]]
    if len(flat) != 9:
        raise FormatError(f"sidecar ccm must hold 9 row-major values, got {len(flat)}")
    p = isp_mod.IspParams(
        black_level=int(meta["black_level"]),
        white_level=int(meta["white_level"]),
        wb_gains=tuple(float(g) for g in meta["wb_gains"]),
        ccm=tuple(tuple(flat[3 * r:3 * r + 3]) for r in range(3)),
    )
    return dn.copy(), str(meta["bayer"]), p


def load_raw_image(path: str) -> RawImage:
    """Read a container and normalize digital numbers to the [0, 1] plane."""
    dn, bayer, p = read_raw_container(path)
    span = float(p.white_level - p.black_level)
    plane = np.clip((dn.astype(np.float64) - p.black_level) / span, 0.0, 1.0)
    return RawImage(plane=plane, bayer=bayer, params=p)


def mosaic_from_rgb(rgb: np.ndarray, p: isp_mod.IspParams,
                    bayer: str = "RGGB") -> np.ndarray:
    """Invert the ISP front end: full-color linear light to sensor DN.

    Applies the inverse color matrix, divides out white-balance gains,
    samples the mosaic at the layout's sites, and quantizes into the
    black..white digital range (round half away from zero).  Values that
    leave [0, 1] after the inverse transforms are clipped; callers keep
    scene content comfortably inside gamut to avoid that.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise DimensionError(f"expected (3,H,W) linear RGB, got {rgb.shape}")
    if bayer not in BAYER_LAYOUTS:
        raise LayoutError(f"unknown bayer layout {bayer!r}")
    h, w = rgb.shape[1:]
    inv = np.linalg.inv(p.ccm_array())
    cam = np.tensordot(inv, rgb, axes=([1], [0]))
    gr, gg, gb = p.wb_gains
    cam[0] /= gr
    cam[1] /= gg
    cam[2] /= gb
    cam = np.clip(cam, 0.0, 1.0)
    chan = {"R": 0, "G": 1, "B": 2}
    plane = np.empty((h, w), dtype=np.float64)
    for idx, letter in enumerate(bayer):
        rows = slice(idx // 2, None, 2)
        cols = slice(idx % 2, None, 2)
        plane[rows, cols] = cam[chan[letter], rows, cols]
    span = p.white_level - p.black_level
    dn = np.floor(p.black_level + plane * span + 0.5)
    return np.clip(dn, 0, 65535).astype(np.uint16)


def crop_rggb(raw: RawImage, x: int, y: int, size: int) -> RawImage:
    """Cut a square window whose top-left lands on a red site.

    (x, y) is (column, row).  Offsets are snapped to the parity that puts
    the layout's red pixel at the window origin, ties toward the smaller
    coordinate, so every crop is a valid RGGB mosaic.
    """
    if size < 2 or size % 2:
        raise DimensionError(f"crop size must be even and >= 2, got {size}")
    r_idx = raw.bayer.index("R")
    need_y, need_x = r_idx // 2, r_idx % 2

    def snap(v: int, parity: int) -> int:
        if v % 2 == parity:
            return v
        return v - 1 if v - 1 >= 0 else v + 1

    sx, sy = snap(int(x), need_x), snap(int(y), need_y)
    h, w = raw.plane.shape
    if sx < 0 or sy < 0 or sx + size > w or sy + size > h:
        raise BoundsError(
            f"crop {size}x{size} at snapped ({sx},{sy}) leaves the {h}x{w} frame")
    window = raw.plane[sy:sy + size, sx:sx + size].copy()
    return RawImage(plane=window, bayer="RGGB", params=raw.params)


# ----------------------------------------------------------------- 8-bit out

def write_png8(path: str, img: np.ndarray) -> str:
    """Quantize [0,1] RGB to 8 bits and write PNG (or raw PPM by extension)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] == 3:
        img = np.moveaxis(img, 0, -1)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise DimensionError(f"expected (3,H,W) or (H,W,3), got {img.shape}")
    u8 = np.clip(np.floor(img * 255.0 + 0.5), 0, 255).astype(np.uint8)
    if path.lower().endswith(".ppm"):
        h, w = u8.shape[:2]
        with open(path, "wb") as fh:
            fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            fh.write(u8.tobytes())
        return path
    from PIL import Image

    Image.fromarray(u8, mode="RGB").save(path, format="PNG")
    return path


def read_png8(path: str) -> np.ndarray:
    """Read an 8-bit RGB image back to float (3,H,W) in [0, 1]."""
    if path.lower().endswith(".ppm"):
        with open(path, "rb") as fh:
            data = fh.read()
        parts = data.split(b"\n", 3)
        if len(parts) < 4 or parts[0] != b"P6" or parts[2] != b"255":
            raise FormatError(f"{path} is not an 8-bit binary PPM")
        w, h = (int(v) for v in parts[1].split())
        u8 = np.frombuffer(parts[3][: h * w * 3], dtype=np.uint8).reshape(h, w, 3)
    else:
        from PIL import Image

        with Image.open(path) as im:
            u8 = np.asarray(im.convert("RGB"))
    return np.moveaxis(u8.astype(np.float64) / 255.0, -1, 0)


# ------------------------------------------------------------ model weights

def save_model(path: str, model: DualModel, iteration: int = 0,
               opt_state: dict | None = None) -> tuple[str, str]:
    """Write a weights bundle; include optimizer moments when given."""
    stem = _stem(path, ".wbin")
    params = model.parameters()
    blobs, entries, offset = [], [], 0  # offsets in bytes
    for name, t in params.items():
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr)
        offset += arr.nbytes

    opt_meta = None
    if opt_state is not None:
        opt_meta = {"step": int(opt_state["step"]), "entries": []}
        for kind in ("m", "v"):
            for name in params:
                arr = np.ascontiguousarray(opt_state[kind][name], dtype="<f4")
                opt_meta["entries"].append(
                    {"name": f"{kind}.{name}", "shape": list(arr.shape), "offset": offset})
                blobs.append(arr)
                offset += arr.nbytes

    with open(stem + ".wbin", "wb") as fh:
        for arr in blobs:
            fh.write(arr.tobytes())
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "dtype": "float32",
        "total_bytes": offset,
        "iteration": int(iteration),
        "seed": int(model.seed),
        "pipeline": model.pipeline.to_dict(),
        "raw_net": model.raw_cfg.to_dict(),
        "srgb_net": model.srgb_cfg.to_dict(),
        "entries": entries,
        "optimizer": opt_meta,
    }
    with open(stem + ".json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return stem + ".wbin", stem + ".json"


def _take(buf: np.ndarray, entry: dict, cursor: int) -> tuple[np.ndarray, int]:
    """Slice one tensor out of the float32 buffer; cursor is in elements,
    manifest offsets are in bytes."""
    shape = tuple(int(s) for s in entry["shape"])
    n = int(np.prod(shape)) if shape else 1
    if int(entry["offset"]) != 4 * cursor:
        raise FormatError(
            f"entry {entry['name']!r} at byte offset {entry['offset']} breaks the"
            f" tiling (expected {4 * cursor})")
    if cursor + n > buf.size:
        raise FormatError(f"entry {entry['name']!r} runs past the weight buffer")
    return buf[cursor:cursor + n].reshape(shape), cursor + n


def load_model(path: str) -> tuple[DualModel, dict]:
    """Rebuild a model from a bundle; returns (model, meta).

    meta carries "iteration" and, when the bundle holds moments,
    "opt_state" shaped for the trainer to resume exactly.
    """
    stem = _stem(path, ".wbin")
    meta = _load_json(stem + ".json")
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise FormatError(f"unsupported weights schema in {stem}.json")
    if meta.get("dtype") != "float32":
        raise FormatError(f"unsupported weight dtype {meta.get('dtype')!r}")
    with open(stem + ".wbin", "rb") as fh:
        buf = np.frombuffer(fh.read(), dtype="<f4")
    if buf.nbytes != int(meta["total_bytes"]):
        raise FormatError(
            f"{stem}.wbin holds {buf.nbytes} bytes, manifest promises"
            f" {meta['total_bytes']}")

    model = build_model(PipelineConfig.from_dict(meta["pipeline"]),
                        NetConfig.from_dict(meta["raw_net"]),
                        NetConfig.from_dict(meta["srgb_net"]),
                        seed=int(meta.get("seed", 0)), dtype=np.float32)
    params = model.parameters()
    cursor = 0
    seen = []
    for entry in meta["entries"]:
        arr, cursor = _take(buf, entry, cursor)
        name = entry["name"]
        if name not in params:
            raise FormatError(f"bundle entry {name!r} has no matching parameter")
        if tuple(arr.shape) != params[name].data.shape:
            raise FormatError(
                f"shape mismatch for {name!r}: bundle {arr.shape},"
                f" model {params[name].data.shape}")
        params[name].data = arr.astype(np.float32).copy()
        seen.append(name)
    if set(seen) != set(params):
        raise FormatError("bundle does not cover the model's parameters exactly")

    out_meta = {"iteration": int(meta.get("iteration", 0)), "opt_state": None}
    if meta.get("optimizer"):
        state = {"step": int(meta["optimizer"]["step"]), "m": {}, "v": {}}
        for entry in meta["optimizer"]["entries"]:
            arr, cursor = _take(buf, entry, cursor)
            kind, _, name = entry["name"].partition(".")
            state[kind][name] = arr.astype(np.float32).copy()
        out_meta["opt_state"] = state
    if cursor != buf.size:
        raise FormatError(f"{buf.size - cursor} trailing values in {stem}.wbin")
    return model, out_meta


# ------------------------------------------------------- procedural dataset

SCENE_KINDS = ("gradient", "checker", "blobs", "texture")


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    ys = np.arange(size, dtype=np.float64)[:, None]
    xs = np.arange(size, dtype=np.float64)[None, :]
    return ys, xs


def _scene_gradient(rng: np.random.Generator, size: int) -> np.ndarray:
    c0 = rng.uniform(0.08, 0.92, size=3)
    c1 = rng.uniform(0.08, 0.92, size=3)
    theta = rng.uniform(0.0, 2.0 * np.pi)
    ys, xs = _grid(size)
    t = np.cos(theta) * xs + np.sin(theta) * ys
    t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
    return c0[:, None, None] * (1.0 - t) + c1[:, None, None] * t


def _scene_checker(rng: np.random.Generator, size: int) -> np.ndarray:
    cell = int(rng.choice([6, 8, 10, 14]))
    c0 = rng.uniform(0.1, 0.9, size=3)
    c1 = rng.uniform(0.1, 0.9, size=3)
    oy, ox = rng.integers(0, cell, size=2)
    ys, xs = _grid(size)
    mask = (((ys + oy) // cell + (xs + ox) // cell) % 2).astype(np.float64)
    return c0[:, None, None] * (1.0 - mask) + c1[:, None, None] * mask


def _scene_blobs(rng: np.random.Generator, size: int) -> np.ndarray:
    img = np.tile(rng.uniform(0.2, 0.5, size=3)[:, None, None], (1, size, size))
    ys, xs = _grid(size)
    for _ in range(int(rng.integers(3, 7))):
        cy, cx = rng.uniform(0, size, size=2)
        sig = rng.uniform(size / 12.0, size / 4.0)
        amp = rng.uniform(-0.4, 0.4, size=3)
        bump = np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2.0 * sig * sig))
        img = img + amp[:, None, None] * bump
    return np.clip(img, 0.03, 0.97)


def _scene_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    shared = rng.normal(0.0, 1.0, size=(size, size))
    per = rng.normal(0.0, 1.0, size=(3, size, size))
    radius = int(rng.integers(1, 4))
    mix = isp_mod._blur_reflect(0.75 * shared[None] + 0.35 * per, radius)
    mix = mix / max(float(mix.std()), 1e-9)
    return np.clip(0.5 + 0.2 * mix, 0.03, 0.97)


_SCENE_FNS = {"gradient": _scene_gradient, "checker": _scene_checker,
              "blobs": _scene_blobs, "texture": _scene_texture}


def make_scene(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """One synthetic linear-light RGB scene, values inside (0, 1)."""
    if kind not in _SCENE_FNS:
        raise ParameterError(f"unknown scene kind {kind!r}")
    if size < 16 or size % 2:
        raise DimensionError(f"scene size must be even and >= 16, got {size}")
    return _SCENE_FNS[kind](rng, size)


def _scene_params(rng: np.random.Generator) -> isp_mod.IspParams:
    base = np.asarray(isp_mod.IspParams().ccm, dtype=np.float64)
    s = rng.uniform(0.3, 1.0)
    ccm = np.eye(3) + s * (base - np.eye(3))
    gains = (float(rng.uniform(1.6, 2.4)), 1.0, float(rng.uniform(1.4, 2.0)))
    return isp_mod.IspParams(wb_gains=gains,
                             ccm=tuple(tuple(float(c) for c in row) for row in ccm))


def gen_dataset(out_dir: str, count: int = 80, seed: int = 0, size: int = 96,
                train_fraction: float = 0.8,
                train_name: str = "train_manifest.json",
                test_name: str = "test_manifest.json") -> tuple[str, str]:
    """Write `count` raw containers plus train/test manifest files.

    Scene kinds rotate; each frame gets its own white balance and color
    matrix so the render stage never sees a single fixed calibration.
    Returns (train_manifest_path, test_manifest_path).
    """
    if count < 2:
        raise ParameterError(f"need at least 2 scenes, got {count}")
    os.makedirs(out_dir, exist_ok=True)
    names = []
    for i in range(count):
        rng = stream_rng(seed, 0x5CE, i)
        kind = SCENE_KINDS[i % len(SCENE_KINDS)]
        rgb = make_scene(kind, size, rng)
        p = _scene_params(rng)
        dn = mosaic_from_rgb(rgb, p, bayer="RGGB")
        name = f"scene_{i:03d}"
        write_raw_container(os.path.join(out_dir, name), dn, "RGGB", p)
        names.append(name + ".rawbin")
    n_train = max(1, min(count - 1, int(round(count * train_fraction))))
    paths = []
    for fname, split in ((os.path.join(out_dir, train_name), names[:n_train]),
                         (os.path.join(out_dir, test_name), names[n_train:])):
        with open(fname, "w", encoding="utf-8") as fh:
            json.dump({"schema_version": SCHEMA_VERSION, "files": split}, fh, indent=1)
            fh.write("\n")
        paths.append(fname)
    return paths[0], paths[1]


def load_manifest(path: str) -> list[str]:
    """Resolve a manifest's file list relative to the manifest's directory."""
    meta = _load_json(path)
    if meta.get("schema_version") != SCHEMA_VERSION or "files" not in meta:
        raise FormatError(f"{path} is not a dataset manifest")
    root = os.path.dirname(os.path.abspath(path))
    return [os.path.join(root, f) for f in meta["files"]]


def load_scenes(manifest_path: str) -> list[RawImage]:
    return [load_raw_image(p) for p in load_manifest(manifest_path)]

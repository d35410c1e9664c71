"""Scene IO: RGBE radiance maps, LDR exposures, splits, synthetic scenes.

A scene on disk is a directory holding three 8-bit exposures and one
ground-truth radiance map:

    <root>/<scene_id>/ev-2.png  ev0.png  ev+2.png  gt.hdr

Images are (3, H, W) float32 throughout: LDR in [0, 1], HDR in linear
radiance.  `hdr_norm` is the radiance map clamped at its 99.9th percentile
(nearest-rank) and scaled to [0, 1]; it is the reconstruction target.
"""

from __future__ import annotations

import math
import re
from fractions import Fraction
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

__all__ = [
    "DataError",
    "ParseError",
    "Scene",
    "EXPOSURE_EVS",
    "LDR_NAMES",
    "HDR_NAME",
    "read_png",
    "write_png",
    "decode_rgbe",
    "encode_rgbe",
    "read_hdr",
    "write_hdr",
    "nearest_rank_percentile",
    "normalize_hdr",
    "simulate_exposure",
    "load_scene",
    "scan_dataset",
    "load_dataset",
    "write_scene",
    "preprocess_scene",
    "split_scenes",
    "make_synthetic_scene",
    "make_synthetic_dataset",
]


class DataError(RuntimeError):
    """Dataset layout or content problem (missing files, bad dimensions...)."""


class ParseError(ValueError):
    """Malformed radiance (.hdr) stream; the message includes a byte offset."""


EXPOSURE_EVS = (-2, 0, 2)
LDR_NAMES = {-2: "ev-2.png", 0: "ev0.png", 2: "ev+2.png"}
HDR_NAME = "gt.hdr"


@dataclass
class Scene:
    scene_id: str
    ldr: dict  # ev -> (3, H, W) float32 in [0, 1]
    hdr: np.ndarray  # (3, H, W) float32 linear radiance
    hdr_norm: np.ndarray  # (3, H, W) float32 in [0, 1]
    hdr_scale: float  # hdr_norm * hdr_scale recovers radiance below the clip


# ---------------------------------------------------------------------------
# PNG


def read_png(path) -> np.ndarray:
    """8-bit image file -> (3, H, W) float32 in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr.transpose(2, 0, 1) / 255.0


def write_png(path, img) -> None:
    """(3, H, W) float in [0, 1] -> 8-bit RGB file."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise DataError(f"write_png expects (3, H, W), got {arr.shape}")
    u8 = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8.transpose(1, 2, 0)).save(path)


# ---------------------------------------------------------------------------
# radiance RGBE codec

_MAX_DIM = 20000
_RES_RE = re.compile(rb"-Y (\d+) \+X (\d+)")


def decode_rgbe(data: bytes) -> np.ndarray:
    """Decode a radiance stream to (3, H, W) float32.

    Supports flat and new-style run-length encoded scanlines and the
    standard -Y +X orientation.  A shared-exponent pixel (r, g, b, e)
    decodes channel c as (c + 0.5) / 256 * 2**(e - 128); e == 0 is black.
    """
    off = 0

    def line():
        nonlocal off
        end = data.find(b"\n", off)
        if end < 0:
            raise ParseError(f"unterminated header line at byte {off}")
        out = data[off:end]
        off = end + 1
        return out

    if not data[:2] == b"#?":
        raise ParseError("byte 0: missing '#?' radiance signature")
    line()  # program signature, content ignored
    fmt_seen = False
    while True:
        ln = line()
        if ln == b"":
            break
        if ln.startswith(b"#"):
            continue
        if ln.startswith(b"FORMAT="):
            if ln != b"FORMAT=32-bit_rle_rgbe":
                raise ParseError(f"byte {off - len(ln) - 1}: unsupported format {ln[7:]!r}")
            fmt_seen = True
    if not fmt_seen:
        raise ParseError(f"byte {off}: header ended without FORMAT=32-bit_rle_rgbe")
    res_at = off
    m = _RES_RE.fullmatch(line())
    if not m:
        raise ParseError(f"byte {res_at}: expected resolution line '-Y <H> +X <W>'")
    h, w = int(m.group(1)), int(m.group(2))
    if not (1 <= h <= _MAX_DIM and 1 <= w <= _MAX_DIM):
        raise ParseError(f"byte {res_at}: image dimensions {h}x{w} out of range")

    rgbe = np.empty((h, w, 4), dtype=np.uint8)
    for y in range(h):
        off = _decode_scanline(data, off, rgbe[y])
    if off != len(data):
        raise ParseError(f"byte {off}: {len(data) - off} trailing bytes after pixel data")

    e = rgbe[:, :, 3].astype(np.int32)
    scale = np.where(e > 0, np.power(2.0, e - 136, dtype=np.float64), 0.0)
    img = (rgbe[:, :, :3].astype(np.float64) + 0.5) * scale[:, :, None]
    return img.transpose(2, 0, 1).astype(np.float32)


def _decode_scanline(data: bytes, off: int, row: np.ndarray) -> int:
    w = row.shape[0]
    if off + 4 > len(data):
        raise ParseError(f"byte {off}: truncated scanline header")
    b0, b1, b2, b3 = data[off : off + 4]
    if b0 == 2 and b1 == 2 and ((b2 << 8) | b3) == w and 8 <= w <= 32767:
        off += 4
        for comp in range(4):
            filled = 0
            while filled < w:
                if off >= len(data):
                    raise ParseError(f"byte {off}: truncated run-length stream")
                count = data[off]
                off += 1
                if count > 128:  # run
                    n = count - 128
                    if filled + n > w:
                        raise ParseError(f"byte {off - 1}: run overflows scanline ({filled}+{n}>{w})")
                    if off >= len(data):
                        raise ParseError(f"byte {off}: truncated run value")
                    row[filled : filled + n, comp] = data[off]
                    off += 1
                elif count > 0:  # literal
                    n = count
                    if filled + n > w:
                        raise ParseError(f"byte {off - 1}: literal overflows scanline ({filled}+{n}>{w})")
                    if off + n > len(data):
                        raise ParseError(f"byte {off}: truncated literal of {n} bytes")
                    row[filled : filled + n, comp] = np.frombuffer(data[off : off + n], dtype=np.uint8)
                    off += n
                else:
                    raise ParseError(f"byte {off - 1}: zero-length run code")
                filled += n
        return off
    # flat scanline: 4 bytes per pixel
    need = 4 * w
    if off + need > len(data):
        raise ParseError(f"byte {off}: truncated flat scanline (need {need} bytes)")
    row[:] = np.frombuffer(data[off : off + need], dtype=np.uint8).reshape(w, 4)
    return off + need


def encode_rgbe(img, rle: bool = True) -> bytes:
    """Encode (3, H, W) non-negative floats as a radiance stream."""
    x = np.asarray(img, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != 3:
        raise DataError(f"encode_rgbe expects (3, H, W), got {x.shape}")
    if not np.isfinite(x).all() or (x < 0).any():
        raise DataError("encode_rgbe needs finite non-negative values")
    _, h, w = x.shape
    hwc = x.transpose(1, 2, 0)
    m = hwc.max(axis=2)
    frac, exp = np.frexp(m)
    if (exp > 127).any():
        raise DataError(f"radiance value too large to encode (max {m.max():g})")
    valid = (m >= 1e-32) & (exp + 128 >= 1)
    scale = np.where(valid, frac * 256.0 / np.where(m > 0, m, 1.0), 0.0)
    rgb = np.floor(hwc * scale[:, :, None]).astype(np.int32)
    rgbe = np.zeros((h, w, 4), dtype=np.uint8)
    rgbe[:, :, :3] = np.clip(rgb, 0, 255)
    rgbe[:, :, 3] = np.where(valid, exp + 128, 0)

    out = bytearray()
    out += b"#?RADIANCE\n"
    out += b"FORMAT=32-bit_rle_rgbe\n\n"
    out += f"-Y {h} +X {w}\n".encode("ascii")
    use_rle = rle and 8 <= w <= 32767
    for y in range(h):
        if use_rle:
            out += bytes((2, 2, w >> 8, w & 0xFF))
            for comp in range(4):
                out += _rle_component(rgbe[y, :, comp])
        else:
            out += rgbe[y].tobytes()
    return bytes(out)


def _rle_component(c: np.ndarray) -> bytes:
    out = bytearray()
    n = len(c)
    i = 0
    while i < n:
        j = i
        while j < n and j - i < 127 and c[j] == c[i]:
            j += 1
        if j - i >= 4:
            out.append(128 + (j - i))
            out.append(int(c[i]))
            i = j
            continue
        j = i + 1
        while j < n and j - i < 128:
            if j + 3 < n and c[j] == c[j + 1] == c[j + 2] == c[j + 3]:
                break
            j += 1
        out.append(j - i)
        out += c[i:j].tobytes()
        i = j
    return bytes(out)


def read_hdr(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_rgbe(fh.read())


def write_hdr(path, img, rle: bool = True) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_rgbe(img, rle=rle))


# ---------------------------------------------------------------------------
# radiometry


def nearest_rank_percentile(values, q: float) -> float:
    """Nearest-rank percentile: the k-th smallest value, k = ceil(q/100 * n).

    The rank is computed in exact rational arithmetic on the decimal value
    of q.  Binary float rounding would otherwise push q/100*n just above an
    integer (99.9% of 1000 is 999, not 999.0000000000001 -> 1000).
    """
    flat = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    if flat.size == 0:
        raise DataError("percentile of an empty array")
    if not (0.0 < q <= 100.0):
        raise ValueError(f"percentile must be in (0, 100], got {q}")
    k = math.ceil(Fraction(str(float(q))) * flat.size / 100)
    k = min(flat.size, max(1, k))
    return float(flat[k - 1])


def normalize_hdr(hdr, percentile: float = 99.9):
    """Clamp at the given nearest-rank percentile and scale to [0, 1].

    Returns (normalized image, scale); multiplying back by the scale
    recovers radiance for everything below the clip point.
    """
    arr = np.asarray(hdr, dtype=np.float64)
    scale = nearest_rank_percentile(arr, percentile)
    if scale <= 0.0:
        raise DataError(f"normalization failed: {percentile}th percentile is {scale}")
    return np.clip(arr / scale, 0.0, 1.0).astype(np.float32), scale


def simulate_exposure(
    hdr,
    stops: float = 0.0,
    *,
    low_pct: float = 1.0,
    high_pct: float = 99.0,
    window=None,
    gamma: float = 2.2,
) -> np.ndarray:
    """Render an 8-bit-style exposure of a radiance map.

    The map is scaled by 2**stops, clamped to a luminance window, rescaled
    to [0, 1] and gamma-encoded (1/gamma).  The window defaults to the
    (low_pct, high_pct) nearest-rank percentiles of the *scaled* map; pass
    `window=(lo, hi)` in scaled units to pin it.  With a pinned window the
    mapping is monotone: brightening any pixel never darkens its rendering.
    """
    x = np.asarray(hdr, dtype=np.float64) * (2.0**stops)
    if window is None:
        lo = nearest_rank_percentile(x, low_pct)
        hi = nearest_rank_percentile(x, high_pct)
    else:
        lo, hi = float(window[0]), float(window[1])
    if not hi > lo:
        raise DataError(f"degenerate exposure window [{lo}, {hi}]")
    y = np.clip((x - lo) / (hi - lo), 0.0, 1.0)
    return np.power(y, 1.0 / gamma).astype(np.float32)


# ---------------------------------------------------------------------------
# scenes on disk


def load_scene(scene_dir) -> Scene:
    d = Path(scene_dir)
    ldr = {}
    for ev, name in LDR_NAMES.items():
        p = d / name
        if not p.is_file():
            raise DataError(f"scene {d.name!r}: missing exposure {p}")
        ldr[ev] = read_png(p)
    hp = d / HDR_NAME
    if not hp.is_file():
        raise DataError(f"scene {d.name!r}: missing ground truth {hp}")
    hdr = read_hdr(hp)
    shapes = {a.shape for a in ldr.values()} | {hdr.shape}
    if len(shapes) != 1:
        raise DataError(f"scene {d.name!r}: images disagree in shape: {sorted(shapes)}")
    norm, scale = normalize_hdr(hdr)
    return Scene(d.name, ldr, hdr, norm, scale)


def scan_dataset(root) -> list:
    r = Path(root)
    if not r.is_dir():
        raise DataError(f"dataset root {r} is not a directory")
    dirs = sorted(p for p in r.iterdir() if p.is_dir())
    if not dirs:
        raise DataError(f"dataset root {r} contains no scene directories")
    return dirs


def load_dataset(root, *, crop=None, downscale=None) -> list:
    scenes = [load_scene(p) for p in scan_dataset(root)]
    if crop or downscale:
        scenes = [preprocess_scene(s, crop=crop, downscale=downscale) for s in scenes]
    return scenes


def write_scene(scene_dir, scene: Scene) -> None:
    d = Path(scene_dir)
    d.mkdir(parents=True, exist_ok=True)
    for ev, name in LDR_NAMES.items():
        write_png(d / name, scene.ldr[ev])
    write_hdr(d / HDR_NAME, scene.hdr)


def _center_crop(arr: np.ndarray, size: int) -> np.ndarray:
    _, h, w = arr.shape
    if size > h or size > w:
        raise DataError(f"crop {size} exceeds image size {h}x{w}")
    y0, x0 = (h - size) // 2, (w - size) // 2
    return arr[:, y0 : y0 + size, x0 : x0 + size]


def _block_mean(arr: np.ndarray, k: int) -> np.ndarray:
    c, h, w = arr.shape
    if h % k or w % k:
        raise DataError(f"downscale factor {k} does not divide {h}x{w}")
    return arr.reshape(c, h // k, k, w // k, k).mean(axis=(2, 4)).astype(arr.dtype)


def preprocess_scene(scene: Scene, *, crop=None, downscale=None) -> Scene:
    """Center-crop and/or integer-factor downscale; renormalizes the target."""

    def prep(arr):
        if crop:
            arr = _center_crop(arr, int(crop))
        if downscale and int(downscale) > 1:
            arr = _block_mean(arr, int(downscale))
        return arr

    ldr = {ev: prep(a) for ev, a in scene.ldr.items()}
    hdr = prep(scene.hdr)
    norm, scale = normalize_hdr(hdr)
    return Scene(scene.scene_id, ldr, hdr, norm, scale)


# ---------------------------------------------------------------------------
# splits


def split_scenes(items: Sequence, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Shuffle deterministically and split train/val/test.

    Validation and test sizes are floor(fraction * n); the remainder goes
    to train, so no scene is ever dropped.
    """
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"fractions must be three non-negative values summing to 1, got {fractions}")
    items = list(items)
    n = len(items)
    if n < 3:
        raise DataError(f"need at least 3 scenes to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_val = math.floor(fractions[1] * n)
    n_test = math.floor(fractions[2] * n)
    n_train = n - n_val - n_test
    train = [items[i] for i in order[:n_train]]
    val = [items[i] for i in order[n_train : n_train + n_val]]
    test = [items[i] for i in order[n_train + n_val :]]
    return train, val, test


# ---------------------------------------------------------------------------
# synthetic scenes


def make_synthetic_scene(seed: int, size: int = 64) -> Scene:
    """Procedural radiance map: dim ambient floor plus 2..4 Gaussian highlights
    with peaks up to 50x the displayable range, rendered through a per-scene
    random percentile window.  The per-scene window is what adaptation can
    exploit: each scene has its own tone curve."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    img = np.full((3, size, size), rng.uniform(0.02, 0.08))
    for _ in range(int(rng.integers(2, 5))):
        cx, cy = rng.uniform(0.1, 0.9, 2)
        sig = rng.uniform(0.06, 0.22)
        peak = rng.uniform(1.0, 50.0)
        color = rng.uniform(0.3, 1.0, 3)
        bump = np.exp(-(((xx - cx) ** 2) + ((yy - cy) ** 2)) / (2.0 * sig * sig))
        img += peak * color[:, None, None] * bump[None]
    low = rng.uniform(0.5, 5.0)
    high = rng.uniform(90.0, 99.5)
    # Window pinned on the base map.  Percentiles of the scaled map would
    # cancel the exposure factor and render every EV identically.
    window = (nearest_rank_percentile(img, low), nearest_rank_percentile(img, high))
    ldr = {ev: simulate_exposure(img, ev, window=window) for ev in EXPOSURE_EVS}
    norm, scale = normalize_hdr(img)
    return Scene(f"synth{seed:05d}", ldr, img.astype(np.float32), norm, scale)


def make_synthetic_dataset(count: int, *, base_seed: int = 0, size: int = 64) -> list:
    return [make_synthetic_scene(base_seed + i, size=size) for i in range(count)]

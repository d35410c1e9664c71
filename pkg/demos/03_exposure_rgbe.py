"""Synthesize a radiance map, photograph it at three exposures, and store
it in the shared-exponent RGBE container.

The synthetic scenes are the training distribution: a dim ambient floor
with a few Gaussian highlights peaking far above the displayable range,
rendered through a per-scene tone window.  That per-scene window is the
thing adaptation can exploit later.
"""

import tempfile
from pathlib import Path

import numpy as np

from hdrmeta import data

scene = data.make_synthetic_scene(seed=3, size=64)
print(f"scene {scene.scene_id}")
print(f"  radiance range   [{scene.hdr.min():.4f}, {scene.hdr.max():.2f}]")
print(f"  normalized to    [{scene.hdr_norm.min():.4f}, {scene.hdr_norm.max():.4f}] at scale {scene.hdr_scale:.3f}")
print(f"  exposures        {sorted(scene.ldr)}")

# brighter stops saturate more pixels, darker stops crush the floor
for ev in sorted(scene.ldr):
    img = scene.ldr[ev]
    blown = float(np.mean(img >= 1.0))
    crushed = float(np.mean(img <= 0.0))
    print(f"  ev{ev:+d}: mean {img.mean():.3f}, {blown:5.1%} blown, {crushed:5.1%} crushed")

# ---------------------------------------------------------------------------
# exposure simulation is just scale, window, gamma

hdr = scene.hdr.astype(np.float64)
window = (data.nearest_rank_percentile(hdr, 2.0), data.nearest_rank_percentile(hdr, 98.0))
base = data.simulate_exposure(hdr, 0.0, window=window)
plus2 = data.simulate_exposure(hdr, 2.0, window=window)
print(f"\n+2 stops with a pinned window never darkens a pixel: {bool(np.all(plus2 >= base))}")

# ---------------------------------------------------------------------------
# RGBE: one shared 8-bit exponent per pixel, three 8-bit mantissas

quads = np.array([[[128, 128, 128, 129]]], dtype=np.uint8)
head = b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n-Y 1 +X 1\n"
px = data.decode_rgbe(head + quads.tobytes())
print(f"\nbytes (128,128,128,129) decode to {px[:, 0, 0]} (mantissa midpoint 128.5, exponent 129-136)")

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "scene.hdr"
    data.write_hdr(path, scene.hdr)
    back = data.read_hdr(path)
    rel = np.abs(back - scene.hdr) / np.maximum(scene.hdr, 1e-9)
    print(f"wrote {path.stat().st_size:,} bytes ({scene.hdr.nbytes:,} raw float32)")
    print(f"roundtrip worst relative error {rel.max():.4%} (8-bit mantissa quantization)")

bad = head + b"\x01\x02\x03"
try:
    data.decode_rgbe(bad)
except data.ParseError as e:
    print(f"truncated file is rejected: {e}")

"""Assemble the reconstruction network and poke at its moving parts.

The model is a small encoder-decoder with skip connections: each level
downsamples by 2, the bottleneck turns around, and transposed
convolutions climb back up.  A sigmoid head keeps the output in (0, 1),
matching the normalized radiance targets.
"""

import tempfile
from pathlib import Path

import numpy as np

from hdrmeta import unet
from hdrmeta.tensor import core
from hdrmeta.tensor.core import Tensor

cfg = unet.UNetConfig(depth=2, base_channels=8)
params = unet.init_params(cfg, seed=0)
names = list(params)
print(f"depth={cfg.depth} base={cfg.base_channels}: {len(names)} tensors, {params.total_size:,} scalars")
print("first few parameters:")
for n in names[:5]:
    print(f"  {n:24s} {params[n].shape}")
print("  ...")
for n in names[-2:]:
    print(f"  {n:24s} {params[n].shape}")

# ---------------------------------------------------------------------------
# a forward pass; input sides must be divisible by 2**depth

rng = np.random.default_rng(0)
ldr = Tensor(rng.uniform(0.0, 1.0, (1, 3, 32, 32)).astype(np.float32))
with core.no_grad():
    out = unet.forward(params, ldr)
print(f"\nforward: {tuple(ldr.shape)} -> {tuple(out.shape)}")
print(f"output range ({out.data.min():.4f}, {out.data.max():.4f}), inside (0, 1) by construction")

try:
    with core.no_grad():
        unet.forward(params, Tensor(np.zeros((1, 3, 30, 30), dtype=np.float32)))
except Exception as e:
    print(f"30x30 input is rejected: {type(e).__name__}: {e}")

# ---------------------------------------------------------------------------
# checkpoints carry both the weights and the architecture

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "net.params"
    unet.save_params(path, params)
    loaded = unet.load_params(path)
    same = all(np.array_equal(params[n].data, loaded[n].data) for n in names)
    print(f"\ncheckpoint roundtrip bitwise identical: {same}")
    print(f"restored config: depth={loaded.config.depth} base={loaded.config.base_channels}")
    with core.no_grad():
        again = unet.forward(loaded, ldr)
    print(f"forward after reload matches: {np.array_equal(out.data, again.data)}")

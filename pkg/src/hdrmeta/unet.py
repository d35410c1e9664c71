"""Configurable image-to-image UNet assembled from the differentiable ops.

The network maps an LDR image to a normalized HDR estimate in [0, 1].
Architecture, fixed by construction:

* `depth` contracting blocks, each two 3x3 convs with batchnorm and relu
  (the first conv sets or doubles the width), joined by 2x2 max pooling;
* a bottom block (same conv pair) ending in a kernel-2 stride-2 transposed
  conv with no activation;
* expanding blocks that concatenate the upsampled features with the
  matching skip (upsampled first), halve the width with a 3x3 conv, keep
  it with another, then upsample with a relu-activated transposed conv
  (no batchnorm on the expanding path);
* a top block that concatenates with the first skip, applies the same two
  convs, then a 1x1 projection and a sigmoid.

Parameters live in a :class:`ParamSet`: an ordered, immutable-by-convention
name->Tensor mapping with elementwise arithmetic, so an adaptation update
is literally ``theta - lr * grads``.
"""

from __future__ import annotations

import io
import struct
from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from .tensor import core, nn
from .tensor.core import ShapeError, Tensor

__all__ = [
    "UNetConfig",
    "ParamSet",
    "SchemaError",
    "CheckpointError",
    "param_schema",
    "init_params",
    "forward",
    "verify_schema",
    "save_params",
    "load_params",
]


class SchemaError(ValueError):
    """Parameter set does not match the expected network schema."""


class CheckpointError(ValueError):
    """Checkpoint file is malformed or of an unsupported version."""


@dataclass(frozen=True)
class UNetConfig:
    """Network hyperparameters.

    depth counts contracting blocks (>= 1); input spatial dims must be
    divisible by 2**depth.  base_channels is the width of the first block;
    each level below doubles it.
    """

    depth: int = 4
    base_channels: int = 32
    in_channels: int = 3
    out_channels: int = 3
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if min(self.base_channels, self.in_channels, self.out_channels) < 1:
            raise ValueError("channel counts must be >= 1")
        if not (0.0 < self.bn_eps < 1.0):
            raise ValueError(f"bn_eps must be in (0, 1), got {self.bn_eps}")

    @property
    def spatial_multiple(self) -> int:
        return 2**self.depth


class ParamSet(Mapping):
    """Ordered name -> Tensor mapping with elementwise arithmetic.

    Arithmetic composes autodiff primitives, so ``theta - lr * grads``
    stays on the graph when its operands do.  Instances are never mutated;
    every operation returns a new set.
    """

    __slots__ = ("_tensors", "config")

    def __init__(self, tensors, config: UNetConfig | None = None):
        items = tensors.items() if isinstance(tensors, Mapping) else tensors
        self._tensors = {}
        for name, t in items:
            if not isinstance(t, Tensor):
                raise TypeError(f"parameter {name!r} must be a Tensor, got {type(t).__name__}")
            self._tensors[str(name)] = t
        self.config = config

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def __repr__(self) -> str:
        total = sum(t.size for t in self._tensors.values())
        return f"ParamSet({len(self._tensors)} tensors, {total} values)"

    @property
    def total_size(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def replace(self, updates: Mapping) -> "ParamSet":
        unknown = set(updates) - set(self._tensors)
        if unknown:
            raise KeyError(f"unknown parameter names: {sorted(unknown)}")
        merged = {n: updates.get(n, t) for n, t in self._tensors.items()}
        return ParamSet(merged, config=self.config)

    def map(self, fn) -> "ParamSet":
        return ParamSet({n: fn(t) for n, t in self._tensors.items()}, config=self.config)

    def _zip(self, other: "ParamSet", fn) -> "ParamSet":
        if list(self) != list(other) or any(self[n].shape != other[n].shape for n in self):
            raise SchemaError("parameter sets differ in names or shapes:\n" + "\n".join(_schema_diff(self, other)))
        return ParamSet({n: fn(self[n], other[n]) for n in self}, config=self.config)

    def __add__(self, other: "ParamSet") -> "ParamSet":
        return self._zip(other, core.add)

    def __sub__(self, other: "ParamSet") -> "ParamSet":
        return self._zip(other, core.sub)

    def __mul__(self, scalar: float) -> "ParamSet":
        s = float(scalar)
        return self.map(lambda t: core.mul(t, s))

    __rmul__ = __mul__

    def detach(self) -> "ParamSet":
        return self.map(lambda t: t.detach())

    def astype(self, dtype, requires_grad: bool = False) -> "ParamSet":
        return self.map(lambda t: t.astype(dtype, requires_grad=requires_grad))

    def leaves(self) -> "ParamSet":
        """Fresh graph leaves sharing this set's values."""
        return self.map(lambda t: Tensor(t.data, requires_grad=True))


def _schema_diff(a, b) -> list[str]:
    lines = []
    a_names, b_names = list(a), list(b)
    for n in a_names:
        if n not in b_names:
            lines.append(f"  missing: {n} {tuple(a[n].shape)}")
        elif tuple(a[n].shape) != tuple(b[n].shape):
            lines.append(f"  shape differs: {n} {tuple(a[n].shape)} vs {tuple(b[n].shape)}")
    for n in b_names:
        if n not in a_names:
            lines.append(f"  unexpected: {n} {tuple(b[n].shape)}")
    if not lines:
        lines.append("  (same names and shapes, different order)")
    return lines


# ---------------------------------------------------------------------------
# schema


def _block_widths(cfg: UNetConfig) -> list[int]:
    return [cfg.base_channels * (1 << lvl) for lvl in range(cfg.depth)]


def param_schema(cfg: UNetConfig) -> list[tuple[str, tuple]]:
    """Ordered (name, shape) list defining the parameter layout."""
    spec: list[tuple[str, tuple]] = []

    def conv(prefix, cin, cout, k):
        spec.append((f"{prefix}.weight", (cout, cin, k, k)))
        spec.append((f"{prefix}.bias", (cout,)))

    def bn(prefix, c):
        spec.append((f"{prefix}.gamma", (c,)))
        spec.append((f"{prefix}.beta", (c,)))

    widths = _block_widths(cfg)
    cin = cfg.in_channels
    for lvl, w in enumerate(widths):
        conv(f"enc{lvl}.conv1", cin, w, 3)
        bn(f"enc{lvl}.bn1", w)
        conv(f"enc{lvl}.conv2", w, w, 3)
        bn(f"enc{lvl}.bn2", w)
        cin = w
    deep = widths[-1] * 2
    conv("bottom.conv1", widths[-1], deep, 3)
    bn("bottom.bn1", deep)
    conv("bottom.conv2", deep, deep, 3)
    bn("bottom.bn2", deep)
    spec.append(("bottom.up.weight", (deep, widths[-1], 2, 2)))
    spec.append(("bottom.up.bias", (widths[-1],)))
    for lvl in range(cfg.depth - 1, 0, -1):
        w = widths[lvl]
        conv(f"dec{lvl}.conv1", 2 * w, w, 3)
        conv(f"dec{lvl}.conv2", w, w, 3)
        spec.append((f"dec{lvl}.up.weight", (w, w // 2, 2, 2)))
        spec.append((f"dec{lvl}.up.bias", (w // 2,)))
    b = widths[0]
    conv("top.conv1", 2 * b, b, 3)
    conv("top.conv2", b, b, 3)
    conv("top.out", b, cfg.out_channels, 1)
    return spec


def init_params(cfg: UNetConfig, seed: int = 0) -> ParamSet:
    """He-normal weights (fan-in scaled), zero biases, identity batchnorm."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_schema(cfg):
        if name.endswith(".weight"):
            if ".up." in name:
                fan_in = shape[0]  # stride 2, kernel 2: one input position per output
            else:
                fan_in = shape[1] * shape[2] * shape[3]
            arr = rng.normal(0.0, np.sqrt(2.0 / fan_in), shape).astype(np.float32)
        elif name.endswith(".gamma"):
            arr = np.ones(shape, dtype=np.float32)
        else:  # biases and beta
            arr = np.zeros(shape, dtype=np.float32)
        tensors[name] = Tensor(arr, requires_grad=True)
    return ParamSet(tensors, config=cfg)


def verify_schema(params: ParamSet, cfg: UNetConfig) -> None:
    """Raise :class:`SchemaError` naming every tensor that differs from cfg."""
    expected = param_schema(cfg)
    got = [(n, tuple(params[n].shape)) for n in params]
    if got != [(n, tuple(s)) for n, s in expected]:
        exp_set = ParamSet({n: Tensor(np.zeros(s, dtype=np.float32)) for n, s in expected})
        raise SchemaError(
            "parameters do not match the configured network:\n" + "\n".join(_schema_diff(exp_set, params))
        )


# ---------------------------------------------------------------------------
# forward


def _conv_bn_relu(x, params, conv, bnorm, eps):
    x = nn.conv2d(x, params[f"{conv}.weight"], params[f"{conv}.bias"])
    x = nn.batchnorm2d(x, params[f"{bnorm}.gamma"], params[f"{bnorm}.beta"], eps=eps)
    return nn.relu(x)


def forward(params: ParamSet, x) -> Tensor:
    """Run the network on a (N, C, H, W) batch; output has the same H and W.

    H and W must be divisible by 2**depth so the skip connections line up.
    """
    cfg = params.config
    if cfg is None:
        raise SchemaError("forward needs a ParamSet built for a UNetConfig (config attribute is None)")
    x = core.Tensor(x) if not isinstance(x, Tensor) else x
    if x.ndim != 4:
        raise ShapeError(f"forward expects (N, C, H, W), got shape {x.shape}")
    n, c, h, w = x.shape
    if c != cfg.in_channels:
        raise ShapeError(f"network expects {cfg.in_channels} input channels, got {c}")
    m = cfg.spatial_multiple
    if h % m or w % m:
        raise ShapeError(f"spatial dims must be multiples of {m} for depth {cfg.depth}, got H={h}, W={w}")

    eps = cfg.bn_eps
    skips = []
    for lvl in range(cfg.depth):
        x = _conv_bn_relu(x, params, f"enc{lvl}.conv1", f"enc{lvl}.bn1", eps)
        x = _conv_bn_relu(x, params, f"enc{lvl}.conv2", f"enc{lvl}.bn2", eps)
        skips.append(x)
        x = nn.maxpool2(x)

    x = _conv_bn_relu(x, params, "bottom.conv1", "bottom.bn1", eps)
    x = _conv_bn_relu(x, params, "bottom.conv2", "bottom.bn2", eps)
    x = nn.conv_transpose2d(x, params["bottom.up.weight"], params["bottom.up.bias"])

    for lvl in range(cfg.depth - 1, 0, -1):
        x = nn.concat_channels(x, skips[lvl])
        x = nn.relu(nn.conv2d(x, params[f"dec{lvl}.conv1.weight"], params[f"dec{lvl}.conv1.bias"]))
        x = nn.relu(nn.conv2d(x, params[f"dec{lvl}.conv2.weight"], params[f"dec{lvl}.conv2.bias"]))
        x = nn.relu(nn.conv_transpose2d(x, params[f"dec{lvl}.up.weight"], params[f"dec{lvl}.up.bias"]))

    x = nn.concat_channels(x, skips[0])
    x = nn.relu(nn.conv2d(x, params["top.conv1.weight"], params["top.conv1.bias"]))
    x = nn.relu(nn.conv2d(x, params["top.conv2.weight"], params["top.conv2.bias"]))
    x = nn.conv2d(x, params["top.out.weight"], params["top.out.bias"])
    return core.sigmoid(x)


# ---------------------------------------------------------------------------
# serialization: little-endian binary container, float32 payloads

_MAGIC = b"HMPARAMS"
_VERSION = 1


def save_params(path, params: ParamSet) -> None:
    """Write a checkpoint.  Requires a ParamSet carrying its UNetConfig."""
    cfg = params.config
    if cfg is None:
        raise SchemaError("cannot save a ParamSet without a network config")
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(
        struct.pack(
            "<HHIIIdI",
            _VERSION,
            cfg.depth,
            cfg.base_channels,
            cfg.in_channels,
            cfg.out_channels,
            cfg.bn_eps,
            len(params),
        )
    )
    for name in params:
        data = params[name].data.astype("<f4")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", data.ndim))
        buf.write(struct.pack(f"<{data.ndim}I", *data.shape))
        buf.write(data.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_params(path) -> ParamSet:
    """Read a checkpoint back into float32 graph leaves.

    The embedded config is reconstructed and verified against the stored
    tensor schema, so a corrupted or truncated file fails loudly.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(_MAGIC) or raw[: len(_MAGIC)] != _MAGIC:
        raise CheckpointError(f"{path}: not a parameter checkpoint (bad magic)")
    off = len(_MAGIC)
    try:
        version, depth, base, cin, cout, eps, count = struct.unpack_from("<HHIIIdI", raw, off)
    except struct.error as e:
        raise CheckpointError(f"{path}: truncated header ({e})") from e
    off += struct.calcsize("<HHIIIdI")
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    cfg = UNetConfig(depth=depth, base_channels=base, in_channels=cin, out_channels=cout, bn_eps=eps)
    tensors = {}
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off : off + name_len].decode("utf-8")
            off += name_len
            (ndim,) = struct.unpack_from("<B", raw, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            end = off + 4 * size
            if end > len(raw):
                raise CheckpointError(f"{path}: truncated tensor data for {name!r}")
            data = np.frombuffer(raw[off:end], dtype="<f4").reshape(shape).astype(np.float32)
            off = end
        except (struct.error, UnicodeDecodeError) as e:
            raise CheckpointError(f"{path}: malformed tensor record at byte {off} ({e})") from e
        tensors[name] = Tensor(data, requires_grad=True)
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes after last tensor")
    params = ParamSet(tensors, config=cfg)
    verify_schema(params, cfg)
    return params

"""Network schema, forward pass, parameter containers, checkpoints."""

import numpy as np
import pytest

from hdrmeta import unet
from hdrmeta.tensor import core
from hdrmeta.tensor.core import ShapeError, Tensor
from hdrmeta.tensor.gradcheck import run_network_check
from hdrmeta.unet import (
    CheckpointError,
    ParamSet,
    SchemaError,
    UNetConfig,
    init_params,
    load_params,
    param_schema,
    save_params,
    verify_schema,
)


SMALL = UNetConfig(depth=1, base_channels=4)


class TestConfig:
    def test_defaults(self):
        cfg = UNetConfig()
        assert (cfg.depth, cfg.base_channels, cfg.in_channels, cfg.out_channels) == (4, 32, 3, 3)
        assert cfg.spatial_multiple == 16

    def test_validation(self):
        with pytest.raises(ValueError):
            UNetConfig(depth=0)
        with pytest.raises(ValueError):
            UNetConfig(base_channels=0)

    def test_frozen(self):
        with pytest.raises(Exception):
            UNetConfig().depth = 2


class TestSchema:
    def test_small_schema_exact(self):
        names = [n for n, _ in param_schema(SMALL)]
        assert len(names) == 24
        assert names[:8] == [
            "enc0.conv1.weight", "enc0.conv1.bias", "enc0.bn1.gamma", "enc0.bn1.beta",
            "enc0.conv2.weight", "enc0.conv2.bias", "enc0.bn2.gamma", "enc0.bn2.beta",
        ]
        shapes = dict(param_schema(SMALL))
        assert shapes["bottom.up.weight"] == (8, 4, 2, 2)
        assert shapes["top.conv1.weight"] == (4, 8, 3, 3)
        assert shapes["top.out.weight"] == (3, 4, 1, 1)

    def test_default_schema_spot_shapes(self):
        shapes = dict(param_schema(UNetConfig()))
        assert len(shapes) == 66
        assert shapes["enc3.conv1.weight"] == (256, 128, 3, 3)
        assert shapes["dec3.conv1.weight"] == (256, 512, 3, 3)  # skip doubles channels
        assert shapes["dec1.up.weight"] == (64, 32, 2, 2)
        assert shapes["top.out.weight"] == (3, 32, 1, 1)

    def test_decoder_absent_at_depth_1(self):
        assert not any(n.startswith("dec") for n, _ in param_schema(SMALL))


class TestInit:
    def test_deterministic(self):
        a = init_params(SMALL, seed=3)
        b = init_params(SMALL, seed=3)
        for name in a.keys():
            np.testing.assert_array_equal(a[name].data, b[name].data)

    def test_seed_changes_weights(self):
        a = init_params(SMALL, seed=0)
        b = init_params(SMALL, seed=1)
        assert np.abs(a["enc0.conv1.weight"].data - b["enc0.conv1.weight"].data).max() > 0

    def test_bias_zero_gamma_one(self):
        p = init_params(SMALL, seed=0)
        np.testing.assert_array_equal(p["enc0.conv1.bias"].data, 0.0)
        np.testing.assert_array_equal(p["enc0.bn1.gamma"].data, 1.0)
        np.testing.assert_array_equal(p["enc0.bn1.beta"].data, 0.0)

    def test_weight_scale_tracks_fan_in(self):
        p = init_params(UNetConfig(depth=2, base_channels=8), seed=0)
        w = p["bottom.conv1.weight"].data
        fan_in = w.shape[1] * w.shape[2] * w.shape[3]
        assert np.isclose(w.std(), np.sqrt(2.0 / fan_in), rtol=0.1)
        up = p["bottom.up.weight"].data  # fan_in is the input channel count
        assert np.isclose(up.std(), np.sqrt(2.0 / up.shape[0]), rtol=0.1)

    def test_float32(self):
        p = init_params(SMALL, seed=0)
        assert all(t.dtype == np.float32 for t in p.values())


class TestForward:
    def test_output_shape_and_range(self):
        p = init_params(SMALL, seed=0)
        x = Tensor(np.random.default_rng(0).random((2, 3, 8, 8), dtype=np.float32))
        out = unet.forward(p, x)
        assert out.shape == (2, 3, 8, 8)
        assert out.data.min() > 0.0 and out.data.max() < 1.0  # sigmoid head

    def test_depth2_shape(self):
        cfg = UNetConfig(depth=2, base_channels=8)
        p = init_params(cfg, seed=0)
        out = unet.forward(p, Tensor(np.zeros((1, 3, 12, 12), dtype=np.float32)))
        assert out.shape == (1, 3, 12, 12)

    def test_spatial_multiple_enforced(self):
        cfg = UNetConfig(depth=2, base_channels=8)
        p = init_params(cfg, seed=0)
        with pytest.raises(ShapeError, match="4"):
            unet.forward(p, Tensor(np.zeros((1, 3, 10, 10), dtype=np.float32)))

    def test_channel_mismatch(self):
        p = init_params(SMALL, seed=0)
        with pytest.raises(ShapeError):
            unet.forward(p, Tensor(np.zeros((1, 4, 8, 8), dtype=np.float32)))

    def test_rank_checked(self):
        p = init_params(SMALL, seed=0)
        with pytest.raises(ShapeError):
            unet.forward(p, Tensor(np.zeros((3, 8, 8), dtype=np.float32)))

    def test_deterministic(self):
        p = init_params(SMALL, seed=0)
        x = Tensor(np.random.default_rng(1).random((1, 3, 8, 8), dtype=np.float32))
        np.testing.assert_array_equal(unet.forward(p, x).data, unet.forward(p, x).data)


def test_full_network_gradient_check():
    results = run_network_check(seed=0)
    bad = [f"{r.name}: {r.max_rel_err:.2e}" for r in results if not r.passed]
    assert not bad, "network gradient check failed:\n" + "\n".join(bad)


class TestParamSet:
    def test_mapping_protocol(self):
        p = init_params(SMALL, seed=0)
        assert len(p) == 24
        assert "enc0.conv1.weight" in p
        assert list(p) == [n for n, _ in param_schema(SMALL)]

    def test_replace_unknown_name(self):
        p = init_params(SMALL, seed=0)
        with pytest.raises(KeyError):
            p.replace({"nope.weight": p["enc0.conv1.weight"]})

    def test_replace_swaps_single_entry(self):
        p = init_params(SMALL, seed=0)
        z = Tensor(np.zeros_like(p["top.out.bias"].data))
        q = p.replace({"top.out.bias": z})
        np.testing.assert_array_equal(q["top.out.bias"].data, 0.0)
        assert q["enc0.conv1.weight"] is p["enc0.conv1.weight"]

    def test_arithmetic(self):
        p = init_params(SMALL, seed=0)
        doubled = p + p
        for name in p.keys():
            np.testing.assert_allclose(doubled[name].data, 2 * p[name].data)
        zero = p - p
        assert all(np.all(zero[n].data == 0) for n in zero.keys())
        half = p * 0.5
        np.testing.assert_allclose(half["enc0.conv1.weight"].data, 0.5 * p["enc0.conv1.weight"].data)

    def test_schema_mismatch_in_arithmetic(self):
        a = init_params(SMALL, seed=0)
        b = init_params(UNetConfig(depth=1, base_channels=8), seed=0)
        with pytest.raises(SchemaError):
            a + b

    def test_detach_drops_graph(self):
        p = init_params(SMALL, seed=0).map(lambda t: Tensor(t.data, requires_grad=True))
        q = (p * 2.0).detach()
        assert all(q[n].node is None for n in q.keys())

    def test_total_size(self):
        p = init_params(SMALL, seed=0)
        manual = sum(int(np.prod(s)) if s else 1 for _, s in param_schema(SMALL))
        assert p.total_size == manual


class TestVerifySchema:
    def test_passes_on_init(self):
        verify_schema(init_params(SMALL, seed=0), SMALL)

    def test_missing_name_reported(self):
        p = init_params(SMALL, seed=0)
        broken = ParamSet({k: v for k, v in p.items() if k != "top.out.bias"}, config=SMALL)
        with pytest.raises(SchemaError, match="top.out.bias"):
            verify_schema(broken, SMALL)

    def test_wrong_shape_reported(self):
        p = init_params(SMALL, seed=0)
        d = dict(p.items())
        d["top.out.bias"] = Tensor(np.zeros(7, dtype=np.float32))
        with pytest.raises(SchemaError, match="top.out.bias"):
            verify_schema(ParamSet(d, config=SMALL), SMALL)


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path):
        p = init_params(UNetConfig(depth=2, base_channels=8, bn_eps=2e-5), seed=9)
        path = tmp_path / "net.params"
        save_params(path, p)
        q = load_params(path)
        assert q.config == p.config
        for name in p.keys():
            np.testing.assert_array_equal(q[name].data, p[name].data)
            assert q[name].dtype == np.float32

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.params"
        path.write_bytes(b"NOTAPARAMFILE" + b"\x00" * 64)
        with pytest.raises(CheckpointError):
            load_params(path)

    def test_truncated(self, tmp_path):
        p = init_params(SMALL, seed=0)
        path = tmp_path / "net.params"
        save_params(path, p)
        good = path.read_bytes()
        path.write_bytes(good[: len(good) // 2])
        with pytest.raises(CheckpointError):
            load_params(path)

    def test_trailing_garbage(self, tmp_path):
        p = init_params(SMALL, seed=0)
        path = tmp_path / "net.params"
        save_params(path, p)
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(CheckpointError):
            load_params(path)

    def test_forward_after_reload_identical(self, tmp_path):
        p = init_params(SMALL, seed=2)
        path = tmp_path / "net.params"
        save_params(path, p)
        q = load_params(path)
        x = Tensor(np.random.default_rng(0).random((1, 3, 8, 8), dtype=np.float32))
        with core.no_grad():
            np.testing.assert_array_equal(unet.forward(p, x).data, unet.forward(q, x).data)

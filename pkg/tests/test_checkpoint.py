"""Tensor file format and checkpoint directory round-trips."""

import struct

import numpy as np
import pytest

from signflow import checkpoint as ck


class TestTensorFile:
    def test_roundtrip_float64(self, tmp_path, rng):
        arr = rng.standard_normal((3, 4, 2))
        p = tmp_path / "a.tnsr"
        ck.save_tensor(p, arr, name="weights.a")
        name, back = ck.load_tensor(p)
        assert name == "weights.a"
        assert back.dtype == np.float64
        assert np.array_equal(back, arr)

    def test_roundtrip_float32(self, tmp_path, rng):
        arr = rng.standard_normal((5,)).astype(np.float32)
        p = tmp_path / "b.tnsr"
        ck.save_tensor(p, arr)
        _, back = ck.load_tensor(p)
        assert back.dtype == np.float32
        assert np.array_equal(back, arr)

    def test_layout(self, tmp_path):
        arr = np.array([1.0, 2.0])
        p = tmp_path / "c.tnsr"
        ck.save_tensor(p, arr, name="x")
        raw = p.read_bytes()
        assert raw[:8] == b"PGMMTNSR"
        assert struct.unpack_from("<I", raw, 8)[0] == 1
        meta_len = struct.unpack_from("<I", raw, 12)[0]
        meta = raw[16:16 + meta_len].decode("utf-8")
        assert "name: x" in meta and "shape: 2" in meta and "dtype: float64" in meta
        vals = np.frombuffer(raw, dtype="<f8", offset=16 + meta_len)
        assert np.array_equal(vals, arr)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.tnsr"
        p.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
        with pytest.raises(ck.CheckpointError, match="magic"):
            ck.load_tensor(p)

    def test_bad_version(self, tmp_path):
        p = tmp_path / "v.tnsr"
        p.write_bytes(b"PGMMTNSR" + struct.pack("<I", 9) + struct.pack("<I", 0))
        with pytest.raises(ck.CheckpointError, match="version"):
            ck.load_tensor(p)

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "t.tnsr"
        ck.save_tensor(p, np.arange(8.0))
        raw = p.read_bytes()
        p.write_bytes(raw[:-20])
        with pytest.raises(ck.CheckpointError, match="shorter"):
            ck.load_tensor(p)


class TestCheckpointDir:
    def test_roundtrip(self, tmp_path, rng):
        params = {"enc.w": rng.standard_normal((2, 3)),
                  "enc.b": rng.standard_normal(3),
                  "gen.w": rng.standard_normal((4,)).astype(np.float32)}
        cfg = {"channels": "8,16,32", "seed": "7"}
        ck.save_checkpoint(tmp_path / "ckpt", params, cfg)
        tensors, config = ck.load_checkpoint(tmp_path / "ckpt")
        assert config == cfg
        assert set(tensors) == set(params)
        for k in params:
            assert np.array_equal(tensors[k], params[k])

    def test_save_load_save_bit_identical(self, tmp_path, rng):
        params = {"a.w": rng.standard_normal((3, 3)), "a.b": rng.standard_normal(3)}
        d1, d2 = tmp_path / "c1", tmp_path / "c2"
        ck.save_checkpoint(d1, params, {"k": "v"})
        tensors, cfg = ck.load_checkpoint(d1)
        ck.save_checkpoint(d2, tensors, cfg)
        for f in sorted(p.name for p in d1.iterdir()):
            assert (d1 / f).read_bytes() == (d2 / f).read_bytes()

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ck.CheckpointError, match="manifest"):
            ck.load_checkpoint(tmp_path / "nope")

    def test_missing_tensor_file(self, tmp_path, rng):
        ck.save_checkpoint(tmp_path / "c", {"w": rng.standard_normal(3)})
        (tmp_path / "c" / "w.tnsr").unlink()
        with pytest.raises(ck.CheckpointError, match="missing tensor file"):
            ck.load_checkpoint(tmp_path / "c")

    def test_restore_module_shape_mismatch(self, tmp_path, rng):
        from signflow.tensor import Module, parameter

        class Net(Module):
            def __init__(self):
                self.w = parameter(np.zeros((2, 2)))

        net = Net()
        with pytest.raises(ck.CheckpointError, match="shape"):
            ck.restore_module(net, {"w": rng.standard_normal((3, 3))})
        ck.restore_module(net, {"w": np.ones((2, 2))})
        assert np.array_equal(net.w.data, np.ones((2, 2)))

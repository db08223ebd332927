import numpy as np
import pytest

from cptlab.harness.checkpoint import MAGIC, Checkpoint, CheckpointError, load_checkpoint, save_checkpoint


def _ckpt(rng):
    gen = np.random.default_rng(7)
    gen.random(3)
    tensors = {"param/0.weight": rng.standard_normal((3, 4)).astype(np.float32),
               "param/0.bias": rng.standard_normal(4),
               "velocity/0.weight": np.zeros((3, 4), np.float32),
               "scalar": np.array(2.5)}
    return Checkpoint(5, "ab" * 32, tensors, gen.bit_generator.state, {"metrics": [{"epoch": 4}]}), gen


def test_round_trip(tmp_path, rng):
    ckpt, gen = _ckpt(rng)
    save_checkpoint(tmp_path / "c.ckpt", ckpt)
    back = load_checkpoint(tmp_path / "c.ckpt")
    assert back.epoch == 5 and back.config_hash == ckpt.config_hash and back.extras == ckpt.extras
    assert list(back.tensors) == list(ckpt.tensors)
    for k, v in ckpt.tensors.items():
        assert back.tensors[k].dtype == v.dtype and np.array_equal(back.tensors[k], v)
    restored = np.random.default_rng()
    restored.bit_generator.state = back.rng_state
    assert np.array_equal(restored.random(10), gen.random(10))


def test_rng_state_with_cached_uint32(tmp_path, rng):
    ckpt, gen = _ckpt(rng)
    gen.integers(0, 2**31, dtype=np.uint32)  # leaves half a 64-bit draw buffered
    ckpt.rng_state = gen.bit_generator.state
    save_checkpoint(tmp_path / "c.ckpt", ckpt)
    restored = np.random.default_rng()
    restored.bit_generator.state = load_checkpoint(tmp_path / "c.ckpt").rng_state
    assert np.array_equal(restored.integers(0, 2**31, 5, dtype=np.uint32), gen.integers(0, 2**31, 5, dtype=np.uint32))


def test_bad_magic(tmp_path):
    (tmp_path / "x").write_bytes(b"NOTACKPT" + bytes(64))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "x")


def test_truncated(tmp_path, rng):
    ckpt, _ = _ckpt(rng)
    save_checkpoint(tmp_path / "c", ckpt)
    raw = (tmp_path / "c").read_bytes()
    assert raw.startswith(MAGIC)
    (tmp_path / "t").write_bytes(raw[:-20])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "t")


def test_bad_version(tmp_path, rng):
    ckpt, _ = _ckpt(rng)
    save_checkpoint(tmp_path / "c", ckpt)
    raw = bytearray((tmp_path / "c").read_bytes())
    raw[8] = 9
    (tmp_path / "c").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "c")


def test_unsupported_dtype(tmp_path, rng):
    ckpt, _ = _ckpt(rng)
    ckpt.tensors["ints"] = np.arange(3)
    with pytest.raises(CheckpointError):
        save_checkpoint(tmp_path / "c", ckpt)


def test_non_pcg64_state_rejected(tmp_path, rng):
    ckpt, _ = _ckpt(rng)
    ckpt.rng_state = np.random.Generator(np.random.MT19937(0)).bit_generator.state
    with pytest.raises(CheckpointError):
        save_checkpoint(tmp_path / "c", ckpt)

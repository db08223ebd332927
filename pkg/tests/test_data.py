import gzip
import struct

import numpy as np
import pytest

from cptlab.harness.config import ConfigError, DataConfig
from cptlab.harness.data import (IMAGES_MAGIC, LABELS_MAGIC, DataError, bit_gated, ingest_dataset,
                                 load_csv, load_idx_pair, read_idx, synthetic_digits, write_idx)
from cptlab.quantization import quantize_max_scale


def _idx_bytes(magic, dims, payload):
    return struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + payload


def test_idx_round_trip(tmp_path, rng):
    imgs = rng.integers(0, 256, (10, 28, 28), dtype=np.uint8)
    labels = rng.integers(0, 10, 10).astype(np.uint8)
    write_idx(tmp_path / "x", imgs)
    write_idx(tmp_path / "y", labels)
    assert (tmp_path / "x").read_bytes()[:4] == b"\x00\x00\x08\x03"
    assert (tmp_path / "y").read_bytes()[:4] == b"\x00\x00\x08\x01"
    back = read_idx(tmp_path / "x", IMAGES_MAGIC)
    assert back.shape == (10, 28, 28) and np.array_equal(back, imgs)
    x, y = load_idx_pair(tmp_path / "x", tmp_path / "y", n_classes=10)
    assert x.shape == (10, 1, 28, 28) and x.max() <= 1.0
    assert np.array_equal(y, labels)


def test_idx_gzip(tmp_path):
    raw = _idx_bytes(LABELS_MAGIC, (3,), bytes([1, 2, 3]))
    with gzip.open(tmp_path / "y.gz", "wb") as fh:
        fh.write(raw)
    assert read_idx(tmp_path / "y.gz", LABELS_MAGIC).tolist() == [1, 2, 3]


def test_idx_wrong_magic(tmp_path):
    (tmp_path / "y").write_bytes(_idx_bytes(LABELS_MAGIC, (2,), bytes(2)))
    with pytest.raises(DataError, match="magic"):
        read_idx(tmp_path / "y", IMAGES_MAGIC)


def test_idx_malformed(tmp_path):
    (tmp_path / "a").write_bytes(_idx_bytes(0x00000F01, (2,), bytes(2)))
    with pytest.raises(DataError):
        read_idx(tmp_path / "a")
    (tmp_path / "b").write_bytes(_idx_bytes(LABELS_MAGIC, (5,), bytes(3)))
    with pytest.raises(DataError, match="payload"):
        read_idx(tmp_path / "b")
    (tmp_path / "c").write_bytes(b"\x00\x00")
    with pytest.raises(DataError, match="truncated"):
        read_idx(tmp_path / "c")


def test_idx_count_mismatch(tmp_path):
    write_idx(tmp_path / "x", np.zeros((3, 4, 4), np.uint8))
    write_idx(tmp_path / "y", np.zeros(2, np.uint8))
    with pytest.raises(DataError, match="3 images but 2 labels"):
        load_idx_pair(tmp_path / "x", tmp_path / "y")


def test_idx_label_out_of_range(tmp_path):
    write_idx(tmp_path / "x", np.zeros((2, 4, 4), np.uint8))
    write_idx(tmp_path / "y", np.array([1, 10], np.uint8))
    with pytest.raises(DataError, match="out of range"):
        load_idx_pair(tmp_path / "x", tmp_path / "y", n_classes=10)


def test_csv_rows(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("0,1.5,2\n1,0,-1\n\n2,3,4\n")
    x, y = load_csv(p)
    assert x.shape == (3, 2) and y.tolist() == [0, 1, 2]


@pytest.mark.parametrize("text,match", [("0,1,2\n1,2\n", "fields"), ("0,1\nx,2\n", ":2:"), ("", "no rows")])
def test_csv_errors(tmp_path, text, match):
    p = tmp_path / "d.csv"
    p.write_text(text)
    with pytest.raises(DataError, match=match):
        load_csv(p)


def test_csv_label_range(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("0,1\n3,2\n")
    with pytest.raises(DataError):
        load_csv(p, n_classes=3)


def test_csv_ingest_sign_detection(tmp_path):
    (tmp_path / "tr.csv").write_text("0,1,2\n1,3,4\n")
    (tmp_path / "te.csv").write_text("0,-1,2\n")
    ds = ingest_dataset(DataConfig(kind="csv", train_csv=str(tmp_path / "tr.csv"),
                                   test_csv=str(tmp_path / "te.csv")))
    assert not ds.nonnegative and ds.n_classes == 2 and ds.input_shape == (2,)
    with pytest.raises(ConfigError):
        ingest_dataset(DataConfig(kind="csv"))


def test_digits_deterministic_and_cached(tmp_path):
    a, la = synthetic_digits(50, 16, seed=3)
    b, lb = synthetic_digits(50, 16, seed=3)
    assert np.array_equal(a, b) and np.array_equal(la, lb)
    assert a.dtype == np.uint8 and a.shape == (50, 16, 16) and set(la) <= set(range(10))
    cfg = DataConfig(kind="digits", path=str(tmp_path), n_train=40, n_test=10)
    ds = ingest_dataset(cfg)
    assert ds.x_train.shape == (40, 1, 16, 16) and len(ds.y_test) == 10
    assert ds.nonnegative and ds.x_train.dtype == np.float32
    again = ingest_dataset(cfg)
    assert np.array_equal(ds.x_train, again.x_train)


def test_digit_classes_differ():
    imgs, labels = synthetic_digits(400, 16, seed=0)
    means = np.stack([imgs[labels == d].mean(axis=0) for d in range(10)])
    dist = np.linalg.norm(means[:, None] - means[None], axis=(2, 3))
    assert dist[~np.eye(10, dtype=bool)].min() > 50


def test_missing_idx_dir(tmp_path):
    with pytest.raises(DataError, match="missing"):
        ingest_dataset(DataConfig(kind="idx", path=str(tmp_path)))


def test_unknown_kind():
    with pytest.raises(ConfigError):
        ingest_dataset(DataConfig(kind="parquet"))


@pytest.mark.parametrize("k", [3, 4, 5])
def test_bit_gated_signal_visible_only_at_k_bits(k):
    x, y = bit_gated(500, k=k, seed=1)
    sig = slice(1, 9)
    q_fine = quantize_max_scale(x, k, signed=False)
    assert np.array_equal(q_fine[:, sig].max(axis=1) > 0, y == 1)
    q_coarse = quantize_max_scale(x, k - 1, signed=False)
    assert np.all(q_coarse[:, sig] == 0)


def test_blobs_shape():
    ds = ingest_dataset(DataConfig(kind="blobs", n_train=30, n_test=10, n_classes=3, n_features=5))
    assert ds.x_train.shape == (30, 5) and not ds.nonnegative

"""Dataset ingestion: IDX files, CSV rows and synthetic generators."""

import csv
import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from cptlab.harness.config import ConfigError, DataConfig

IDX_DTYPES = {
    0x08: np.uint8,
    0x09: np.int8,
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    n_classes: int
    nonnegative: bool = True

    @property
    def input_shape(self):
        return self.x_train.shape[1:]

    def __len__(self):
        return len(self.y_train)

    def astype(self, dtype):
        return Dataset(self.x_train.astype(dtype), self.y_train, self.x_test.astype(dtype),
                       self.y_test, self.n_classes, self.nonnegative)


# -- IDX --------------------------------------------------------------------

def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path, expect_magic=None) -> np.ndarray:
    """Read an IDX file (optionally gzipped) into an array of its declared shape."""
    with _open(path) as fh:
        head = fh.read(4)
        if len(head) != 4:
            raise DataError(f"{path}: truncated header")
        magic = struct.unpack(">I", head)[0]
        if expect_magic is not None and magic != expect_magic:
            raise DataError(f"{path}: magic number 0x{magic:08x}, expected 0x{expect_magic:08x}")
        zero, code, ndim = magic >> 16, (magic >> 8) & 0xFF, magic & 0xFF
        if zero != 0 or code not in IDX_DTYPES or ndim == 0:
            raise DataError(f"{path}: malformed magic number 0x{magic:08x}")
        dims = struct.unpack(f">{ndim}I", fh.read(4 * ndim))
        dtype = np.dtype(IDX_DTYPES[code])
        count = int(np.prod(dims))
        payload = fh.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise DataError(f"{path}: payload has {len(payload)} bytes, header declares {count * dtype.itemsize}")
    return np.frombuffer(payload, dtype=dtype).reshape(dims)


def write_idx(path, arr: np.ndarray):
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise DataError("only unsigned-byte IDX files are written")
    magic = (0x08 << 8) | arr.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr).tobytes())


def load_idx_pair(images_path, labels_path, n_classes=0):
    images = read_idx(images_path, IMAGES_MAGIC)
    labels = read_idx(labels_path, LABELS_MAGIC).astype(np.int64)
    if len(images) != len(labels):
        raise DataError(f"{len(images)} images but {len(labels)} labels")
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    _check_labels(labels, n_classes)
    return x, labels


def _check_labels(labels, n_classes):
    if labels.size and labels.min() < 0:
        raise DataError("negative label")
    if n_classes and labels.size and labels.max() >= n_classes:
        raise DataError(f"label {labels.max()} out of range for {n_classes} classes")


# -- CSV --------------------------------------------------------------------

def load_csv(path, n_classes=0):
    """Rows of ``label,feature,...``; every row must have the same length."""
    xs, ys = [], []
    width = None
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or all(not c.strip() for c in row):
                continue
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise DataError(f"{path}:{lineno}: row has {len(row)} fields, expected {width}")
            try:
                ys.append(int(row[0]))
                xs.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    if not ys:
        raise DataError(f"{path}: no rows")
    y = np.asarray(ys, dtype=np.int64)
    _check_labels(y, n_classes)
    return np.asarray(xs, dtype=np.float64), y


# -- synthetic --------------------------------------------------------------

# seven-segment membership per digit: a b c d e f g
_SEGMENTS = {
    0: "abcdef", 1: "bc", 2: "abdeg", 3: "abcdg", 4: "bcfg",
    5: "acdfg", 6: "acdefg", 7: "abc", 8: "abcdefg", 9: "abcdfg",
}


def _segment_masks(size, thickness):
    """(7, size, size) masks for segments a..g of a glyph in the canvas centre."""
    m = np.zeros((7, size, size))
    w = max(4, size // 2 - 1)
    h = max(6, size - 5)
    top = (size - h) // 2
    left = (size - w) // 2
    mid = top + h // 2
    bottom = top + h - 1
    right = left + w - 1
    t = thickness
    m[0, top:top + t, left:right + 1] = 1                 # a
    m[1, top:mid + 1, right - t + 1:right + 1] = 1        # b
    m[2, mid:bottom + 1, right - t + 1:right + 1] = 1     # c
    m[3, bottom - t + 1:bottom + 1, left:right + 1] = 1   # d
    m[4, mid:bottom + 1, left:left + t] = 1               # e
    m[5, top:mid + 1, left:left + t] = 1                  # f
    m[6, mid:mid + t, left:right + 1] = 1                 # g
    return m


def synthetic_digits(n, size=16, seed=0):
    """Seven-segment digit images with jitter, faded segments, stray strokes and noise.

    Returns uint8 images (n, size, size) and labels (n,).
    """
    rng = np.random.default_rng(seed)
    masks = np.stack([_segment_masks(size, 1), _segment_masks(size, 2)])
    member = np.zeros((10, 7))
    for d, segs in _SEGMENTS.items():
        for s in segs:
            member[d, "abcdefg".index(s)] = 1
    labels = rng.integers(0, 10, n)
    images = np.empty((n, size, size))
    for i in range(n):
        d = labels[i]
        inten = member[d] * rng.uniform(0.55, 1.0, 7)
        fade = rng.random(7) < 0.12
        inten[fade] *= rng.uniform(0.0, 0.35, fade.sum())
        stray = rng.random(7) < 0.06
        inten = np.where(stray & (member[d] == 0), rng.uniform(0.2, 0.6, 7), inten)
        img = np.tensordot(inten, masks[rng.integers(0, 2)], axes=1)
        img = np.roll(img, (rng.integers(-2, 3), rng.integers(-2, 3)), axis=(0, 1))
        img += rng.normal(0, 0.18, img.shape)
        images[i] = img
    images = np.clip(images, 0, 1)
    return np.rint(images * 255).astype(np.uint8), labels.astype(np.uint8)


def ensure_digits_idx(directory, cfg: DataConfig):
    """Write the synthetic digit set as IDX files unless they already exist."""
    directory = Path(directory)
    paths = [directory / getattr(cfg, k) for k in ("train_images", "train_labels",
                                                   "test_images", "test_labels")]
    if all(p.exists() for p in paths):
        return paths
    directory.mkdir(parents=True, exist_ok=True)
    xi, yi = synthetic_digits(cfg.n_train + cfg.n_test, cfg.image_size, cfg.seed)
    write_idx(paths[0], xi[:cfg.n_train])
    write_idx(paths[1], yi[:cfg.n_train])
    write_idx(paths[2], xi[cfg.n_train:])
    write_idx(paths[3], yi[cfg.n_train:])
    return paths


def gaussian_blobs(n, n_features, n_classes, spread, seed):
    rng = np.random.default_rng(seed)
    centers = rng.normal(0, spread, (n_classes, n_features))
    y = rng.integers(0, n_classes, n)
    x = centers[y] + rng.normal(0, 1.0, (n, n_features))
    return x, y


def bit_gated(n, k=4, n_signal=8, n_distractor=4, seed=0):
    """Two-class data separable only with at least ``k``-bit unsigned activations.

    Feature 0 is a constant 1.0 that pins the per-tensor max-scale. Signal
    features sit at 0 (class 0) or one ``k``-bit grid step ``1/(2**k - 1)``
    (class 1), plus jitter small enough that both values round to level 0 on
    any coarser grid. Distractors take the same two values at random.
    """
    rng = np.random.default_rng(seed)
    step = 1.0 / (2 ** k - 1)
    coarse = 2 ** (k - 1) - 1
    # distance from the class-1 value to the coarser grid's rounding threshold
    margin = 0.5 / coarse - step
    jitter = 0.25 * margin
    y = rng.integers(0, 2, n)
    sig = y[:, None] * step + rng.uniform(0, jitter, (n, n_signal))
    dis = rng.integers(0, 2, (n, n_distractor)) * step + rng.uniform(0, jitter, (n, n_distractor))
    x = np.concatenate([np.ones((n, 1)), sig, dis], axis=1)
    return x, y


def ingest_dataset(cfg: DataConfig, dtype=np.float32, cache_dir=None) -> Dataset:
    kind = cfg.kind
    if kind in ("idx", "digits"):
        directory = Path(cfg.path) if cfg.path else Path(cache_dir or ".cptlab-data") / "digits"
        if kind == "digits":
            ensure_digits_idx(directory, cfg)
        for k in ("train_images", "train_labels", "test_images", "test_labels"):
            if not (directory / getattr(cfg, k)).exists():
                raise DataError(f"missing IDX file {directory / getattr(cfg, k)}")
        xtr, ytr = load_idx_pair(directory / cfg.train_images, directory / cfg.train_labels, cfg.n_classes)
        xte, yte = load_idx_pair(directory / cfg.test_images, directory / cfg.test_labels, cfg.n_classes)
        nonneg = True
    elif kind == "csv":
        if not cfg.train_csv or not cfg.test_csv:
            raise ConfigError("csv data needs data.train_csv and data.test_csv")
        xtr, ytr = load_csv(cfg.train_csv, cfg.n_classes)
        xte, yte = load_csv(cfg.test_csv, cfg.n_classes)
        if xtr.shape[1] != xte.shape[1]:
            raise DataError("train and test CSV rows have different widths")
        nonneg = bool((xtr >= 0).all() and (xte >= 0).all())
    elif kind == "blobs":
        x, y = gaussian_blobs(cfg.n_train + cfg.n_test, cfg.n_features, cfg.n_classes or 2,
                              cfg.spread, cfg.seed)
        xtr, ytr, xte, yte = x[:cfg.n_train], y[:cfg.n_train], x[cfg.n_train:], y[cfg.n_train:]
        nonneg = False
    elif kind == "bitgated":
        x, y = bit_gated(cfg.n_train + cfg.n_test, cfg.bit_k, cfg.n_signal, cfg.n_distractor, cfg.seed)
        xtr, ytr, xte, yte = x[:cfg.n_train], y[:cfg.n_train], x[cfg.n_train:], y[cfg.n_train:]
        nonneg = True
    else:
        raise ConfigError(f"unknown data kind {kind!r}")
    if len(ytr) == 0 or len(yte) == 0:
        raise DataError("empty dataset")
    n_classes = cfg.n_classes or int(max(ytr.max(), yte.max()) + 1)
    return Dataset(xtr.astype(dtype), ytr.astype(np.int64), xte.astype(dtype), yte.astype(np.int64),
                   n_classes, nonneg)

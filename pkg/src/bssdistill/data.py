"""Synthetic datasets, IDX ingestion, normalisation and stratified subsampling."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

VARIANCE_FLOOR = 1e-8


class IdxFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class Dataset:
    """Train/test split with integer labels; ``onehot`` gives the one-hot view."""

    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    num_classes: int
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    normalized: bool = False
    flagged_features: list[int] = field(default_factory=list)
    name: str = ""

    def __post_init__(self):
        for y in (self.y_train, self.y_test):
            if y.size and (y.min() < 0 or y.max() >= self.num_classes):
                raise ValueError("label outside [0, num_classes)")
        if len(self.x_train) != len(self.y_train) or len(self.x_test) != len(self.y_test):
            raise ValueError("inputs and labels differ in length")

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.x_train.shape[1:])

    def onehot(self, split: str = "train") -> np.ndarray:
        y = self.y_train if split == "train" else self.y_test
        return np.eye(self.num_classes)[y]


def one_hot(y, num_classes: int) -> np.ndarray:
    return np.eye(num_classes)[np.asarray(y, dtype=np.int64)]


def generate_gaussians(
    num_classes: int = 2,
    samples_per_class: int = 200,
    centers=None,
    cov=None,
    seed: int = 0,
    test_per_class: int | None = None,
) -> Dataset:
    """Gaussian blobs; default centres sit on the x-axis four units apart, e.g. (-2, 0), (2, 0)."""
    if num_classes < 2:
        raise ValueError("need at least two classes")
    if centers is None:
        centers = [[4.0 * (c - (num_classes - 1) / 2), 0.0] for c in range(num_classes)]
    centers = np.asarray(centers, dtype=np.float64)
    if centers.shape[0] != num_classes:
        raise ValueError("one centre per class required")
    d = centers.shape[1]
    cov = np.eye(d) if cov is None else np.asarray(cov, dtype=np.float64)
    if cov.shape != (d, d) or not np.allclose(cov, cov.T):
        raise ValueError("covariance must be a symmetric d x d matrix")
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise ValueError("covariance is not positive definite") from None
    if np.min(np.diag(chol)) < 1e-10:
        raise ValueError("covariance is degenerate")
    test_per_class = samples_per_class if test_per_class is None else test_per_class
    rng = np.random.default_rng(seed)

    def draw(n):
        xs = [centers[c] + rng.standard_normal((n, d)) @ chol.T for c in range(num_classes)]
        ys = [np.full(n, c) for c in range(num_classes)]
        return np.concatenate(xs), np.concatenate(ys)

    xtr, ytr = draw(samples_per_class)
    xte, yte = draw(test_per_class)
    return Dataset(xtr, ytr, xte, yte, num_classes, name="gaussians")


def spiral_points(num_classes: int, n: int, noise: float, rng: np.random.Generator, turns: float = 1.5):
    xs, ys = [], []
    for c in range(num_classes):
        t = np.sort(rng.uniform(0.0, 1.0, n)) if n else np.zeros(0)
        r = 0.15 + 0.85 * t
        theta = 2 * np.pi * (turns * t + c / num_classes)
        pts = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
        if noise:
            pts = pts + rng.normal(0.0, noise, pts.shape)
        xs.append(pts)
        ys.append(np.full(n, c))
    return np.concatenate(xs), np.concatenate(ys)


def generate_spirals(
    num_classes: int = 2,
    samples_per_class: int = 200,
    noise: float = 0.0,
    seed: int = 0,
    test_per_class: int | None = None,
    turns: float = 1.5,
) -> Dataset:
    """Interleaved spiral arms, one class per arm, radius growing from 0.15 to 1."""
    if num_classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    test_per_class = samples_per_class if test_per_class is None else test_per_class
    xtr, ytr = spiral_points(num_classes, samples_per_class, noise, rng, turns)
    xte, yte = spiral_points(num_classes, test_per_class, noise, rng, turns)
    return Dataset(xtr, ytr, xte, yte, num_classes, name="spirals")


# --------------------------------------------------------------------------
# IDX
# --------------------------------------------------------------------------

_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {v: k for k, v in _IDX_TYPES.items()}


def read_idx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: file too short for an IDX header", len(raw))
    if raw[0] != 0 or raw[1] != 0:
        raise IdxFormatError(f"{path}: bad magic number", 0)
    code, ndim = raw[2], raw[3]
    if code not in _IDX_TYPES:
        raise IdxFormatError(f"{path}: unknown element type 0x{code:02x}", 2)
    if ndim == 0:
        raise IdxFormatError(f"{path}: zero dimensions", 3)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated dimension block", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    dtype = _IDX_TYPES[code]
    expected = header + int(np.prod(dims)) * dtype.itemsize
    if len(raw) != expected:
        raise IdxFormatError(f"{path}: payload size mismatch, expected {expected} bytes, got {len(raw)}", min(len(raw), expected))
    return np.frombuffer(raw, dtype=dtype, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    be = array.dtype.newbyteorder(">") if array.dtype.itemsize > 1 else array.dtype
    if be not in _IDX_CODES:
        raise ValueError(f"dtype {array.dtype} has no IDX code")
    header = bytes([0, 0, _IDX_CODES[be], array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.astype(be).tobytes())


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Read an IDX image/label pair into a train-only dataset of (N, 1, H, W) floats in [0, 1]."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise IdxFormatError(f"{images_path}: expected 3 dimensions (count, rows, cols), got {images.ndim}", 3)
    if labels.ndim != 1:
        raise IdxFormatError(f"{labels_path}: expected a 1-D label vector", 3)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels", 4)
    x = images.astype(np.float64)
    if images.dtype.kind == "u":
        x = x / float(np.iinfo(images.dtype).max)
    y = labels.astype(np.int64)
    k = int(y.max()) + 1 if num_classes is None else num_classes
    return Dataset(x[:, None], y, x[:0, None], y[:0], max(k, 2), name=Path(images_path).stem)


def train_test_split(dataset: Dataset, test_fraction: float, seed: int = 0) -> Dataset:
    """Stratified split of the train part into train/test."""
    rng = np.random.default_rng(seed)
    tr, te = [], []
    for c in range(dataset.num_classes):
        idx = rng.permutation(np.flatnonzero(dataset.y_train == c))
        n_test = int(round(test_fraction * idx.size))
        te.append(idx[:n_test])
        tr.append(idx[n_test:])
    tr, te = np.sort(np.concatenate(tr)), np.sort(np.concatenate(te))
    return replace(
        dataset,
        x_train=dataset.x_train[tr],
        y_train=dataset.y_train[tr],
        x_test=dataset.x_train[te],
        y_test=dataset.y_train[te],
    )


def generate_glyphs(samples_per_class: int = 100, size: int = 8, noise: float = 0.15, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Tiny 4-class grayscale images (horizontal bar, vertical bar, diagonal, box) as uint8."""
    rng = np.random.default_rng(seed)
    imgs, labels = [], []
    for c in range(4):
        for _ in range(samples_per_class):
            im = np.zeros((size, size))
            p = rng.integers(1, size - 1)
            if c == 0:
                im[p, :] = 1.0
            elif c == 1:
                im[:, p] = 1.0
            elif c == 2:
                off = rng.integers(-2, 3)
                for i in range(size):
                    j = i + off
                    if 0 <= j < size:
                        im[i, j] = 1.0
            else:
                lo = rng.integers(0, size // 2 - 1)
                hi = rng.integers(size // 2 + 1, size)
                im[lo, lo:hi] = im[hi - 1, lo:hi] = 1.0
                im[lo:hi, lo] = im[lo:hi, hi - 1] = 1.0
            im = np.clip(im + rng.normal(0.0, noise, im.shape), 0.0, 1.0)
            imgs.append(np.round(im * 255).astype(np.uint8))
            labels.append(c)
    order = rng.permutation(len(labels))
    return np.stack(imgs)[order], np.asarray(labels, dtype=np.uint8)[order]


# --------------------------------------------------------------------------
# transforms
# --------------------------------------------------------------------------


def normalize(dataset: Dataset) -> Dataset:
    """Standardise each feature with train-split statistics; test uses the same ones."""
    if dataset.normalized:
        raise ValueError("dataset is already normalized")
    mean = dataset.x_train.mean(axis=0)
    var = dataset.x_train.var(axis=0)
    flagged = np.flatnonzero((var < VARIANCE_FLOOR).reshape(-1)).tolist()
    std = np.sqrt(np.maximum(var, VARIANCE_FLOOR))
    return replace(
        dataset,
        x_train=(dataset.x_train - mean) / std,
        x_test=(dataset.x_test - mean) / std,
        mean=mean,
        std=std,
        normalized=True,
        flagged_features=flagged,
    )


def subsample(dataset: Dataset, fraction: float, seed: int = 0) -> Dataset:
    """Class-stratified subsample of the training split.

    Each class is permuted once per seed and a prefix is kept, so smaller
    fractions are subsets of larger ones under the same seed.
    """
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    if fraction == 1:
        return dataset
    rng = np.random.default_rng(seed)
    keep = []
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.y_train == c)
        perm = rng.permutation(idx)
        n = int(round(fraction * idx.size))
        if idx.size and n == 0:
            raise ValueError(f"fraction {fraction} leaves class {c} empty")
        keep.append(perm[:n])
    keep = np.sort(np.concatenate(keep))
    return replace(dataset, x_train=dataset.x_train[keep], y_train=dataset.y_train[keep])

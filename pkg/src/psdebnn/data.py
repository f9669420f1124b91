"""Synthetic datasets, MNIST IDX ingestion, OOD samples, splits and normalisation."""

from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
OOD_KINDS = ("uniform_noise", "gaussian_noise", "shifted")


@dataclass
class Dataset:
    features: np.ndarray  # (N, d_x)
    labels: np.ndarray | None  # (N,) ints, None for unlabeled OOD sets
    split: np.ndarray | None = None  # (N,) of "train" / "val" / "test"
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    num_classes: int = 0
    source: str = "ID"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        if not np.all(np.isfinite(self.features)):
            raise ConfigError("dataset features must be finite")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.intp)
            if self.labels.shape != (len(self.features),):
                raise ConfigError("one label per example required")
            if self.num_classes == 0 and len(self.labels):
                self.num_classes = int(self.labels.max()) + 1
            if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
                raise ConfigError("labels outside the class range")

    def __len__(self):
        return len(self.features)

    @property
    def d_x(self):
        return self.features.shape[1]

    def subset(self, idx):
        idx = np.asarray(idx)
        return replace(
            self,
            features=self.features[idx],
            labels=None if self.labels is None else self.labels[idx],
            split=None if self.split is None else self.split[idx],
            meta=dict(self.meta),
        )

    def part(self, name):
        if self.split is None:
            raise ConfigError("dataset has no split tags")
        return self.subset(np.flatnonzero(self.split == name))

    def normalized(self, mean=None, std=None):
        """Standardise with the given stats, or with this set's train split when omitted."""
        if mean is None:
            ref = self.features if self.split is None else self.features[self.split == "train"]
            mean = ref.mean(axis=0)
            std = ref.std(axis=0)
        std = np.where(np.asarray(std) > 0, std, 1.0)
        return replace(self, features=(self.features - mean) / std, mean=np.asarray(mean),
                       std=np.asarray(std), meta=dict(self.meta))


def split_dataset(ds: Dataset, fractions=(0.7, 0.15, 0.15), seed=0) -> Dataset:
    """Tag examples train/val/test with a seeded permutation (disjoint and exhaustive)."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ConfigError("fractions must be three nonnegative numbers summing to 1")
    n = len(ds)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    tags = np.empty(n, dtype=object)
    tags[perm[:n_train]] = "train"
    tags[perm[n_train:n_train + n_val]] = "val"
    tags[perm[n_train + n_val:]] = "test"
    return replace(ds, split=tags.astype(str), meta=dict(ds.meta))


# ---------------------------------------------------------------- generators

def _uniform_ball(rng, n, d, r_lo, r_hi):
    """Rejection-sample n points uniformly in the shell r_lo <= |x| <= r_hi."""
    out = np.empty((0, d))
    while len(out) < n:
        cand = rng.uniform(-r_hi, r_hi, size=(max(2 * (n - len(out)), 16), d))
        r = np.linalg.norm(cand, axis=1)
        out = np.concatenate([out, cand[(r <= r_hi) & (r >= r_lo)]])
    return out[:n]


def annulus_label(x, r1, r2, r3):
    """0 inside the ball |x| <= r1, 1 in the shell r2 <= |x| <= r3, -1 outside the domain."""
    r = np.linalg.norm(np.atleast_2d(x), axis=1)
    lab = np.full(r.shape, -1, dtype=np.intp)
    lab[r <= r1] = 0
    lab[(r >= r2) & (r <= r3)] = 1
    return lab


def gen_annulus(n_per_class, r1=1.0, r2=2.0, r3=3.0, seed=0, d_x=2) -> Dataset:
    """Inner ball (label 0, z=-1) vs. outer shell (label 1, z=+1); the gap is never sampled."""
    if not (0 < r1 < r2 < r3):
        raise ConfigError(f"need 0 < r1 < r2 < r3, got {r1}, {r2}, {r3}")
    rng = np.random.default_rng(seed)
    inner = _uniform_ball(rng, n_per_class, d_x, 0.0, r1)
    outer = _uniform_ball(rng, n_per_class, d_x, r2, r3)
    x = np.concatenate([inner, outer])
    y = np.concatenate([np.zeros(n_per_class, np.intp), np.ones(n_per_class, np.intp)])
    perm = rng.permutation(len(x))
    return Dataset(x[perm], y[perm], num_classes=2, meta={"name": "annulus", "radii": [r1, r2, r3]})


def gen_two_moons(n, noise_std=0.1, seed=0) -> Dataset:
    """Upper arc (cos a, sin a) labelled 0, lower arc (1 - cos a, 0.5 - sin a) labelled 1."""
    if n % 2:
        raise ConfigError("two moons needs an even number of points")
    rng = np.random.default_rng(seed)
    half = n // 2
    a = rng.uniform(0.0, np.pi, size=half)
    b = rng.uniform(0.0, np.pi, size=half)
    upper = np.stack([np.cos(a), np.sin(a)], axis=1)
    lower = np.stack([1.0 - np.cos(b), 0.5 - np.sin(b)], axis=1)
    x = np.concatenate([upper, lower])
    if noise_std > 0:
        x = x + rng.normal(0.0, noise_std, size=x.shape)
    y = np.concatenate([np.zeros(half, np.intp), np.ones(half, np.intp)])
    perm = rng.permutation(n)
    return Dataset(x[perm], y[perm], num_classes=2, meta={"name": "two_moons"})


def gen_ood(n, d_x, kind="uniform_noise", seed=0, low=0.0, high=1.0, shift=3.0) -> Dataset:
    """Unlabeled OOD inputs.

    ``uniform_noise`` is uniform on ``[low, high]^d_x`` (``low``/``high`` may be
    per-coordinate arrays), ``gaussian_noise`` is standard normal and
    ``shifted`` is standard normal moved by ``shift`` along every axis.
    """
    if kind not in OOD_KINDS:
        raise ConfigError(f"unknown OOD kind '{kind}'")
    rng = np.random.default_rng(seed)
    if kind == "uniform_noise":
        x = rng.uniform(low, high, size=(n, d_x))
    elif kind == "gaussian_noise":
        x = rng.standard_normal((n, d_x))
    else:
        x = rng.standard_normal((n, d_x)) + shift
    return Dataset(x, None, source="OOD", meta={"name": f"ood_{kind}"})


# ---------------------------------------------------------------- MNIST IDX

def _read_idx(path, magic):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: file shorter than the magic number", offset=len(raw))
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise FormatError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}", offset=0)
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated header", offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = header + int(np.prod(dims))
    if len(raw) < expected:
        raise FormatError(f"{path}: truncated payload ({len(raw)} of {expected} bytes)", offset=len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=int(np.prod(dims)), offset=header).reshape(dims)


def read_idx_images(path) -> np.ndarray:
    return _read_idx(path, IDX_IMAGES_MAGIC)


def read_idx_labels(path) -> np.ndarray:
    return _read_idx(path, IDX_LABELS_MAGIC)


def write_idx(path, array: np.ndarray):
    """Write a uint8 array as IDX (used for fixtures and caches)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def stratified_indices(labels, subset, seed=0):
    """Draw ``subset`` indices keeping class proportions (largest-remainder rounding)."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(labels, return_counts=True)
    if subset > len(labels):
        raise ConfigError(f"subset {subset} larger than dataset ({len(labels)})")
    exact = subset * counts / counts.sum()
    take = np.floor(exact).astype(int)
    for i in np.argsort(-(exact - take), kind="stable")[: subset - take.sum()]:
        take[i] += 1
    picked = [rng.choice(np.flatnonzero(labels == c), size=k, replace=False) for c, k in zip(classes, take)]
    idx = np.concatenate(picked) if picked else np.zeros(0, dtype=int)
    return rng.permutation(idx)


def load_mnist_idx(images_path, labels_path, subset=None, seed=0) -> Dataset:
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path).astype(np.intp)
    if images.ndim != 3:
        raise FormatError(f"{images_path}: expected rank-3 image tensor, got rank {images.ndim}", offset=3)
    if len(images) != len(labels):
        raise FormatError("image and label counts differ", offset=4)
    x = images.reshape(len(images), -1).astype(np.float64) / 255.0
    if subset is not None:
        idx = stratified_indices(labels, subset, seed)
        x, labels = x[idx], labels[idx]
    return Dataset(x, labels, num_classes=10, meta={"name": "mnist"})


# ---------------------------------------------------------------- CSV cache

def save_csv(ds: Dataset, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"] + [f"x_{i + 1}" for i in range(ds.d_x)])
        for i in range(len(ds)):
            label = "" if ds.labels is None else int(ds.labels[i])
            writer.writerow([label] + [repr(float(v)) for v in ds.features[i]])


def load_csv(path, num_classes=0) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "label":
        raise FormatError(f"{path}: missing 'label,x_1..' header", offset=0)
    body = rows[1:]
    x = np.array([[float(v) for v in r[1:]] for r in body]).reshape(len(body), len(rows[0]) - 1)
    if body and all(r[0] == "" for r in body):
        return Dataset(x, None, source="OOD")
    y = np.array([int(r[0]) for r in body], dtype=np.intp)
    return Dataset(x, y, num_classes=num_classes)


def data_dir():
    return os.environ.get("PSDEBNN_DATA_DIR", os.path.join(os.getcwd(), "data"))

"""Synthetic and IDX datasets with forget/retain/test partitions."""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, IdxFormatError, IdxTruncatedError
from .rng import Xoshiro256

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True, eq=False)
class SplitDataset:
    """Features and labels plus the forget (D_f), retain (D_r) and test (D_t) index sets.

    A freshly generated dataset has every sample in ``retain_idx`` and empty
    forget/test sets; :func:`split_forget_retain` produces the partition.
    """

    features: np.ndarray
    labels: np.ndarray
    forget_idx: np.ndarray
    retain_idx: np.ndarray
    test_idx: np.ndarray
    classes: int
    name: str = "dataset"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float32)
        if feats.ndim != 2:
            raise ConfigError(f"features must be 2-D, got shape {feats.shape}")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        for name in ("forget_idx", "retain_idx", "test_idx"):
            object.__setattr__(self, name, np.sort(np.asarray(getattr(self, name), dtype=np.int64)))
        self.check()

    def check(self) -> None:
        n = len(self.labels)
        if self.features.shape[0] != n:
            raise ConfigError("features and labels disagree on sample count")
        f, r, t = set(self.forget_idx.tolist()), set(self.retain_idx.tolist()), set(self.test_idx.tolist())
        if f & r or f & t or r & t:
            raise ConfigError("forget, retain and test index sets must be disjoint")
        if len(f) != len(self.forget_idx) or len(r) != len(self.retain_idx) or len(t) != len(self.test_idx):
            raise ConfigError("index sets contain duplicates")
        if any(i < 0 or i >= n for i in f | r | t):
            raise ConfigError("index out of range")

    @property
    def train_idx(self) -> np.ndarray:
        return np.sort(np.concatenate([self.forget_idx, self.retain_idx]))

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, idx, labels=None):
        idx = np.asarray(idx, dtype=np.int64)
        y = self.labels if labels is None else labels
        return self.features[idx], y[idx]

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for arr in (self.features, self.labels, self.forget_idx, self.retain_idx, self.test_idx):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]


def _unsplit(features, labels, classes, name, meta=None) -> SplitDataset:
    n = len(labels)
    empty = np.zeros(0, dtype=np.int64)
    return SplitDataset(features, labels, empty, np.arange(n), empty, classes, name, meta or {})


def make_moons(n: int, noise: float = 0.1, seed: int = 0, nuisance_dims: int = 0, nuisance_scale: float = 1.0) -> SplitDataset:
    """Two interleaving half circles; class 0 on the upper arc, class 1 on the lower.

    ``nuisance_dims`` appends that many label-independent Gaussian columns
    (std ``nuisance_scale``). They let a small network memorize individual
    points, which is the regime where forgetting a few samples is visible.
    """
    if n < 4:
        raise ConfigError(f"make_moons needs n >= 4, got {n}")
    if noise < 0:
        raise ConfigError(f"noise must be >= 0, got {noise}")
    if nuisance_dims < 0 or nuisance_scale < 0:
        raise ConfigError("nuisance_dims and nuisance_scale must be >= 0")
    n_outer = n // 2
    n_inner = n - n_outer
    a_out = np.linspace(0.0, math.pi, n_outer)
    a_in = np.linspace(0.0, math.pi, n_inner)
    x = np.concatenate([np.cos(a_out), 1.0 - np.cos(a_in)])
    y = np.concatenate([np.sin(a_out), 0.5 - np.sin(a_in)])
    feats = np.stack([x, y], axis=1)
    labels = np.concatenate([np.zeros(n_outer, np.int64), np.ones(n_inner, np.int64)])
    if noise > 0:
        rng = Xoshiro256.derived(seed, "moons")
        feats = feats + noise * rng.normal_array(2 * n).reshape(n, 2)
    meta = {"n": n, "noise": noise, "seed": seed}
    if nuisance_dims:
        extra = Xoshiro256.derived(seed, "moons-nuisance").normal_array(n * nuisance_dims).reshape(n, nuisance_dims)
        feats = np.concatenate([feats, nuisance_scale * extra], axis=1)
        meta.update(nuisance_dims=nuisance_dims, nuisance_scale=nuisance_scale)
    return _unsplit(feats, labels, 2, "moons", meta)


def make_blobs(n: int, classes: int = 3, spread: float = 0.5, seed: int = 0, radius: float = 3.0) -> SplitDataset:
    """Isotropic 2-D Gaussian clusters centred on a regular polygon with a seeded rotation.

    Class ``k`` gets ``n // classes`` points, plus one if ``k < n % classes``.
    """
    if classes < 2:
        raise ConfigError(f"make_blobs needs classes >= 2, got {classes}")
    if n < classes:
        raise ConfigError(f"need at least one point per class, got n={n}")
    if spread < 0:
        raise ConfigError(f"spread must be >= 0, got {spread}")
    rng = Xoshiro256.derived(seed, "blobs")
    phase = 2.0 * math.pi * rng.random()
    angles = phase + 2.0 * math.pi * np.arange(classes) / classes
    centers = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    counts = [n // classes + (1 if k < n % classes else 0) for k in range(classes)]
    labels = np.concatenate([np.full(c, k, np.int64) for k, c in enumerate(counts)])
    feats = centers[labels]
    if spread > 0:
        feats = feats + spread * rng.normal_array(2 * n).reshape(n, 2)
    return _unsplit(feats, labels, classes, "blobs", {"n": n, "classes": classes, "spread": spread, "seed": seed})


def _read_exact(fh, size, path):
    buf = fh.read(size)
    if len(buf) != size:
        raise IdxTruncatedError(f"{path}: truncated IDX file (wanted {size} bytes, got {len(buf)})")
    return buf


def _read_idx_header(fh, path, expected_magic):
    raw = _read_exact(fh, 4, path)
    (magic,) = struct.unpack(">I", raw)
    if magic != expected_magic:
        raise IdxFormatError(f"{path}: bad IDX magic {raw.hex()} (expected {expected_magic:08x})")
    ndim = magic & 0xFF
    dims = struct.unpack(f">{ndim}I", _read_exact(fh, 4 * ndim, path))
    return dims


def load_idx(images_path, labels_path, limit: int | None = None) -> SplitDataset:
    """Read an MNIST-style IDX image/label pair, scaling pixels to [0, 1].

    When ``limit`` exceeds the number of stored examples every example is
    returned, ``meta["limit_clamped"]`` is set and a warning is emitted.
    """
    with open(images_path, "rb") as fh:
        dims = _read_idx_header(fh, images_path, IDX_IMAGES_MAGIC)
        count = dims[0]
        pixels = int(np.prod(dims[1:]))
        take = count if limit is None else min(limit, count)
        images = np.frombuffer(_read_exact(fh, take * pixels, images_path), dtype=np.uint8)
    with open(labels_path, "rb") as fh:
        (lcount,) = _read_idx_header(fh, labels_path, IDX_LABELS_MAGIC)
        if lcount < take:
            raise IdxTruncatedError(f"{labels_path}: {lcount} labels for {take} images")
        labels = np.frombuffer(_read_exact(fh, take, labels_path), dtype=np.uint8).astype(np.int64)
    clamped = limit is not None and limit > count
    if clamped:
        warnings.warn(f"limit {limit} exceeds the {count} examples in {images_path}; using all", stacklevel=2)
    feats = images.reshape(take, pixels).astype(np.float32) / 255.0
    classes = max(int(labels.max()) + 1 if take else 0, 2)
    return _unsplit(feats, labels, classes, "idx", {"limit_clamped": clamped, "available": count})


def split_forget_retain(ds: SplitDataset, forget_fraction: float, test_fraction: float = 0.0, seed: int = 0) -> SplitDataset:
    """Carve a test split, then a uniformly random forget set out of the training portion.

    Sizes are ``round(test_fraction * n)`` and ``max(1, round(forget_fraction * n_train))``.
    """
    if not 0.0 < forget_fraction < 1.0:
        raise ConfigError(f"forget_fraction must lie in (0, 1), got {forget_fraction}")
    if not 0.0 <= test_fraction < 1.0:
        raise ConfigError(f"test_fraction must lie in [0, 1), got {test_fraction}")
    n = len(ds.labels)
    n_test = int(round(test_fraction * n))
    order = Xoshiro256.derived(seed, "split", "test").permutation(n)
    test = order[:n_test]
    train = np.sort(order[n_test:])
    n_forget = max(1, int(round(forget_fraction * len(train))))
    if n_forget >= len(train):
        raise ConfigError("forget set would swallow the whole training portion")
    pick = Xoshiro256.derived(seed, "split", "forget").permutation(len(train))
    forget = train[pick[:n_forget]]
    retain = train[pick[n_forget:]]
    meta = dict(ds.meta, forget_fraction=forget_fraction, test_fraction=test_fraction, split_seed=seed)
    return replace(ds, forget_idx=forget, retain_idx=retain, test_idx=test, meta=meta)


def corrupt_labels(ds: SplitDataset, idx_set, seed: int = 0) -> np.ndarray:
    """Relabel each index (in ascending order) with a uniformly drawn wrong class.

    Draw ``r = randbelow(classes - 1)``; the new label is ``r`` if
    ``r < original`` else ``r + 1``.
    """
    if ds.classes < 2:
        raise ConfigError("corrupt_labels needs at least two classes")
    labels = ds.labels.copy()
    rng = Xoshiro256.derived(seed, "corrupt")
    for i in np.sort(np.asarray(idx_set, dtype=np.int64)):
        r = rng.randbelow(ds.classes - 1)
        labels[i] = r if r < labels[i] else r + 1
    return labels

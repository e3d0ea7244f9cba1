"""Synthetic confusable-class data, labeled/unlabeled splits, augmentation and batching.

Classes are Gaussian blobs grouped into superclasses: superclass centres sit
on mutually orthogonal directions ``inter_spacing`` away from the origin, and
the classes of one superclass sit ``intra_spacing`` away from their centre,
again along mutually orthogonal directions. Small ``intra_spacing`` makes
sibling classes confusable while superclasses stay well separated.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError


@dataclass(frozen=True)
class BlobConfig:
    n_classes: int = 20
    n_superclasses: int = 5
    dim: int = 16
    per_class: int = 500
    intra_spacing: float = 1.9
    inter_spacing: float = 3.0
    noise: float = 0.8
    warp: float = 0.0          # strength of the invertible nonlinear warp (0 = plain blobs)
    warp_layers: int = 2
    seed: int = 0

    def validate(self):
        if self.n_classes < 2:
            raise ConfigError("need at least 2 classes", "n_classes")
        if self.n_superclasses < 1 or self.n_classes % self.n_superclasses:
            raise ConfigError("n_classes must be divisible by n_superclasses", "n_superclasses")
        per_super = self.n_classes // self.n_superclasses
        if self.dim < max(self.n_superclasses, per_super):
            raise ConfigError("dim must be at least max(n_superclasses, classes per superclass)", "dim")
        if self.per_class < 1:
            raise ConfigError("must be positive", "per_class")
        for name in ("intra_spacing", "inter_spacing", "noise"):
            if not getattr(self, name) > 0:
                raise ConfigError("must be > 0", name)
        if self.warp < 0 or self.warp_layers < 0:
            raise ConfigError("must be >= 0", "warp")
        if self.warp > 0 and self.dim < 2:
            raise ConfigError("warping needs dim >= 2", "dim")


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    superclass_of: np.ndarray
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.superclass_of = np.asarray(self.superclass_of, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise DataFormatError("features and labels disagree in length")

    @property
    def n_classes(self) -> int:
        return len(self.superclass_of)

    @property
    def n_superclasses(self) -> int:
        return int(self.superclass_of.max()) + 1

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def class_means(self) -> np.ndarray:
        return np.stack([self.features[self.labels == c].mean(axis=0) for c in range(self.n_classes)])


def _orthonormal(rng, dim, k):
    q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    return q[:, :k].T


def _coupling_warp(x, rng, strength, layers):
    """Stack of additive coupling layers ``b += s * tanh(a @ W + c)``; each layer
    is a bijection, so class overlap (and the Bayes error) is unchanged."""
    d = x.shape[1]
    half = d // 2
    scale = 1.0 / (x.std() * np.sqrt(half))
    for i in range(layers):
        perm = rng.permutation(d)
        x = x[:, perm]
        a, b = x[:, :half], x[:, half:]
        w = rng.normal(size=(half, d - half)) * scale * 2.0
        c = rng.normal(size=d - half)
        b = b + strength * np.tanh(a @ w + c)
        x = np.concatenate([a, b], axis=1)
    return x


def generate_confusable_blobs(config: BlobConfig = BlobConfig()) -> Dataset:
    config.validate()
    rng = np.random.default_rng(config.seed)
    per_super = config.n_classes // config.n_superclasses
    super_dirs = _orthonormal(rng, config.dim, config.n_superclasses)
    means = np.empty((config.n_classes, config.dim))
    superclass_of = np.repeat(np.arange(config.n_superclasses), per_super)
    for s in range(config.n_superclasses):
        offsets = _orthonormal(rng, config.dim, per_super)
        means[s * per_super:(s + 1) * per_super] = (config.inter_spacing * super_dirs[s]
                                                   + config.intra_spacing * offsets)
    labels = np.repeat(np.arange(config.n_classes), config.per_class)
    features = means[labels] + config.noise * rng.normal(size=(labels.size, config.dim))
    if config.warp > 0 and config.warp_layers > 0:
        features = _coupling_warp(features, np.random.default_rng([config.seed, 1]), config.warp,
                                  config.warp_layers)
    return Dataset(features, labels, superclass_of, seed=config.seed,
                   meta={"generator": "confusable_blobs", **asdict(config)})


# --------------------------------------------------------------------------
# splits


@dataclass
class LabeledSet:
    features: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)


class UnlabeledSet:
    """Unlabeled training samples.

    True labels are kept only for diagnostics; training code reads
    ``features`` and never ``hidden_labels``.
    """

    def __init__(self, features, hidden_labels):
        self.features = np.asarray(features, dtype=np.float64)
        self._labels = np.asarray(hidden_labels, dtype=np.int64)

    def __len__(self):
        return self.features.shape[0]

    def hidden_labels(self, index=None) -> np.ndarray:
        return self._labels if index is None else self._labels[index]


@dataclass
class Split:
    labeled: LabeledSet
    unlabeled: UnlabeledSet
    test: LabeledSet
    superclass_of: np.ndarray
    feature_std: np.ndarray

    @property
    def n_classes(self) -> int:
        return len(self.superclass_of)


def split(dataset: Dataset, labels_per_class: int, seed: int, test_fraction: float = 0.2) -> Split:
    """Stratified test share (fixed by the dataset seed) plus ``labels_per_class``
    labeled samples per class drawn with ``seed``; the rest is unlabeled."""
    if labels_per_class < 1:
        raise ConfigError("must be >= 1", "labels_per_class")
    test_rng = np.random.default_rng([dataset.seed, 7919])
    rng = np.random.default_rng(seed)
    test_idx, lab_idx, unl_idx = [], [], []
    for c in range(dataset.n_classes):
        idx = np.flatnonzero(dataset.labels == c)
        idx = idx[test_rng.permutation(idx.size)]
        n_test = int(round(test_fraction * idx.size))
        test_idx.append(idx[:n_test])
        train = np.sort(idx[n_test:])
        if labels_per_class > train.size:
            raise ConfigError(f"{labels_per_class} labels per class requested but class {c} "
                              f"has only {train.size} training samples", "labels_per_class")
        train = train[rng.permutation(train.size)]
        lab_idx.append(train[:labels_per_class])
        unl_idx.append(train[labels_per_class:])
    test_idx, lab_idx, unl_idx = (np.sort(np.concatenate(a)) for a in (test_idx, lab_idx, unl_idx))
    x, y = dataset.features, dataset.labels
    train_all = np.concatenate([lab_idx, unl_idx])
    std = x[train_all].std(axis=0) if train_all.size > 1 else np.ones(dataset.dim)
    return Split(LabeledSet(x[lab_idx], y[lab_idx]), UnlabeledSet(x[unl_idx], y[unl_idx]),
                 LabeledSet(x[test_idx], y[test_idx]), dataset.superclass_of.copy(), std)


# --------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class Augmenter:
    feature_std: np.ndarray
    weak_noise: float = 0.05
    strong_noise: float = 0.5
    mask_fraction: float = 0.25

    def weak(self, x, rng) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.weak_noise == 0:
            return x.copy()
        return x + rng.normal(size=x.shape) * (self.weak_noise * self.feature_std)

    def strong(self, x, rng) -> np.ndarray:
        x = np.array(x, dtype=np.float64)
        d = x.shape[-1]
        n_mask = int(round(self.mask_fraction * d))
        if n_mask:
            rows = x.reshape(-1, d)
            cols = np.argsort(rng.random(rows.shape), axis=1)[:, :n_mask]
            np.put_along_axis(rows, cols, 0.0, axis=1)
        if self.strong_noise:
            x = x + rng.normal(size=x.shape) * (self.strong_noise * self.feature_std)
        return x


def augment_weak(sample, rng, augmenter: Augmenter):
    return augmenter.weak(sample, rng)


def augment_strong(sample, rng, augmenter: Augmenter):
    return augmenter.strong(sample, rng)


# --------------------------------------------------------------------------
# batching


@dataclass
class LabeledBatch:
    features: np.ndarray
    labels: np.ndarray


@dataclass
class UnlabeledBatch:
    weak: np.ndarray
    strong: np.ndarray
    index: np.ndarray   # rows of the unlabeled set both views come from


class _Cycler:
    def __init__(self, n, rng):
        self.n = n
        self.rng = rng
        self.perm = rng.permutation(n)
        self.pos = 0

    def take(self, k):
        out = np.empty(k, dtype=np.int64)
        filled = 0
        while filled < k:
            if self.pos == self.n:
                self.perm = self.rng.permutation(self.n)
                self.pos = 0
            m = min(k - filled, self.n - self.pos)
            out[filled:filled + m] = self.perm[self.pos:self.pos + m]
            self.pos += m
            filled += m
        return out


class BatchIterator:
    """Infinite stream of (labeled batch, unlabeled weak/strong batch).

    Labeled and unlabeled index streams are reshuffled every epoch and cycled
    independently; a batch larger than what is left in an epoch wraps into
    the next permutation.
    """

    def __init__(self, labeled: LabeledSet, unlabeled: UnlabeledSet, batch_size: int,
                 batch_size_u: int, seed, augmenter: Augmenter):
        if len(labeled) == 0 or len(unlabeled) == 0:
            raise ConfigError("labeled and unlabeled splits must be non-empty", "labels_per_class")
        if batch_size < 1 or batch_size_u < 1:
            raise ConfigError("batch sizes must be positive", "batch_size")
        self.labeled = labeled
        self.unlabeled = unlabeled
        self.batch_size = batch_size
        self.batch_size_u = batch_size_u
        self.augmenter = augmenter
        root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        lab_ss, unl_ss, aug_ss = root.spawn(3)
        self._lab = _Cycler(len(labeled), np.random.default_rng(lab_ss))
        self._unl = _Cycler(len(unlabeled), np.random.default_rng(unl_ss))
        self.aug_rng = np.random.default_rng(aug_ss)

    def __iter__(self):
        return self

    def __next__(self) -> tuple[LabeledBatch, UnlabeledBatch]:
        li = self._lab.take(self.batch_size)
        ui = self._unl.take(self.batch_size_u)
        aug, rng = self.augmenter, self.aug_rng
        xl = aug.weak(self.labeled.features[li], rng)
        src = self.unlabeled.features[ui]
        uw = aug.weak(src, rng)
        us = aug.strong(src, rng)
        return LabeledBatch(xl, self.labeled.labels[li]), UnlabeledBatch(uw, us, ui)

    def get_state(self) -> dict:
        return {
            "lab_perm": self._lab.perm.copy(), "lab_pos": self._lab.pos,
            "lab_rng": self._lab.rng.bit_generator.state,
            "unl_perm": self._unl.perm.copy(), "unl_pos": self._unl.pos,
            "unl_rng": self._unl.rng.bit_generator.state,
            "aug_rng": self.aug_rng.bit_generator.state,
        }

    def set_state(self, state: dict):
        self._lab.perm = np.asarray(state["lab_perm"], dtype=np.int64)
        self._lab.pos = int(state["lab_pos"])
        self._lab.rng.bit_generator.state = state["lab_rng"]
        self._unl.perm = np.asarray(state["unl_perm"], dtype=np.int64)
        self._unl.pos = int(state["unl_pos"])
        self._unl.rng.bit_generator.state = state["unl_rng"]
        self.aug_rng.bit_generator.state = state["aug_rng"]


def batch_iterator(labeled, unlabeled, batch_size, batch_size_u, seed, augmenter) -> BatchIterator:
    return BatchIterator(labeled, unlabeled, batch_size, batch_size_u, seed, augmenter)


# --------------------------------------------------------------------------
# file formats


def save_csv(dataset: Dataset, path, superclass_path=None):
    path = Path(path)
    d = dataset.dim
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{i}" for i in range(d)] + ["label"])
        for row, y in zip(dataset.features, dataset.labels):
            w.writerow([repr(float(v)) for v in row] + [int(y)])
    if superclass_path is not None:
        save_superclass_map(dataset.superclass_of, superclass_path)


def save_superclass_map(superclass_of, path):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "superclass"])
        for c, s in enumerate(superclass_of):
            w.writerow([c, int(s)])


def save_npz(dataset: Dataset, path):
    np.savez(path, features=dataset.features, labels=dataset.labels, superclass_of=dataset.superclass_of)


def _load_superclass_map(path, n_classes):
    path = Path(path)
    mapping = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["class", "superclass"]:
            raise DataFormatError("expected header 'class,superclass'", path, 1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                c, s = int(row[0]), int(row[1])
            except (ValueError, IndexError):
                raise DataFormatError(f"malformed row {row!r}", path, lineno) from None
            mapping[c] = s
    missing = [c for c in range(n_classes) if c not in mapping]
    if missing:
        raise ConfigError(f"classes {missing} have no superclass in {path}", "superclass_map")
    return np.array([mapping[c] for c in range(n_classes)], dtype=np.int64)


def _load_csv(path):
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataFormatError("empty file", path, 1)
        header = [h.strip() for h in header]
        if "label" not in header:
            raise DataFormatError("missing column 'label'", path, 1)
        label_col = header.index("label")
        feat_cols = [i for i, h in enumerate(header) if i != label_col]
        feats, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise DataFormatError(f"expected {len(header)} fields, got {len(row)}", path, lineno)
            try:
                feats.append([float(row[i]) for i in feat_cols])
                labels.append(int(row[label_col]))
            except ValueError as exc:
                raise DataFormatError(str(exc), path, lineno) from None
    if not labels:
        raise DataFormatError("no data rows", path)
    return np.array(feats, dtype=np.float64).reshape(len(labels), len(feat_cols)), np.array(labels)


def load_external(path, format=None, superclass_path=None, seed=0) -> Dataset:
    """Load a dataset from CSV (``f0..f{D-1},label``) or NPZ.

    Without a superclass map every class is its own superclass.
    """
    path = Path(path)
    if not path.exists():
        raise DataFormatError("file not found", path)
    fmt = format or ("npz" if path.suffix == ".npz" else "csv")
    superclass_of = None
    if fmt == "csv":
        x, y = _load_csv(path)
    elif fmt == "npz":
        try:
            with np.load(path) as z:
                x, y = z["features"], z["labels"]
                if "superclass_of" in z:
                    superclass_of = z["superclass_of"]
        except (KeyError, ValueError, OSError) as exc:
            raise DataFormatError(f"not a valid dataset archive: {exc}", path) from None
    else:
        raise ConfigError(f"unknown format {fmt!r}", "format")
    if y.min() < 0:
        raise DataFormatError("negative class label", path)
    n_classes = int(y.max()) + 1
    if superclass_path is not None:
        superclass_of = _load_superclass_map(superclass_path, n_classes)
    if superclass_of is None:
        superclass_of = np.arange(n_classes)
    return Dataset(x, y, superclass_of, seed=seed, meta={"source": str(path)})

"""Tabular datasets: CSV loading, synthetic Gaussian mixtures, stratified splits
and class-frequency bounds for the allocation constraints."""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

UNLABELED = -1


class DatasetError(ValueError):
    """Raised for malformed input data or impossible split requests."""


@dataclass(frozen=True)
class TabularDataset:
    """Feature matrix plus integer labels, ``UNLABELED`` (-1) marking missing ones."""

    features: np.ndarray
    labels: np.ndarray
    class_names: tuple[str, ...]
    feature_names: tuple[str, ...] = ()

    def __post_init__(self):
        features = np.array(self.features, dtype=np.float64)
        labels = np.array(self.labels, dtype=np.int64)
        if features.ndim != 2:
            raise DatasetError(f"features must be 2-D, got shape {features.shape}")
        n, d = features.shape
        if n < 1 or d < 1:
            raise DatasetError(f"need N >= 1 and d >= 1, got N={n}, d={d}")
        if labels.shape != (n,):
            raise DatasetError(f"labels shape {labels.shape} does not match N={n}")
        if len(self.class_names) < 2:
            raise DatasetError("need at least 2 classes")
        if not np.all(np.isfinite(features)):
            row, col = np.argwhere(~np.isfinite(features))[0]
            raise DatasetError(f"non-finite feature at row {row}, column {col}")
        known = labels[labels != UNLABELED]
        if known.size and (known.min() < 0 or known.max() >= len(self.class_names)):
            raise DatasetError("label index outside [0, K-1]")
        features.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if not self.feature_names:
            object.__setattr__(self, "feature_names", tuple(f"x{j}" for j in range(d)))

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def feature_count(self) -> int:
        return self.features.shape[1]

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    @property
    def labeled_mask(self) -> np.ndarray:
        return self.labels != UNLABELED

    def subset(self, indices: Sequence[int]) -> "TabularDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return TabularDataset(self.features[idx], self.labels[idx], self.class_names, self.feature_names)

    def label_map(self) -> dict[str, int]:
        return {name: k for k, name in enumerate(self.class_names)}


class GuardedArray:
    """Read-only array whose every read is logged with a purpose string.

    Used for the values no training step may see (held-out test features and
    the true labels of the unlabeled pool); the run audit inspects ``reads``.
    """

    def __init__(self, values: np.ndarray, name: str):
        arr = np.array(values, copy=True)
        arr.setflags(write=False)
        self._values = arr
        self.name = name
        self.reads: Counter[str] = Counter()

    def read(self, purpose: str) -> np.ndarray:
        self.reads[purpose] += 1
        return self._values

    def __len__(self) -> int:
        return len(self._values)

    def __repr__(self) -> str:
        return f"GuardedArray({self.name!r}, n={len(self)})"


@dataclass
class UnlabeledPool:
    """Unlabeled training samples. True labels, when known, stay behind a guard."""

    features: np.ndarray
    hidden_labels: GuardedArray
    indices: np.ndarray

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]


@dataclass
class HeldOutSet:
    """Test partition; both features and labels are guarded."""

    features: GuardedArray
    labels: GuardedArray
    indices: np.ndarray

    @property
    def n_samples(self) -> int:
        return len(self.labels)


@dataclass
class Split:
    labeled: TabularDataset
    unlabeled: UnlabeledPool
    test: HeldOutSet
    labeled_indices: np.ndarray
    class_names: tuple[str, ...]
    seed: int | None = None

    def to_json(self) -> str:
        payload = {
            "seed": self.seed,
            "label_map": {name: k for k, name in enumerate(self.class_names)},
            "labeled": self.labeled_indices.tolist(),
            "unlabeled": self.unlabeled.indices.tolist(),
            "test": self.test.indices.tolist(),
        }
        return json.dumps(payload, sort_keys=True)


@dataclass(frozen=True)
class ClassFrequencyBounds:
    """Empirical class frequency ``w`` with allocation bounds ``w_minus <= w <= w_plus``."""

    w: np.ndarray
    w_plus: np.ndarray
    w_minus: np.ndarray

    def __post_init__(self):
        w, wp, wm = (np.asarray(a, dtype=np.float64) for a in (self.w, self.w_plus, self.w_minus))
        if not (w.shape == wp.shape == wm.shape and w.ndim == 1):
            raise ValueError("w, w_plus and w_minus must be 1-D arrays of equal length")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"w must be a probability vector, got sum {w.sum()!r}")
        if np.any(wm > w + 1e-12) or np.any(w > wp + 1e-12):
            raise ValueError("bounds must satisfy w_minus <= w <= w_plus")
        if np.any(wm < 0) or wm.sum() > 1.0 + 1e-12:
            raise ValueError("w_minus must be nonnegative with total at most 1")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "w_plus", wp)
        object.__setattr__(self, "w_minus", wm)

    @property
    def class_count(self) -> int:
        return self.w.shape[0]

    def without_lower(self) -> "ClassFrequencyBounds":
        return ClassFrequencyBounds(self.w, self.w_plus, np.zeros_like(self.w_minus))


def estimate_bounds(labels: Iterable[int], slack_factor: float = 1.1,
                    class_count: int | None = None) -> ClassFrequencyBounds:
    """Label frequency ``w`` with ``w_plus = s*w`` (capped at 1) and ``w_minus = (2-s)*w``.

    ``slack_factor=1.1`` gives the usual 1.1w / 0.9w bounds.
    """
    y = np.asarray(list(labels) if not isinstance(labels, np.ndarray) else labels, dtype=np.int64)
    y = y[y != UNLABELED]
    if y.size == 0:
        raise DatasetError("no labeled samples")
    if not 1.0 <= slack_factor <= 2.0:
        raise ValueError(f"slack_factor must lie in [1, 2], got {slack_factor}")
    k = int(y.max()) + 1 if class_count is None else class_count
    counts = np.bincount(y, minlength=k).astype(np.float64)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise DatasetError(f"class {int(empty[0])} has no labeled samples")
    w = counts / counts.sum()
    w_plus = np.minimum(slack_factor * w, 1.0)
    w_minus = np.maximum((2.0 - slack_factor) * w, 0.0)
    return ClassFrequencyBounds(w, w_plus, w_minus)


@dataclass(frozen=True)
class GaussianMixtureSpec:
    class_means: np.ndarray
    noise_variances: np.ndarray
    samples_per_class: tuple[int, ...]

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.class_means, dtype=np.float64))
        var = np.atleast_1d(np.asarray(self.noise_variances, dtype=np.float64))
        counts = tuple(int(c) for c in np.atleast_1d(self.samples_per_class))
        if var.shape != (means.shape[1],):
            raise ValueError(f"need {means.shape[1]} variances, got shape {var.shape}")
        if np.any(var <= 0):
            raise ValueError("noise variances must be strictly positive")
        if len(counts) != means.shape[0] or min(counts) < 1:
            raise ValueError("need one positive sample count per class")
        object.__setattr__(self, "class_means", means)
        object.__setattr__(self, "noise_variances", var)
        object.__setattr__(self, "samples_per_class", counts)


def _class_names(k: int) -> tuple[str, ...]:
    width = len(str(k - 1))
    return tuple(f"class_{i:0{width}d}" for i in range(k))


def sample_gaussian_mixture(spec: GaussianMixtureSpec, seed: int) -> TabularDataset:
    """Draw ``x | y=k ~ N(mu_k, diag(noise_variances))`` for each class block."""
    rng = np.random.default_rng(seed)
    std = np.sqrt(spec.noise_variances)
    blocks, labels = [], []
    for k, (mean, n) in enumerate(zip(spec.class_means, spec.samples_per_class)):
        blocks.append(mean + std * rng.standard_normal((n, mean.shape[0])))
        labels.append(np.full(n, k))
    return TabularDataset(np.vstack(blocks), np.concatenate(labels), _class_names(len(blocks)))


def benchmark_mixture(n_per_class: int, *, n_classes: int = 3, dim: int = 10,
                      separation: float = 2.5, seed: int = 0) -> TabularDataset:
    """Synthetic benchmark: equidistant class means, unit isotropic noise.

    The means are the vertices of a regular simplex with edge ``separation``,
    randomly rotated into ``dim`` dimensions, so every class pair overlaps
    equally. The rotation depends only on ``seed``, so the difficulty does not
    change with the sample size.
    """
    if n_classes > dim:
        raise DatasetError("a regular simplex needs n_classes <= dim")
    rng = np.random.default_rng([seed, 7919])
    basis, _ = np.linalg.qr(rng.standard_normal((dim, n_classes)))
    vertices = basis.T - basis.T.mean(axis=0)
    spec = GaussianMixtureSpec(vertices * separation / np.sqrt(2), np.ones(dim), (n_per_class,) * n_classes)
    return sample_gaussian_mixture(spec, seed)


def _allocate(counts: np.ndarray, total: int, minimum: int) -> np.ndarray:
    """Split ``total`` across classes proportionally (largest remainder), at least ``minimum`` each."""
    k = counts.shape[0]
    if total < minimum * k:
        raise DatasetError(f"cannot place {minimum} sample(s) per class with only {total} slots")
    share = counts / counts.sum() * total
    alloc = np.maximum(np.floor(share).astype(np.int64), minimum)
    order = np.lexsort((np.arange(k), -(share - np.floor(share))))
    i = 0
    while alloc.sum() < total:
        alloc[order[i % k]] += 1
        i += 1
    while alloc.sum() > total:
        # over-allocation only arises from the minimum floor; take from the largest
        j = int(np.argmax(alloc - minimum))
        alloc[j] -= 1
    return alloc


def split(dataset: TabularDataset, n_labeled: int, n_test: int, seed: int) -> Split:
    """Stratified labeled / unlabeled / test partition.

    Rows already unlabeled in ``dataset`` always go to the unlabeled pool, with
    an unknown hidden label.
    """
    if n_labeled < 1 or n_test < 0:
        raise DatasetError("n_labeled must be >= 1 and n_test >= 0")
    if n_labeled + n_test > dataset.n_samples:
        raise DatasetError(
            f"n_labeled + n_test = {n_labeled + n_test} exceeds N = {dataset.n_samples}")
    rng = np.random.default_rng(seed)
    labels = dataset.labels
    k = dataset.class_count
    known = np.flatnonzero(labels != UNLABELED)
    counts = np.bincount(labels[known], minlength=k)
    if n_labeled + n_test > known.size:
        raise DatasetError("not enough labeled rows for the requested labeled and test sizes")
    lab_alloc = _allocate(counts, n_labeled, 1)
    test_alloc = _allocate(counts, n_test, 0) if n_test else np.zeros(k, dtype=np.int64)
    lab_idx, test_idx = [], []
    for c in range(k):
        members = np.flatnonzero(labels == c)
        if lab_alloc[c] + test_alloc[c] > members.size:
            raise DatasetError(
                f"class {dataset.class_names[c]!r} has {members.size} samples, "
                f"needs {lab_alloc[c]} labeled + {test_alloc[c]} test")
        members = rng.permutation(members)
        lab_idx.append(members[:lab_alloc[c]])
        test_idx.append(members[lab_alloc[c]:lab_alloc[c] + test_alloc[c]])
    lab = np.sort(np.concatenate(lab_idx))
    test = np.sort(np.concatenate(test_idx))
    taken = np.zeros(dataset.n_samples, dtype=bool)
    taken[lab] = True
    taken[test] = True
    unl = np.flatnonzero(~taken)

    unlabeled = UnlabeledPool(
        features=dataset.features[unl].copy(),
        hidden_labels=GuardedArray(labels[unl], "unlabeled_true_labels"),
        indices=unl,
    )
    held_out = HeldOutSet(
        features=GuardedArray(dataset.features[test], "test_features"),
        labels=GuardedArray(labels[test], "test_labels"),
        indices=test,
    )
    return Split(dataset.subset(lab), unlabeled, held_out, lab, dataset.class_names, seed)


def subsample_unlabeled(sp: Split, count: int, seed: int) -> Split:
    """Copy of ``sp`` whose unlabeled pool keeps ``count`` random samples.

    For one ``seed`` the kept pools are nested: a smaller count keeps a prefix
    of the same permutation. Labeled and test partitions are shared.
    """
    n = sp.unlabeled.n_samples
    if not 0 <= count <= n:
        raise DatasetError(f"cannot keep {count} of {n} unlabeled samples")
    keep = np.sort(np.random.default_rng(seed).permutation(n)[:count])
    pool = sp.unlabeled
    unlabeled = UnlabeledPool(
        features=pool.features[keep].copy(),
        hidden_labels=GuardedArray(pool.hidden_labels._values[keep], pool.hidden_labels.name),
        indices=pool.indices[keep],
    )
    return Split(sp.labeled, unlabeled, sp.test, sp.labeled_indices, sp.class_names, sp.seed)


@dataclass
class Standardizer:
    """Per-column zero-mean / unit-variance scaling fitted on the labeled set."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray) -> "Standardizer":
        mean = features.mean(axis=0)
        scale = features.std(axis=0)
        scale = np.where(scale > 1e-12, scale, 1.0)
        return cls(mean, scale)

    @classmethod
    def identity(cls, dim: int) -> "Standardizer":
        return cls(np.zeros(dim), np.ones(dim))

    def transform(self, features: np.ndarray) -> np.ndarray:
        return (features - self.mean) / self.scale


def load_csv(path: str | Path, label_column: str, unlabeled_marker: str = "?") -> TabularDataset:
    """Read a headered UTF-8 CSV; every column except ``label_column`` is a feature.

    Label cells equal to ``unlabeled_marker`` or empty become ``UNLABELED``.
    Class indices follow the sorted order of the distinct label strings.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        if label_column not in header:
            raise DatasetError(f"{path}: missing label column {label_column!r}")
        label_pos = header.index(label_column)
        feature_cols = [j for j in range(len(header)) if j != label_pos]
        if not feature_cols:
            raise DatasetError(f"{path}: no feature columns")
        rows, raw_labels = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DatasetError(f"{path}:{line_no}: expected {len(header)} cells, got {len(row)}")
            values = []
            for j in feature_cols:
                cell = row[j].strip()
                try:
                    v = float(cell)
                except ValueError:
                    raise DatasetError(
                        f"{path}:{line_no}: non-numeric value {cell!r} in column {header[j]!r}") from None
                if not math.isfinite(v):
                    raise DatasetError(
                        f"{path}:{line_no}: non-finite value {cell!r} in column {header[j]!r}")
                values.append(v)
            rows.append(values)
            raw_labels.append(row[label_pos].strip())
    if not rows:
        raise DatasetError(f"{path}: no data rows")
    names = sorted({s for s in raw_labels if s not in (unlabeled_marker, "")})
    if len(names) < 2:
        raise DatasetError(f"{path}: fewer than 2 distinct labels")
    index = {s: k for k, s in enumerate(names)}
    labels = [index.get(s, UNLABELED) for s in raw_labels]
    return TabularDataset(np.array(rows), np.array(labels), tuple(names),
                          tuple(header[j] for j in feature_cols))


def write_csv(dataset: TabularDataset, path: str | Path, label_column: str = "label",
              unlabeled_marker: str = "?") -> None:
    """Write ``dataset`` so that ``load_csv`` reproduces it exactly."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([*dataset.feature_names, label_column])
        for x, y in zip(dataset.features, dataset.labels):
            name = unlabeled_marker if y == UNLABELED else dataset.class_names[y]
            writer.writerow([repr(float(v)) for v in x] + [name])

"""Synthetic dataset construction, corruption, and CSV ingestion.

Desk-scale stand-ins for image benchmarks: Gaussian mixtures with simplex
means and two-moons, plus label-noise injection (uniform or boundary-
proximity dependent) and exponential class-skew subsampling. Everything is
a pure function of its arguments including the seed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    features: np.ndarray  # [n_instances, n_features]
    labels: np.ndarray    # [n_instances] int class indices
    n_classes: int
    provenance: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise DataError("features must be [n, d] with one label per row")
        if len(self.features) < 1:
            raise DataError("dataset must contain at least one instance")
        if not np.all(np.isfinite(self.features)):
            raise DataError("non-finite feature value")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DataError(f"label outside [0, {self.n_classes})")

    def __len__(self):
        return len(self.labels)

    def subset(self, indices, provenance=None):
        idx = np.asarray(indices, dtype=np.intp)
        return Dataset(self.features[idx], self.labels[idx], self.n_classes,
                       provenance if provenance is not None else self.provenance)


@dataclass
class NoiseSpec:
    kind: str  # "uniform_flip" | "instance_dependent"
    rate: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("uniform_flip", "instance_dependent"):
            raise DataError(f"unknown noise kind {self.kind!r}")
        if not 0.0 <= self.rate <= 1.0:
            raise DataError("noise rate must lie in [0, 1]")


@dataclass
class SkewSpec:
    ratio: float  # max-to-min class frequency, >= 1
    seed: int = 0

    def __post_init__(self):
        if self.ratio < 1.0:
            raise DataError("skew ratio must be >= 1")


def _simplex_means(n_classes, dim, separation):
    """Class means at pairwise distance `separation`: scaled basis vectors."""
    if dim < n_classes:
        raise DataError(f"dim {dim} too small for {n_classes} simplex means")
    means = np.zeros((n_classes, dim))
    scale = separation / np.sqrt(2.0)
    for c in range(n_classes):
        means[c, c] = scale
    return means


def make_gaussian_mixture(n_per_class, n_classes, dim, separation, seed):
    """Isotropic unit-variance Gaussian blobs with simplex-placed means."""
    if n_per_class < 1 or n_classes < 1 or dim < 1:
        raise DataError("counts must be positive")
    if separation < 0:
        raise DataError("separation must be nonnegative")
    rng = np.random.default_rng(seed)
    means = _simplex_means(n_classes, dim, separation)
    feats = []
    labels = []
    for c in range(n_classes):
        feats.append(means[c] + rng.standard_normal((n_per_class, dim)))
        labels.append(np.full(n_per_class, c, dtype=np.int64))
    return Dataset(np.vstack(feats), np.concatenate(labels), n_classes,
                   provenance=f"gauss(npc={n_per_class},c={n_classes},d={dim},sep={separation},seed={seed})")


def make_two_moons(n, noise_std, seed):
    """Interleaved half-circles; n//2 in the lower moon, the rest in the upper."""
    if n < 2:
        raise DataError("need at least 2 instances")
    if noise_std < 0:
        raise DataError("noise_std must be nonnegative")
    rng = np.random.default_rng(seed)
    n0 = n // 2
    n1 = n - n0
    t0 = np.linspace(0.0, np.pi, n0)
    t1 = np.linspace(0.0, np.pi, n1)
    x0 = np.column_stack([np.cos(t0), np.sin(t0)])
    x1 = np.column_stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)])
    feats = np.vstack([x0, x1]) + noise_std * rng.standard_normal((n, 2))
    labels = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    return Dataset(feats, labels, 2, provenance=f"moons(n={n},std={noise_std},seed={seed})")


def inject_noise(d, spec):
    """Return a copy of `d` with labels corrupted per `spec`; features untouched."""
    if spec.rate > 0.5:
        raise DataError("noise rate above 0.5 would dominate the label signal")
    rng = np.random.default_rng(spec.seed)
    labels = d.labels.copy()
    n = len(d)
    if spec.rate == 0.0 or d.n_classes < 2:
        flipped = np.zeros(n, dtype=bool)
    elif spec.kind == "uniform_flip":
        k = int(round(spec.rate * n))
        chosen = rng.choice(n, size=k, replace=False)
        offsets = rng.integers(1, d.n_classes, size=k)
        labels[chosen] = (labels[chosen] + offsets) % d.n_classes
        flipped = np.zeros(n, dtype=bool)
        flipped[chosen] = True
    else:
        # Flip probability grows linearly with boundary-proximity rank: the
        # closer an instance sits to the nearest other-class mean relative to
        # its own, the likelier the flip. Mean flip probability equals rate.
        means = np.vstack([d.features[d.labels == c].mean(axis=0) for c in range(d.n_classes)])
        dists = np.linalg.norm(d.features[:, None, :] - means[None, :, :], axis=2)
        own = dists[np.arange(n), d.labels]
        masked = dists.copy()
        masked[np.arange(n), d.labels] = np.inf
        nearest_other = masked.argmin(axis=1)
        gap = masked[np.arange(n), nearest_other] - own
        order = np.argsort(np.argsort(gap, kind="stable"), kind="stable")  # rank 0 = closest to boundary
        probs = 2.0 * spec.rate * (n - order) / (n + 1)
        do_flip = rng.random(n) < probs
        labels[do_flip] = nearest_other[do_flip]
        flipped = do_flip
    out = Dataset(d.features.copy(), labels, d.n_classes,
                  provenance=f"{d.provenance}+noise({spec.kind},{spec.rate},seed={spec.seed})")
    out.flipped = flipped  # which rows were corrupted; used by noise analyses
    return out


def skew_keep_fractions(ratio, n_classes):
    """Exponential retention profile from 1 (class 0) down to 1/ratio."""
    if n_classes == 1:
        return np.ones(1)
    exponents = np.arange(n_classes) / (n_classes - 1)
    return ratio ** (-exponents)


def apply_skew(d, spec):
    """Subsample classes to an exponential long-tail profile (class 0 largest)."""
    fracs = skew_keep_fractions(spec.ratio, d.n_classes)
    rng = np.random.default_rng(spec.seed)
    keep = []
    for c in range(d.n_classes):
        idx = np.flatnonzero(d.labels == c)
        k = int(round(len(idx) * fracs[c]))
        if k < 1:
            raise DataError(f"skew ratio {spec.ratio} would empty class {c}")
        keep.append(rng.choice(idx, size=k, replace=False))
    kept = np.sort(np.concatenate(keep))
    return Dataset(d.features[kept], d.labels[kept], d.n_classes,
                   provenance=f"{d.provenance}+skew({spec.ratio},seed={spec.seed})")


def save_csv(d, path):
    """Write `f0,...,fk,label` rows; newline-terminated UTF-8."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        dim = d.features.shape[1]
        writer.writerow([f"f{i}" for i in range(dim)] + ["label"])
        for row, label in zip(d.features, d.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


def load_csv(path):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: no rows")
        if len(header) < 2 or header[-1] != "label":
            raise DataError(f"{path}: expected header f0,...,fk,label")
        dim = len(header) - 1
        feats, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != dim + 1:
                raise DataError(f"{path}:{lineno}: expected {dim + 1} columns, got {len(row)}")
            try:
                feats.append([float(v) for v in row[:-1]])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric feature value")
            try:
                labels.append(int(row[-1]))
            except ValueError:
                raise DataError(f"{path}:{lineno}: label column must be an integer")
        if not feats:
            raise DataError(f"{path}: no rows")
    labels = np.array(labels, dtype=np.int64)
    if labels.min() < 0:
        raise DataError(f"{path}: negative label")
    return Dataset(np.array(feats), labels, int(labels.max()) + 1, provenance=str(path))

"""Probabilistic margins and the train-twice carving of validation sets.

The margin of an instance is the softmax probability of its label minus the
largest other-class probability, in [-1, 1]; negative iff misclassified.
Hard/easy/random variants carve the lowest-margin, highest-margin, or a
seeded uniform subset into validation, with ties broken by ascending
instance index.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .models import classifier_forward


class SplitError(ValueError):
    pass


@dataclass
class MarginRecord:
    instance_index: int
    margin: float


@dataclass
class SplitAssignment:
    train_indices: np.ndarray
    val_indices: np.ndarray
    delta_realized: float

    def __post_init__(self):
        self.train_indices = np.asarray(self.train_indices, dtype=np.intp)
        self.val_indices = np.asarray(self.val_indices, dtype=np.intp)
        both = np.concatenate([self.train_indices, self.val_indices])
        if len(np.unique(both)) != len(both):
            raise SplitError("train and validation indices overlap")


def margins_from_probs(probs, labels):
    """Margin vector from softmax probabilities [n x c] and labels [n]."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    n = len(labels)
    own = probs[np.arange(n), labels]
    masked = probs.copy()
    masked[np.arange(n), labels] = -np.inf
    return own - masked.max(axis=1)


def probabilistic_margin(model, params, d):
    """Per-instance margin records under `model`, preserving dataset order."""
    logits = classifier_forward(model, params, d.features)
    if logits.shape[1] != d.n_classes:
        raise SplitError(
            f"classifier emits {logits.shape[1]} classes, dataset has {d.n_classes}")
    z = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(z)
    probs /= probs.sum(axis=1, keepdims=True)
    m = margins_from_probs(probs, d.labels)
    return [MarginRecord(i, float(v)) for i, v in enumerate(m)]


def carve_split(margins, variant, delta, seed=0):
    """Carve floor(delta*n) instances into validation by margin rank.

    hard: lowest margins; easy: highest; random: seeded uniform draw.
    Equal margins are broken by ascending instance index, so the result is
    invariant to input permutation of the records.
    """
    if not 0.0 < delta < 1.0:
        raise SplitError(f"delta must lie in (0, 1), got {delta}")
    n = len(margins)
    k = int(np.floor(delta * n))
    if k < 1:
        raise SplitError(f"delta {delta} selects no validation instances for n={n}")
    idx = np.array([r.instance_index for r in margins], dtype=np.intp)
    vals = np.array([r.margin for r in margins])
    order = np.lexsort((idx, vals))  # ascending margin, ties by index
    if variant == "hard":
        val = idx[order[:k]]
    elif variant == "easy":
        val = idx[order[-k:]]
    elif variant == "random":
        rng = np.random.default_rng(seed)
        val = np.sort(idx)[rng.choice(n, size=k, replace=False)]
    else:
        raise SplitError(f"unknown variant {variant!r}")
    val = np.sort(val)
    train = np.setdiff1d(idx, val)
    return SplitAssignment(train, val, k / n)


def stratified_guard(a, d, margins=None):
    """Swap one validation member back per class missing from the train split.

    Keeps every class represented in training at toy scale; the member with
    the smallest absolute margin (closest to the boundary) is returned first.
    """
    counts = np.bincount(d.labels[a.train_indices], minlength=d.n_classes)
    if np.all(counts > 0):
        return a
    margin_of = {}
    if margins is not None:
        margin_of = {r.instance_index: r.margin for r in margins}
    train = list(a.train_indices)
    val = list(a.val_indices)
    for c in np.flatnonzero(counts == 0):
        candidates = [i for i in val if d.labels[i] == c]
        if not candidates:
            raise SplitError(f"class {c} absent from both splits; cannot repair")
        pick = min(candidates, key=lambda i: (abs(margin_of.get(i, 0.0)), i))
        val.remove(pick)
        train.append(pick)
    if not val:
        raise SplitError("stratified guard emptied the validation split")
    n = len(d)
    return SplitAssignment(np.sort(train), np.sort(val), len(val) / n)


def save_split(a, margins, path):
    """CSV of (instance_index, membership, margin)."""
    margin_of = {r.instance_index: r.margin for r in margins}
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["instance_index", "membership", "margin"])
        rows = [(int(i), "train", margin_of.get(int(i))) for i in a.train_indices]
        rows += [(int(i), "val", margin_of.get(int(i))) for i in a.val_indices]
        for i, membership, m in sorted(rows):
            writer.writerow([i, membership, repr(m) if m is not None else ""])


def load_split(path):
    train, val = [], []
    margins = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["instance_index", "membership"]:
            raise SplitError(f"{path}: not a split file")
        for row in reader:
            i = int(row[0])
            (train if row[1] == "train" else val).append(i)
            if len(row) > 2 and row[2]:
                margins.append(MarginRecord(i, float(row[2])))
    n = len(train) + len(val)
    return SplitAssignment(np.array(train), np.array(val), len(val) / n), margins

"""Exhaustive finite-instance oracles for the split-selection equivalence.

Three exact values over a finite point set, a finite hypothesis list, and
0/1 loss:

* dual_dro:  max over validation subsets of the min-over-hypotheses loss
  on the subset.
* trilevel:  outer max over subsets; middle min over per-train-point weight
  assignments from a discrete grid; inner argmin-over-hypotheses of the
  weighted train loss (ties resolved to the first listed hypothesis); the
  subset's value is the induced hypothesis's loss on the subset.
* dro:       min over hypotheses of the max-over-subsets loss (the minimax
  counterpart; always >= dual_dro by weak duality).

Everything is computed by enumeration within an explicit budget; values are
exact integers.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np


class OracleBudgetError(ValueError):
    pass


MAX_POINTS = 14
MAX_WEIGHTINGS = 1 << 17  # grid^train_size cap for the trilevel enumeration


@dataclass
class FiniteInstance:
    points: list            # [(x, y)] with hashable x and int class y
    hypotheses: list        # each: list of predicted classes, one per point
    delta: float

    def __post_init__(self):
        n = len(self.points)
        if n > MAX_POINTS:
            raise OracleBudgetError(f"{n} points exceeds the enumeration budget of {MAX_POINTS}")
        if self.subset_size < 1:
            raise ValueError(f"delta {self.delta} selects no validation points for n={n}")
        for h in self.hypotheses:
            if len(h) != n:
                raise ValueError("hypothesis truth table length must equal the point count")

    @property
    def n(self):
        return len(self.points)

    @property
    def subset_size(self):
        return int(math.floor(self.delta * len(self.points)))

    def error_matrix(self):
        """0/1 matrix [hypothesis x point]: 1 where the prediction is wrong."""
        labels = np.array([y for _, y in self.points])
        preds = np.array(self.hypotheses)
        return (preds != labels[None, :]).astype(np.int64)


@dataclass
class OracleResult:
    dual_dro_value: int
    trilevel_value: int | None
    argmax_subset: tuple
    per_subset_min_losses: list  # [(subset, min loss, argmin hypothesis)]


def _subsets(n, k):
    return itertools.combinations(range(n), k)


def dual_dro_exhaustive(inst):
    """max over size-k subsets of min-over-hypotheses subset loss."""
    e = inst.error_matrix()
    k = inst.subset_size
    best_value, best_subset = -1, None
    table = []
    for subset in _subsets(inst.n, k):
        losses = e[:, subset].sum(axis=1)
        h = int(losses.argmin())
        v = int(losses[h])
        table.append((subset, v, h))
        if v > best_value:
            best_value, best_subset = v, subset
    return OracleResult(best_value, None, best_subset, table)


def _weight_matrix(grid, width):
    cols = np.meshgrid(*([np.asarray(sorted(grid), dtype=np.int64)] * width),
                       indexing="ij")
    return np.stack([c.ravel() for c in cols], axis=1) if width else np.zeros((1, 0), dtype=np.int64)


def trilevel_exhaustive(inst, weight_grid=(0, 1, 2, 4)):
    """Exact tri-level value by full enumeration over subsets and weightings.

    Per subset: every grid weighting of the train side induces the
    first-listed minimizer of the weighted train loss; the middle level
    keeps the weighting whose induced hypothesis has the smallest subset
    loss; the outer level maximizes over subsets.
    """
    grid = sorted(set(int(w) for w in weight_grid))
    if not grid or grid[-1] <= 0:
        raise ValueError("weight grid needs at least one positive value")
    if any(w < 0 for w in grid):
        raise ValueError("weights must be nonnegative")
    k = inst.subset_size
    train_size = inst.n - k
    n_weightings = len(grid) ** train_size
    if n_weightings > MAX_WEIGHTINGS:
        raise OracleBudgetError(
            f"{len(grid)}^{train_size} weightings exceed the budget of {MAX_WEIGHTINGS}")
    e = inst.error_matrix()
    w_all = _weight_matrix(grid, train_size)
    best = -1
    for subset in _subsets(inst.n, k):
        train = [i for i in range(inst.n) if i not in subset]
        weighted = w_all @ e[:, train].T          # [weighting x hypothesis]
        induced = weighted.argmin(axis=1)         # first listed wins ties
        val_losses = e[:, subset].sum(axis=1)
        value = int(val_losses[induced].min())
        if value > best:
            best = value
    return best


def dro_exhaustive(inst):
    """min over hypotheses of max-over-subsets subset loss."""
    e = inst.error_matrix()
    k = inst.subset_size
    worst = np.full(len(inst.hypotheses), -1, dtype=np.int64)
    for subset in _subsets(inst.n, k):
        losses = e[:, subset].sum(axis=1)
        worst = np.maximum(worst, losses)
    return int(worst.min())


def inducible_mask(error_train):
    """Which hypotheses some zero-containing grid weighting can induce.

    A hypothesis is inducible exactly when no earlier-listed hypothesis has
    its train errors nested inside this one's: the witness weighting puts
    weight on the points the hypothesis gets right and zero elsewhere.
    """
    h = len(error_train)
    mask = np.ones(h, dtype=bool)
    for j in range(h):
        for i in range(j):
            if np.all(error_train[i] <= error_train[j]):
                mask[j] = False
                break
    return mask


def equality_precondition_holds(inst):
    """True when every subset's complement can induce a subset-loss minimizer.

    Checked analytically via the nested-error dominance rule, independently
    of the grid enumeration in trilevel_exhaustive. Instances passing this
    check satisfy trilevel == dual_dro for any grid containing 0 and a
    positive weight.
    """
    e = inst.error_matrix()
    k = inst.subset_size
    for subset in _subsets(inst.n, k):
        train = [i for i in range(inst.n) if i not in subset]
        val_losses = e[:, subset].sum(axis=1)
        mask = inducible_mask(e[:, train])
        if int(val_losses[mask].min()) != int(val_losses.min()):
            return False
    return True


def random_instance(rng, n, n_classes, n_hypotheses, delta):
    """Uniformly random labels and hypothesis truth tables."""
    points = [(i, int(rng.integers(n_classes))) for i in range(n)]
    hyps = [[int(rng.integers(n_classes)) for _ in range(n)]
            for _ in range(n_hypotheses)]
    return FiniteInstance(points, hyps, delta)


def save_instance(inst, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"points": [[x, y] for x, y in inst.points],
                   "hypotheses": inst.hypotheses,
                   "delta": inst.delta}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_instance(path):
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    return FiniteInstance([(p[0], int(p[1])) for p in raw["points"]],
                          [list(map(int, h)) for h in raw["hypotheses"]],
                          float(raw["delta"]))


def save_result_csv(result, path):
    import csv
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["subset", "min_loss", "argmin_hypothesis"])
        for subset, v, h in result.per_subset_min_losses:
            writer.writerow([" ".join(map(str, subset)), v, h])

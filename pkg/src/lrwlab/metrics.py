"""Evaluation and report assembly: accuracy, paired margin deltas, ordering.

Margins use the same probabilistic definition as the hardness module; an
instance counts as correct exactly when its margin is strictly positive, so
accuracy and the margin sign test always agree. Histograms use half-open
[lo, hi) bins of width 0.2; the top edge value is folded into the last bin.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .hardness import MarginRecord, probabilistic_margin

BIN_WIDTH = 0.2
DELTA_RANGE = (-2.0, 2.0)
MARGIN_RANGE = (-1.0, 1.0)


class MetricsError(ValueError):
    pass


def evaluate(model, params, test):
    """(accuracy, margin records) on a held-out dataset."""
    records = probabilistic_margin(model, params, test)
    margins = np.array([r.margin for r in records])
    accuracy = float(np.mean(margins > 0.0))
    return accuracy, records


def bucket_index(value, lo, width=BIN_WIDTH):
    """Half-open bucket index with edge values snapped to 1e-9."""
    return int(np.floor(round((value - lo) / width, 9)))


def _bin_edges(lo, hi, width=BIN_WIDTH):
    n = int(round((hi - lo) / width))
    return [round(lo + i * width, 10) for i in range(n + 1)]


def paired_margin_delta(a, b):
    """Histogram and summary of per-instance margin differences a - b."""
    if len(a) != len(b):
        raise MetricsError(f"record lists differ in length: {len(a)} vs {len(b)}")
    deltas = np.array([ra.margin - rb.margin for ra, rb in zip(a, b)])
    lo, hi = DELTA_RANGE
    nbins = int(round((hi - lo) / BIN_WIDTH))
    counts = [0] * nbins
    for v in deltas:
        counts[min(max(bucket_index(v, lo), 0), nbins - 1)] += 1
    return {
        "bin_edges": _bin_edges(lo, hi),
        "counts": counts,
        "delta_mean": float(deltas.mean()),
        "delta_median": float(np.median(deltas)),
        "n": len(deltas),
    }


def margin_gain_by_bucket(target, erm):
    """Mean margin gain of `target` over `erm`, bucketed by the ERM margin.

    Per bucket: mean(target - erm), SEM (absent below 2 samples), count.
    """
    if len(target) != len(erm):
        raise MetricsError(f"record lists differ in length: {len(target)} vs {len(erm)}")
    lo, hi = MARGIN_RANGE
    nbins = int(round((hi - lo) / BIN_WIDTH))
    gains = [[] for _ in range(nbins)]
    for rt, re in zip(target, erm):
        idx = min(max(bucket_index(re.margin, lo), 0), nbins - 1)
        gains[idx].append(rt.margin - re.margin)
    rows = []
    edges = _bin_edges(lo, hi)
    for i, g in enumerate(gains):
        arr = np.array(g)
        sem = float(arr.std(ddof=1) / np.sqrt(len(arr))) if len(arr) >= 2 else None
        rows.append({"bucket_lo": edges[i], "bucket_hi": edges[i + 1],
                     "count": len(g),
                     "mean_gain": float(arr.mean()) if len(g) else None,
                     "sem": sem})
    return rows


ORDERED_VARIANTS = ("lrw_easy", "lrw_random", "lrw_hard")


def ordering_check(results):
    """Verdict on mean accuracy ordering easy < random < hard.

    `results` maps variant name to a per-seed accuracy list; the seed lists
    must be matched (equal length, same seed order).
    """
    missing = [v for v in ORDERED_VARIANTS if v not in results]
    if missing:
        raise MetricsError(f"ordering_check: missing variants {missing}")
    lengths = {v: len(results[v]) for v in ORDERED_VARIANTS}
    if len(set(lengths.values())) != 1 or min(lengths.values()) < 2:
        raise MetricsError(f"ordering_check: need >= 2 matched seeds per variant, got {lengths}")
    stats = {}
    for v in ORDERED_VARIANTS:
        arr = np.array(results[v], dtype=np.float64)
        stats[v] = {"mean": float(arr.mean()),
                    "sem": float(arr.std(ddof=1) / np.sqrt(len(arr)))}
    means = [stats[v]["mean"] for v in ORDERED_VARIANTS]
    holds = means[0] < means[1] < means[2]
    wins = {}
    for a, b in (("lrw_random", "lrw_easy"), ("lrw_hard", "lrw_random"),
                 ("lrw_hard", "lrw_easy")):
        wins[f"{a}>{b}"] = int(np.sum(np.array(results[a]) > np.array(results[b])))
    return {"per_variant": stats,
            "ordering_holds": bool(holds),
            "verdict": "ordered" if holds else ("tie" if len(set(means)) < 3 else "violated"),
            "paired_wins": wins,
            "seeds": lengths[ORDERED_VARIANTS[0]]}


@dataclass
class MetricsReport:
    model_tag: str
    test_accuracy: float
    mean_margin: float
    paired_margin_deltas: dict | None = None
    delta_mean: float | None = None
    delta_median: float | None = None
    seeds_aggregated: int = 1
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "model_tag": self.model_tag,
            "test_accuracy": self.test_accuracy,
            "mean_margin": self.mean_margin,
            "paired_margin_deltas": self.paired_margin_deltas,
            "delta_mean": self.delta_mean,
            "delta_median": self.delta_median,
            "seeds_aggregated": self.seeds_aggregated,
            "extra": self.extra,
        }

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        return cls(**raw)


def build_report(model_tag, model, params, test, erm_records=None):
    accuracy, records = evaluate(model, params, test)
    margins = np.array([r.margin for r in records])
    report = MetricsReport(model_tag, accuracy, float(margins.mean()))
    if erm_records is not None:
        hist = paired_margin_delta(records, erm_records)
        report.paired_margin_deltas = hist
        report.delta_mean = hist["delta_mean"]
        report.delta_median = hist["delta_median"]
    return report, records


def save_margins_csv(records, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["instance_index", "margin"])
        for r in records:
            writer.writerow([r.instance_index, repr(r.margin)])


def save_histogram_csv(hist, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, c in zip(hist["bin_edges"][:-1], hist["bin_edges"][1:], hist["counts"]):
            writer.writerow([repr(lo), repr(hi), c])


def save_buckets_csv(rows, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["bucket_lo", "bucket_hi", "count", "mean_gain", "sem"])
        for r in rows:
            writer.writerow([repr(r["bucket_lo"]), repr(r["bucket_hi"]), r["count"],
                             "" if r["mean_gain"] is None else repr(r["mean_gain"]),
                             "" if r["sem"] is None else repr(r["sem"])])

import json

import numpy as np
import pytest

from lrwlab import datagen as dg
from lrwlab import metrics as mt
from lrwlab import models as md
from lrwlab.hardness import MarginRecord


def _recs(values):
    return [MarginRecord(i, float(v)) for i, v in enumerate(values)]


def test_accuracy_counts_strictly_positive_margins():
    # a zero-margin tie counts as incorrect by convention
    d = dg.make_gaussian_mixture(10, 2, 2, 2.0, seed=1)
    model = md.Mlp([2, 4, 2])
    acc, records = mt.evaluate(model, md.ParamSet(model.segments()), d)
    assert acc == 0.0  # zero net: uniform softmax, all margins exactly 0
    assert all(r.margin == 0.0 for r in records)


def test_accuracy_matches_argmax_on_trained_weights():
    d = dg.make_gaussian_mixture(50, 2, 2, 3.0, seed=1)
    model = md.Mlp([2, 8, 2])
    params = model.init(3)
    acc, _ = mt.evaluate(model, params, d)
    logits = md.classifier_forward(model, params, d.features)
    expect = np.mean(logits.argmax(axis=1) == d.labels)
    # ties are measure-zero for random continuous logits
    assert acc == pytest.approx(expect)


def test_bucket_index_interior_and_edges():
    assert mt.bucket_index(-2.0, -2.0) == 0
    assert mt.bucket_index(-1.9, -2.0) == 0
    assert mt.bucket_index(-1.8, -2.0) == 1  # half-open: edge goes up
    assert mt.bucket_index(0.0, -2.0) == 10
    assert mt.bucket_index(1.99, -2.0) == 19


def test_bucket_index_float_edge_snapping():
    # 0.6 - (-1.0) = 1.5999999999999999 in float; snapping must land bin 8
    assert mt.bucket_index(0.6, -1.0) == 8
    assert mt.bucket_index(0.6 - 1e-12, -1.0) == 8
    assert mt.bucket_index(0.6 - 1e-6, -1.0) == 7


def test_paired_margin_delta_hand_counts():
    a = _recs([0.5, -0.5, 0.1, 0.9])
    b = _recs([0.0, 0.0, 0.0, 1.0])
    hist = mt.paired_margin_delta(a, b)
    deltas = [0.5, -0.5, 0.1, -0.1]
    assert hist["n"] == 4
    assert hist["delta_mean"] == pytest.approx(0.0)
    assert hist["delta_median"] == pytest.approx(0.0)
    assert sum(hist["counts"]) == 4
    assert len(hist["counts"]) == 20
    # deltas fall in bins [0.4,0.6), [-0.6,-0.4), [0.0,0.2), [-0.2,0.0)
    assert hist["counts"][12] == 1
    assert hist["counts"][7] == 1
    assert hist["counts"][10] == 1
    assert hist["counts"][9] == 1


def test_paired_margin_delta_clamps_to_edge_bins():
    hist = mt.paired_margin_delta(_recs([1.0]), _recs([-1.0]))
    assert hist["counts"][19] == 1  # +2.0 folded into the top bin
    hist = mt.paired_margin_delta(_recs([-1.0]), _recs([1.0]))
    assert hist["counts"][0] == 1


def test_paired_margin_delta_length_mismatch():
    with pytest.raises(mt.MetricsError):
        mt.paired_margin_delta(_recs([0.1]), _recs([0.1, 0.2]))


def test_margin_gain_by_bucket_hand_example():
    erm = _recs([-0.95, -0.95, 0.15, 0.95])
    target = _recs([-0.55, -0.75, 0.15, 0.90])
    rows = mt.margin_gain_by_bucket(target, erm)
    assert len(rows) == 10
    first = rows[0]  # erm margins -0.95 land in [-1.0, -0.8)
    assert first["count"] == 2
    assert first["mean_gain"] == pytest.approx(0.3)
    # independent SEM oracle: std([0.4, 0.2], ddof=1)/sqrt(2)
    assert first["sem"] == pytest.approx(np.std([0.4, 0.2], ddof=1) / np.sqrt(2))
    mid = rows[5]  # 0.15 lands in [0.0, 0.2)
    assert mid["count"] == 1 and mid["mean_gain"] == pytest.approx(0.0)
    assert mid["sem"] is None  # singleton bucket: no spread estimate
    assert rows[1]["count"] == 0 and rows[1]["mean_gain"] is None


def test_ordering_check_ordered():
    res = mt.ordering_check({
        "lrw_easy": [0.70, 0.72, 0.71],
        "lrw_random": [0.75, 0.76, 0.74],
        "lrw_hard": [0.80, 0.79, 0.81],
    })
    assert res["ordering_holds"] and res["verdict"] == "ordered"
    assert res["per_variant"]["lrw_hard"]["mean"] == pytest.approx(0.8)
    assert res["paired_wins"]["lrw_hard>lrw_easy"] == 3
    assert res["seeds"] == 3


def test_ordering_check_violated():
    res = mt.ordering_check({
        "lrw_easy": [0.80, 0.80],
        "lrw_random": [0.75, 0.75],
        "lrw_hard": [0.70, 0.70],
    })
    assert not res["ordering_holds"]
    assert res["verdict"] == "violated"


def test_ordering_check_tie():
    res = mt.ordering_check({
        "lrw_easy": [0.75, 0.75],
        "lrw_random": [0.75, 0.75],
        "lrw_hard": [0.75, 0.75],
    })
    assert res["verdict"] == "tie"


def test_ordering_check_requires_matched_seeds():
    with pytest.raises(mt.MetricsError):
        mt.ordering_check({"lrw_easy": [0.7, 0.7], "lrw_random": [0.7],
                           "lrw_hard": [0.7, 0.7]})
    with pytest.raises(mt.MetricsError):
        mt.ordering_check({"lrw_easy": [0.7], "lrw_random": [0.7],
                           "lrw_hard": [0.7]})
    with pytest.raises(mt.MetricsError):
        mt.ordering_check({"lrw_easy": [0.7, 0.7], "lrw_hard": [0.7, 0.7]})


def test_report_round_trip_and_byte_identical(tmp_path):
    d = dg.make_gaussian_mixture(20, 2, 2, 2.0, seed=1)
    model = md.Mlp([2, 4, 2])
    params = model.init(2)
    _, erm_records = mt.evaluate(model, model.init(9), d)
    report, _ = mt.build_report("lrw_hard", model, params, d, erm_records)
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    report.save(p1)
    report.save(p2)
    assert p1.read_bytes() == p2.read_bytes()
    back = mt.MetricsReport.load(p1)
    assert back.model_tag == "lrw_hard"
    assert back.test_accuracy == report.test_accuracy
    assert back.paired_margin_deltas == report.paired_margin_deltas
    assert back.delta_mean == report.delta_mean


def test_report_json_is_sorted_and_plain(tmp_path):
    report = mt.MetricsReport("erm", 0.5, 0.0)
    path = tmp_path / "r.json"
    report.save(path)
    raw = json.loads(path.read_text())
    assert list(raw) == sorted(raw)
    assert "timestamp" not in raw


def test_margins_csv_round_trip_exact(tmp_path):
    recs = _recs(np.random.default_rng(0).standard_normal(15))
    path = tmp_path / "m.csv"
    mt.save_margins_csv(recs, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "instance_index,margin"
    for line, r in zip(lines[1:], recs):
        i, m = line.split(",")
        assert int(i) == r.instance_index
        assert float(m) == r.margin  # repr round-trips exactly


def test_histogram_and_bucket_csv_shapes(tmp_path):
    hist = mt.paired_margin_delta(_recs([0.5, -0.5]), _recs([0.0, 0.0]))
    hp = tmp_path / "h.csv"
    mt.save_histogram_csv(hist, hp)
    assert len(hp.read_text().splitlines()) == 21
    rows = mt.margin_gain_by_bucket(_recs([0.5, -0.5]), _recs([0.0, 0.0]))
    bp = tmp_path / "b.csv"
    mt.save_buckets_csv(rows, bp)
    lines = bp.read_text().splitlines()
    assert lines[0] == "bucket_lo,bucket_hi,count,mean_gain,sem"
    assert len(lines) == 11

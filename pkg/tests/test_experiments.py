import json
from pathlib import Path

import numpy as np
import pytest

from lrwlab import datagen as dg
from lrwlab import dro_oracle as dro
from lrwlab import experiments as ex


def _tiny_spec(tmp_path, variant="erm", **kw):
    base = dict(
        variant=variant,
        outdir=str(tmp_path / "out"),
        seeds=(0, 1),
        n_per_class=40,
        dim=4,
        separation=3.0,
        n_test_per_class=40,
        train={"max_epochs": 2, "warm_start_epochs": 1, "delta": 0.2,
               "batch_train": 16, "batch_val": 8, "q_inner": 2,
               "hidden_classifier": (8,), "hidden_meta": (8,),
               "hidden_splitter": (8,)},
    )
    base.update(kw)
    return ex.ExperimentSpec(**base)


# --- spec validation ---------------------------------------------------------

def test_spec_rejects_unknown_variant(tmp_path):
    with pytest.raises(ex.ExperimentError):
        _tiny_spec(tmp_path, variant="lrw_hardest")


def test_spec_rejects_empty_and_duplicate_seeds(tmp_path):
    with pytest.raises(ex.ExperimentError):
        _tiny_spec(tmp_path, seeds=())
    with pytest.raises(ex.ExperimentError):
        _tiny_spec(tmp_path, seeds=(3, 3))


def test_spec_rejects_file_without_path(tmp_path):
    with pytest.raises(ex.ExperimentError):
        _tiny_spec(tmp_path, generator="file")


def test_spec_rejects_oracle_without_instance(tmp_path):
    with pytest.raises(ex.ExperimentError):
        _tiny_spec(tmp_path, variant="oracle")


def test_spec_rejects_bad_trainer_overrides(tmp_path):
    with pytest.raises(ex.ExperimentError):
        _tiny_spec(tmp_path, train={"max_epochs": 2, "delta": 1.5})
    with pytest.raises(ex.ExperimentError):
        _tiny_spec(tmp_path, train={"no_such_knob": 1})


def test_spec_rejects_bad_skew_and_noise(tmp_path):
    with pytest.raises(ex.ExperimentError):
        _tiny_spec(tmp_path, skew_ratio=0.5)
    with pytest.raises(ex.ExperimentError):
        _tiny_spec(tmp_path, noise_kind="salt_and_pepper")


def test_spec_round_trips_through_dict(tmp_path):
    spec = _tiny_spec(tmp_path, noise_kind="uniform_flip", noise_rate=0.1)
    back = ex.ExperimentSpec.from_dict(json.loads(json.dumps(spec.to_dict())))
    assert back.to_dict() == spec.to_dict()
    with pytest.raises(ex.ExperimentError):
        ex.ExperimentSpec.from_dict({**spec.to_dict(), "bogus": 1})


def test_recipe_id_ignores_variant_but_not_data(tmp_path):
    a = _tiny_spec(tmp_path, variant="erm")
    b = _tiny_spec(tmp_path, variant="lrw_hard")
    c = _tiny_spec(tmp_path, separation=2.0)
    assert a.recipe_id() == b.recipe_id()
    assert a.recipe_id() != c.recipe_id()


# --- dataset materialization -------------------------------------------------

def test_build_datasets_corruption_never_touches_test(tmp_path):
    spec = _tiny_spec(tmp_path, noise_kind="uniform_flip", noise_rate=0.25)
    d, test = ex.build_datasets(spec, 0)
    clean = dg.make_gaussian_mixture(40, 2, 4, 3.0, seed=0)
    assert np.sum(d.labels != clean.labels) == int(0.25 * len(clean))
    clean_test = dg.make_gaussian_mixture(40, 2, 4, 3.0,
                                          seed=0 + ex.TEST_SEED_OFFSET)
    assert np.array_equal(test.labels, clean_test.labels)
    assert np.array_equal(test.features, clean_test.features)


def test_build_datasets_applies_skew(tmp_path):
    spec = _tiny_spec(tmp_path, skew_ratio=10.0)
    d, _ = ex.build_datasets(spec, 0)
    counts = np.bincount(d.labels)
    assert counts[0] == 40 and counts[1] == 4


def test_build_datasets_file_split_partitions(tmp_path):
    pool = dg.make_gaussian_mixture(50, 2, 3, 3.0, seed=5)
    path = tmp_path / "pool.csv"
    dg.save_csv(pool, path)
    spec = _tiny_spec(tmp_path, generator="file", data_path=str(path),
                      test_fraction=0.2)
    d, test = ex.build_datasets(spec, 0)
    assert len(d) + len(test) == 100
    assert len(test) == 20
    d2, t2 = ex.build_datasets(spec, 0)
    assert np.array_equal(d.features, d2.features)
    assert np.array_equal(test.features, t2.features)


# --- per-variant runs --------------------------------------------------------

def test_run_erm_writes_artifacts_and_self_zero_deltas(tmp_path):
    spec = _tiny_spec(tmp_path)
    agg = ex.run(spec)
    for seed in (0, 1):
        seed_dir = Path(spec.outdir) / "erm" / str(seed)
        for name in ("config.json", "report.json", "margins.csv",
                     "checkpoint.txt", "log.csv"):
            assert (seed_dir / name).exists(), name
        report = json.loads((seed_dir / "report.json").read_text())
        assert report["model_tag"] == "erm"
        assert 0.0 <= report["test_accuracy"] <= 1.0
        assert report["delta_mean"] == 0.0  # paired against itself
        config = json.loads((seed_dir / "config.json").read_text())
        assert config["seed"] == seed
        assert config["train_config"]["max_epochs"] == 2
    assert set(agg["accuracy_per_seed"]) == {"0", "1"}
    assert agg["accuracy_mean"] == pytest.approx(
        np.mean(list(agg["accuracy_per_seed"].values())))


def test_run_lrw_hard_writes_split_and_paired_deltas(tmp_path):
    spec = _tiny_spec(tmp_path, variant="lrw_hard", seeds=(0,))
    ex.run(spec)
    seed_dir = Path(spec.outdir) / "lrw_hard" / "0"
    assert (seed_dir / "split.csv").exists()
    report = json.loads((seed_dir / "report.json").read_text())
    assert report["paired_margin_deltas"]["n"] == 80
    assert report["delta_mean"] is not None


def test_run_lrwopt_reports_discovered_split(tmp_path):
    spec = _tiny_spec(tmp_path, variant="lrwopt", seeds=(0,),
                      n_per_class=60)
    ex.run(spec)
    seed_dir = Path(spec.outdir) / "lrwopt" / "0"
    assert (seed_dir / "split.csv").exists()
    report = json.loads((seed_dir / "report.json").read_text())
    extra = report["extra"]
    assert 0.0 < extra["val_fraction_realized"] < 1.0
    assert "mean_margin_val_side" in extra
    assert "mean_margin_train_side" in extra


def test_rerun_is_byte_identical(tmp_path):
    # determinism contract: same spec + seeds, fresh directory, equal bytes
    spec_a = _tiny_spec(tmp_path, variant="lrw_random", seeds=(0,),
                        outdir=str(tmp_path / "a"))
    spec_b = _tiny_spec(tmp_path, variant="lrw_random", seeds=(0,),
                        outdir=str(tmp_path / "b"))
    ex.run(spec_a)
    ex.run(spec_b)
    dir_a = Path(spec_a.outdir) / "lrw_random"
    dir_b = Path(spec_b.outdir) / "lrw_random"
    names = sorted(p.relative_to(dir_a) for p in dir_a.rglob("*") if p.is_file())
    assert names
    for name in names:
        a_bytes = (dir_a / name).read_bytes()
        if name.name == "config.json":
            continue  # echoes the differing outdir by design
        assert a_bytes == (dir_b / name).read_bytes(), str(name)


def test_run_oracle_matches_direct_enumeration(tmp_path):
    inst = dro.FiniteInstance([(i, y) for i, y in enumerate([0, 0, 0, 0])],
                              [[1, 1, 0, 0]], 0.5)
    inst_path = tmp_path / "inst.json"
    dro.save_instance(inst, inst_path)
    spec = ex.ExperimentSpec(variant="oracle", outdir=str(tmp_path / "out"),
                             oracle_path=str(inst_path))
    verdict = ex.run(spec)
    assert verdict["dual_dro_value"] == 2
    assert verdict["trilevel_value"] == 2
    assert verdict["trilevel_equals_dual"] is True
    assert verdict["dro_at_least_dual"] is True
    out = Path(spec.outdir) / "oracle"
    assert (out / "oracle_result.csv").exists()
    assert (out / "oracle_verdict.json").exists()


# --- compare -----------------------------------------------------------------

def _fake_aggregate(path, variant, accs, recipe="r", seeds=None):
    seeds = seeds if seeds is not None else list(range(len(accs)))
    agg = {"variant": variant, "recipe_id": recipe, "seeds": seeds,
           "accuracy_per_seed": {str(s): a for s, a in zip(seeds, accs)},
           "accuracy_mean": float(np.mean(accs)), "accuracy_sem": None}
    path.write_text(json.dumps(agg))
    return path


def test_compare_gain_arithmetic(tmp_path):
    p1 = _fake_aggregate(tmp_path / "erm.json", "erm", [0.7, 0.7])
    p2 = _fake_aggregate(tmp_path / "opt.json", "lrwopt", [0.8, 0.9])
    out = ex.compare([str(p1), str(p2)])
    assert out["gain_over_erm"]["erm"] == pytest.approx(0.0)
    assert out["gain_over_erm"]["lrwopt"] == pytest.approx(0.15)
    # argument order must not matter
    assert ex.compare([str(p2), str(p1)]) == out


def test_compare_includes_ordering_when_all_carves_present(tmp_path):
    paths = [
        _fake_aggregate(tmp_path / "erm.json", "erm", [0.7, 0.7]),
        _fake_aggregate(tmp_path / "e.json", "lrw_easy", [0.6, 0.62]),
        _fake_aggregate(tmp_path / "r.json", "lrw_random", [0.7, 0.71]),
        _fake_aggregate(tmp_path / "h.json", "lrw_hard", [0.8, 0.81]),
    ]
    out = ex.compare([str(p) for p in paths])
    assert out["ordering"]["verdict"] == "ordered"


def test_compare_rejects_incompatible_inputs(tmp_path):
    p1 = _fake_aggregate(tmp_path / "erm.json", "erm", [0.7])
    p2 = _fake_aggregate(tmp_path / "opt.json", "lrwopt", [0.8],
                         recipe="other")
    p3 = _fake_aggregate(tmp_path / "dup.json", "erm", [0.7])
    p4 = _fake_aggregate(tmp_path / "seeds.json", "lrwopt", [0.8],
                         seeds=[7])
    with pytest.raises(ex.ExperimentError):
        ex.compare([str(p1)])
    with pytest.raises(ex.ExperimentError):
        ex.compare([str(p1), str(p2)])
    with pytest.raises(ex.ExperimentError):
        ex.compare([str(p1), str(p3)])
    with pytest.raises(ex.ExperimentError):
        ex.compare([str(p1), str(p4)])
    p5 = _fake_aggregate(tmp_path / "noerm.json", "lrw_hard", [0.8])
    p6 = _fake_aggregate(tmp_path / "noerm2.json", "lrw_easy", [0.6])
    with pytest.raises(ex.ExperimentError):
        ex.compare([str(p5), str(p6)])
    bad = tmp_path / "bad.json"
    bad.write_text("{}")
    with pytest.raises(ex.ExperimentError):
        ex.compare([str(p1), str(bad)])

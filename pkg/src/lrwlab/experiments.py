"""Experiment orchestration: dataset recipes, per-seed runs, artifact layout.

Output layout (diff-friendly, write-once):

    <outdir>/<variant>/<seed>/config.json    spec + resolved trainer config echo
    <outdir>/<variant>/<seed>/report.json    MetricsReport for the final model
    <outdir>/<variant>/<seed>/margins.csv    test-set margins of the final model
    <outdir>/<variant>/<seed>/split.csv      train/val assignment (lrw_* and lrwopt)
    <outdir>/<variant>/<seed>/checkpoint.txt exact classifier parameters
    <outdir>/<variant>/<seed>/log.csv        per-step loss breakdown
    <outdir>/<variant>/aggregate.json        per-seed accuracies + mean/sem

Every artifact is a pure function of (spec, seed): no timestamps, sorted JSON
keys, repr-exact floats, so reruns are byte-identical.
"""

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import datagen as dg
from . import dro_oracle as dro
from . import hardness as hd
from . import metrics as mt
from . import trainer as tr
from .models import save_params

NOISE_SEED_OFFSET = 10000
TEST_SEED_OFFSET = 20000

VARIANTS = ("erm", "lrw_hard", "lrw_easy", "lrw_random", "lrwopt", "oracle")
GENERATORS = ("gaussian", "two_moons", "file")


class ExperimentError(ValueError):
    """Invalid experiment specification or incompatible artifacts."""


@dataclass
class ExperimentSpec:
    """One experiment: a dataset recipe, a variant, a trainer config, seeds."""

    variant: str
    outdir: str
    seeds: tuple = (0,)
    generator: str = "gaussian"
    n_per_class: int = 1000
    n_classes: int = 2
    dim: int = 10
    separation: float = 2.3
    moons_n: int = 2000
    moons_noise_std: float = 0.2
    data_path: str | None = None
    noise_kind: str | None = None        # uniform_flip | instance_dependent
    noise_rate: float = 0.0
    skew_ratio: float = 1.0
    n_test_per_class: int = 1000
    test_fraction: float = 0.2           # held-out share for file datasets
    train: dict = field(default_factory=dict)  # TrainConfig overrides
    oracle_path: str | None = None       # FiniteInstance JSON for variant=oracle

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.variant not in VARIANTS:
            raise ExperimentError(f"unknown variant {self.variant!r}; "
                                  f"expected one of {VARIANTS}")
        if self.generator not in GENERATORS:
            raise ExperimentError(f"unknown generator {self.generator!r}")
        if self.variant == "oracle":
            if not self.oracle_path:
                raise ExperimentError("variant=oracle requires oracle_path")
            return
        if not self.seeds:
            raise ExperimentError("seed list must be nonempty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ExperimentError("seed list contains duplicates")
        if self.generator == "file" and not self.data_path:
            raise ExperimentError("generator=file requires data_path")
        if self.noise_kind is not None and self.noise_kind not in \
                ("uniform_flip", "instance_dependent"):
            raise ExperimentError(f"unknown noise kind {self.noise_kind!r}")
        if self.skew_ratio < 1.0:
            raise ExperimentError("skew_ratio must be >= 1")
        if not 0.0 < self.test_fraction < 1.0:
            raise ExperimentError("test_fraction must lie in (0, 1)")
        try:
            self.train_config(self.seeds[0])
        except (ValueError, TypeError) as exc:
            raise ExperimentError(f"bad trainer config: {exc}") from exc

    def train_config(self, seed):
        kwargs = dict(self.train)
        for key in ("hidden_classifier", "hidden_meta", "hidden_splitter"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return tr.TrainConfig(seed=seed, **kwargs)

    def recipe_id(self):
        """Identity of the data recipe + seeds; compare() requires a match."""
        d = self.to_dict()
        d.pop("variant")
        d.pop("outdir")
        d.pop("train")
        d.pop("oracle_path")
        return json.dumps(d, sort_keys=True)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["seeds"] = list(self.seeds)
        d["train"] = {k: list(v) if isinstance(v, tuple) else v
                      for k, v in self.train.items()}
        return d

    @classmethod
    def from_dict(cls, raw):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ExperimentError(f"unknown spec fields: {sorted(unknown)}")
        return cls(**raw)


def build_datasets(spec, seed):
    """Materialize (train, test) for one seed; corruption never touches test."""
    if spec.generator == "gaussian":
        d = dg.make_gaussian_mixture(spec.n_per_class, spec.n_classes,
                                     spec.dim, spec.separation, seed=seed)
        test = dg.make_gaussian_mixture(spec.n_test_per_class, spec.n_classes,
                                        spec.dim, spec.separation,
                                        seed=seed + TEST_SEED_OFFSET)
    elif spec.generator == "two_moons":
        d = dg.make_two_moons(spec.moons_n, spec.moons_noise_std, seed=seed)
        test = dg.make_two_moons(spec.moons_n, spec.moons_noise_std,
                                 seed=seed + TEST_SEED_OFFSET)
    else:
        pool = dg.load_csv(spec.data_path)
        rng = np.random.default_rng(seed + TEST_SEED_OFFSET)
        perm = rng.permutation(len(pool))
        n_test = max(1, int(np.floor(spec.test_fraction * len(pool))))
        test = pool.subset(np.sort(perm[:n_test]))
        d = pool.subset(np.sort(perm[n_test:]))
    if spec.skew_ratio > 1.0:
        d = dg.apply_skew(d, dg.SkewSpec(ratio=spec.skew_ratio,
                                         seed=seed + NOISE_SEED_OFFSET))
    if spec.noise_kind is not None and spec.noise_rate > 0.0:
        d = dg.inject_noise(d, dg.NoiseSpec(kind=spec.noise_kind,
                                            rate=spec.noise_rate,
                                            seed=seed + NOISE_SEED_OFFSET))
    return d, test


def _write_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_log_csv(log, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(tr.LossBreakdown.CSV_HEADER)
        for row in log:
            writer.writerow(row.row())


def _margin_pass(d, cfg):
    """ERM margin pass over the pooled data (the train-twice heuristic)."""
    epochs = cfg.erm_margin_epochs if cfg.erm_margin_epochs is not None \
        else cfg.max_epochs
    model, params = tr.train_erm(d, cfg, epochs=epochs)
    return model, params, hd.probabilistic_margin(model, params, d)


def run_seed(spec, seed, seed_dir):
    """Train one (variant, seed) pair and write its artifact directory."""
    seed_dir = Path(seed_dir)
    seed_dir.mkdir(parents=True, exist_ok=True)
    cfg = spec.train_config(seed)
    config_echo = {"spec": spec.to_dict(), "seed": seed,
                   "train_config": dataclasses.asdict(cfg)}
    _write_json(config_echo, seed_dir / "config.json")

    d, test = build_datasets(spec, seed)
    log = []
    extra = {}

    if spec.variant == "erm":
        model, params = tr.train_erm(d, cfg, log=log)
        # ERM is its own margin baseline: deltas are identically zero
        _, own_records = mt.evaluate(model, params, test)
        erm_records = own_records
    elif spec.variant in ("lrw_hard", "lrw_easy", "lrw_random"):
        erm_model, erm_params, margins = _margin_pass(d, cfg)
        _, erm_records = mt.evaluate(erm_model, erm_params, test)
        carve = spec.variant.split("_", 1)[1]
        split = hd.stratified_guard(
            hd.carve_split(margins, carve, cfg.delta, seed=seed), d, margins)
        model, _, state = tr.train_lrw(d, split, cfg)
        params = state.classifier
        log = state.log
        hd.save_split(split, margins, seed_dir / "split.csv")
    elif spec.variant == "lrwopt":
        erm_model, erm_params, _ = _margin_pass(d, cfg)
        _, erm_records = mt.evaluate(erm_model, erm_params, test)
        model, _, _, state, split = tr.train_lrwopt(d, cfg)
        params = state.classifier
        log = state.log
        final_margins = hd.probabilistic_margin(model, params, d)
        hd.save_split(split, final_margins, seed_dir / "split.csv")
        by_index = {r.instance_index: r.margin for r in final_margins}
        extra["val_fraction_realized"] = len(split.val_indices) / len(d)
        extra["mean_margin_train_side"] = float(np.mean(
            [by_index[i] for i in split.train_indices]))
        extra["mean_margin_val_side"] = float(np.mean(
            [by_index[i] for i in split.val_indices]))
    else:
        raise ExperimentError(f"variant {spec.variant!r} has no training path")

    report, records = mt.build_report(spec.variant, model, params, test,
                                      erm_records=erm_records)
    report.extra = extra
    report.save(seed_dir / "report.json")
    mt.save_margins_csv(records, seed_dir / "margins.csv")
    save_params(params, seed_dir / "checkpoint.txt")
    _write_log_csv(log, seed_dir / "log.csv")
    return report


def run_oracle(spec, outdir):
    """Evaluate the enumeration oracle on a stored instance; emit verdict."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    inst = dro.load_instance(spec.oracle_path)
    dual = dro.dual_dro_exhaustive(inst)
    tri = dro.trilevel_exhaustive(inst)
    minimax = dro.dro_exhaustive(inst)
    dro.save_result_csv(dual, outdir / "oracle_result.csv")
    verdict = {
        "dual_dro_value": dual.dual_dro_value,
        "trilevel_value": tri,
        "dro_value": minimax,
        "trilevel_equals_dual": tri == dual.dual_dro_value,
        "dro_at_least_dual": minimax >= dual.dual_dro_value,
        "equality_precondition_holds": dro.equality_precondition_holds(inst),
    }
    _write_json(verdict, outdir / "oracle_verdict.json")
    return verdict


def run(spec):
    """Run every seed of the spec; write per-seed artifacts plus aggregate."""
    variant_dir = Path(spec.outdir) / spec.variant
    if spec.variant == "oracle":
        return run_oracle(spec, variant_dir)
    accuracies = {}
    for seed in spec.seeds:
        report = run_seed(spec, seed, variant_dir / str(seed))
        accuracies[str(seed)] = report.test_accuracy
    values = np.array(list(accuracies.values()))
    aggregate = {
        "variant": spec.variant,
        "recipe_id": spec.recipe_id(),
        "seeds": list(spec.seeds),
        "accuracy_per_seed": accuracies,
        "accuracy_mean": float(values.mean()),
        "accuracy_sem": float(values.std(ddof=1) / np.sqrt(len(values)))
        if len(values) > 1 else None,
    }
    _write_json(aggregate, variant_dir / "aggregate.json")
    return aggregate


def compare(aggregate_paths):
    """Combine aggregates: gains over ERM, plus the carve-ordering verdict.

    Requires every aggregate to share the same dataset recipe and seed list;
    output is invariant to argument order.
    """
    if len(aggregate_paths) < 2:
        raise ExperimentError("compare needs at least two aggregate files")
    aggs = {}
    for path in aggregate_paths:
        with open(path, encoding="utf-8") as fh:
            agg = json.load(fh)
        for key in ("variant", "recipe_id", "seeds", "accuracy_per_seed"):
            if key not in agg:
                raise ExperimentError(f"{path}: not an aggregate file")
        if agg["variant"] in aggs:
            raise ExperimentError(f"duplicate variant {agg['variant']!r}")
        aggs[agg["variant"]] = agg
    recipes = {a["recipe_id"] for a in aggs.values()}
    if len(recipes) != 1:
        raise ExperimentError("aggregates use different dataset recipes")
    seed_lists = {tuple(a["seeds"]) for a in aggs.values()}
    if len(seed_lists) != 1:
        raise ExperimentError("aggregates use different seed lists")
    if "erm" not in aggs:
        raise ExperimentError("compare requires an erm aggregate as baseline")

    erm_mean = aggs["erm"]["accuracy_mean"]
    out = {"seeds": aggs["erm"]["seeds"], "gain_over_erm": {}, "means": {}}
    for variant in sorted(aggs):
        out["means"][variant] = aggs[variant]["accuracy_mean"]
        out["gain_over_erm"][variant] = aggs[variant]["accuracy_mean"] - erm_mean
    carves = ("lrw_easy", "lrw_random", "lrw_hard")
    if all(v in aggs for v in carves):
        per_seed = {v: [aggs[v]["accuracy_per_seed"][str(s)]
                        for s in aggs[v]["seeds"]] for v in carves}
        out["ordering"] = mt.ordering_check(per_seed)
    return out

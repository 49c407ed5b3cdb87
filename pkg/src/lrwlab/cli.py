"""Command-line front door: dataset generation, experiments, comparison, oracle.

Exit codes: 0 success, 1 validation error, 2 training abort, 3 I/O error.
A JSON config file may supply any `run` field; explicit flags override it.
"""

import argparse
import json
import sys

from . import datagen as dg
from . import dro_oracle as dro
from . import experiments as ex
from . import models as md
from . import trainer as tr

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_TRAINING = 2
EXIT_IO = 3


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="lrwlab",
        description="Learned-reweighting training with meta-optimized "
                    "validation-set selection (desk scale).")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset CSV")
    g.add_argument("--generator", choices=("gaussian", "two_moons"),
                   default="gaussian")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-per-class", type=int, default=1000)
    g.add_argument("--n-classes", type=int, default=2)
    g.add_argument("--dim", type=int, default=10)
    g.add_argument("--separation", type=float, default=2.3)
    g.add_argument("--moons-n", type=int, default=2000)
    g.add_argument("--moons-noise-std", type=float, default=0.2)
    g.add_argument("--noise-kind", choices=("uniform_flip",
                                            "instance_dependent"))
    g.add_argument("--noise-rate", type=float, default=0.0)
    g.add_argument("--skew-ratio", type=float, default=1.0)

    r = sub.add_parser("run", help="run an experiment (per-seed artifacts)")
    r.add_argument("--config", help="JSON file supplying ExperimentSpec fields")
    r.add_argument("--variant", choices=ex.VARIANTS)
    r.add_argument("--outdir")
    r.add_argument("--seeds", help="comma-separated, e.g. 0,1,2")
    r.add_argument("--generator", choices=ex.GENERATORS)
    r.add_argument("--data-path")
    r.add_argument("--oracle-path")
    r.add_argument("--n-per-class", type=int)
    r.add_argument("--n-classes", type=int)
    r.add_argument("--dim", type=int)
    r.add_argument("--separation", type=float)
    r.add_argument("--noise-kind", choices=("uniform_flip",
                                            "instance_dependent"))
    r.add_argument("--noise-rate", type=float)
    r.add_argument("--skew-ratio", type=float)
    r.add_argument("--n-test-per-class", type=int)
    r.add_argument("--train", help="JSON object of TrainConfig overrides, "
                                   'e.g. \'{"max_epochs": 20, "delta": 0.1}\'')

    c = sub.add_parser("compare", help="combine aggregate.json files")
    c.add_argument("aggregates", nargs="+")
    c.add_argument("--out", help="write the combined report here "
                                 "(default: stdout)")

    o = sub.add_parser("oracle", help="evaluate the enumeration oracle on a "
                                      "stored finite instance")
    o.add_argument("--instance", required=True)
    o.add_argument("--outdir", required=True)
    return parser


def _cmd_gen_data(args):
    if args.generator == "gaussian":
        d = dg.make_gaussian_mixture(args.n_per_class, args.n_classes,
                                     args.dim, args.separation, seed=args.seed)
    else:
        d = dg.make_two_moons(args.moons_n, args.moons_noise_std,
                              seed=args.seed)
    if args.skew_ratio > 1.0:
        d = dg.apply_skew(d, dg.SkewSpec(ratio=args.skew_ratio,
                                         seed=args.seed + ex.NOISE_SEED_OFFSET))
    if args.noise_kind and args.noise_rate > 0.0:
        d = dg.inject_noise(d, dg.NoiseSpec(kind=args.noise_kind,
                                            rate=args.noise_rate,
                                            seed=args.seed + ex.NOISE_SEED_OFFSET))
    dg.save_csv(d, args.out)
    print(f"wrote {len(d)} instances ({d.n_classes} classes) to {args.out}")
    return EXIT_OK


_RUN_FIELDS = ("variant", "outdir", "generator", "data_path", "oracle_path",
               "n_per_class", "n_classes", "dim", "separation", "noise_kind",
               "noise_rate", "skew_ratio", "n_test_per_class")


def _build_spec(args):
    raw = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            raw = json.load(fh)
    for name in _RUN_FIELDS:
        value = getattr(args, name)
        if value is not None:
            raw[name] = value
    if args.seeds is not None:
        raw["seeds"] = [int(s) for s in args.seeds.split(",")]
    if args.train is not None:
        raw["train"] = json.loads(args.train)
    if "variant" not in raw or "outdir" not in raw:
        raise ex.ExperimentError("variant and outdir are required "
                                 "(via flags or --config)")
    return ex.ExperimentSpec.from_dict(raw)


def _cmd_run(args):
    spec = _build_spec(args)
    summary = ex.run(spec)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_compare(args):
    combined = ex.compare(args.aggregates)
    text = json.dumps(combined, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return EXIT_OK


def _cmd_oracle(args):
    spec = ex.ExperimentSpec(variant="oracle", outdir=args.outdir,
                             oracle_path=args.instance)
    verdict = ex.run(spec)
    print(json.dumps(verdict, indent=2, sort_keys=True))
    return EXIT_OK


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    handler = {"gen-data": _cmd_gen_data, "run": _cmd_run,
               "compare": _cmd_compare, "oracle": _cmd_oracle}[args.command]
    try:
        return handler(args)
    except (tr.TrainError, md.ModelError) as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (ex.ExperimentError, dg.DataError, dro.OracleBudgetError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

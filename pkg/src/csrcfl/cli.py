"""Command line entry point.

Subcommands::

    csrcfl gen    --config gen.json --seed 3 --out data/
    csrcfl run    --config experiment.json --out results/ [--seed 7] [--threads 4]
    csrcfl cv     --data client.csv --target y --features a,b,c --family logistic
    csrcfl matrix --config experiment.json --out matrix/ [--k 3 [--exact]]

Exit codes: 0 success, 1 invalid input, 2 I/O failure, 3 problem too large
for the exact solver.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .coalition import build_transfer_matrix, solve, solve_exact
from .data import ModelFamily, dataset_to_csv, gen_linear_clients, gen_logistic_clients, load_csv
from .errors import CapacityError, CSRCFLError, ValidationError
from .experiments import (
    ExperimentSpec,
    ambiguity_specs,
    build_federation,
    cross_validate_epsilon,
    emit_results,
    run_experiment,
    signed_labels,
    summary_table,
)
from .models import train_erm

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_CAPACITY = 0, 1, 2, 3
_U64 = 2**64

GEN_KEYS = {
    "family", "n_clients", "n_features", "samples_range", "n_true_weights",
    "noise_sigma", "weight_scale", "covariance",
}


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage, which would collide with the I/O code
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ValidationError(message)


def _seed(text):
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= value < _U64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _positive(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def _read_json(path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ValidationError(f"{path}: top level must be an object")
    return data


def _experiment(args) -> ExperimentSpec:
    d = _read_json(args.config)
    if args.seed is not None:
        d["seeds"] = [args.seed]
    if args.threads is not None:
        d["threads"] = args.threads
    return ExperimentSpec.from_dict(d)


# -- subcommands -------------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = _read_json(args.config) if args.config else {}
    unknown = sorted(set(cfg) - GEN_KEYS - {"seed"})
    if unknown:
        raise ValidationError(f"unknown generator keys {unknown}")
    family = ModelFamily.coerce(cfg.pop("family", "linear_l1"))
    seed = args.seed if args.seed is not None else cfg.pop("seed", 0)
    cfg.pop("seed", None)
    if "samples_range" in cfg:
        cfg["samples_range"] = tuple(cfg["samples_range"])
    if family is ModelFamily.LINEAR_L1:
        clients = gen_linear_clients(rng_seed=seed, **cfg)
    else:
        if "noise_sigma" in cfg:
            raise ValidationError("noise_sigma applies to linear_l1 only")
        clients = gen_logistic_clients(rng_seed=seed, **cfg)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    p = clients.datasets[0].n_features
    names = [f"x{j}" for j in range(p)]
    files = []
    for d in clients.datasets:
        name = f"{d.client_id}.csv"
        dataset_to_csv(d, out / name, names, "y")
        files.append(name)
    manifest = {
        "family": family.value,
        "seed": seed,
        "target_column": "y",
        "feature_columns": names,
        "clients": [
            {"client_id": d.client_id, "file": f, "n_samples": d.n_samples, "true_cluster": int(c)}
            for d, f, c in zip(clients.datasets, files, clients.labels)
        ],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    print(f"wrote {len(files)} client files to {out}")
    return EXIT_OK


def cmd_run(args) -> int:
    spec = _experiment(args)
    records = run_experiment(spec)
    paths = emit_results(records, args.out)
    print(summary_table(records), end="")
    print("wrote " + ", ".join(str(p) for p in paths))
    return EXIT_OK


def cmd_cv(args) -> int:
    cfg = _read_json(args.config) if args.config else {}
    data = args.data or cfg.get("data")
    target = args.target or cfg.get("target_column")
    features = args.features.split(",") if args.features else cfg.get("feature_columns")
    family = args.family or cfg.get("family")
    if not (data and target and features and family):
        raise ValidationError("cv needs a data file, target column, feature columns and family")
    grid = [float(g) for g in args.grid.split(",")] if args.grid else cfg.get("grid", [0.001, 0.01, 0.1])
    folds = args.folds or cfg.get("folds", 3)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)

    dataset = load_csv(data, target, features)
    if ModelFamily.coerce(family) is ModelFamily.LOGISTIC:
        dataset = signed_labels(dataset)
    eps = cross_validate_epsilon(dataset, family, grid, folds, seed)
    result = {"data": str(data), "family": ModelFamily.coerce(family).value, "grid": grid, "epsilon": eps}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "cv.json").write_text(json.dumps(result, indent=1), encoding="utf-8")
    print(json.dumps(result))
    return EXIT_OK


def cmd_matrix(args) -> int:
    spec = _experiment(args)
    seed = spec.seeds[0]
    fed = build_federation(spec, seed)
    specs = ambiguity_specs(spec, fed.train, seed)
    models = [train_erm(d, fed.family, spec.train) for d in fed.train]
    matrix = build_transfer_matrix(models, fed.train, specs, fed.family, spec.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    matrix.to_csv(out / "matrix.csv")
    print(f"wrote {out / 'matrix.csv'}")
    if args.k is not None:
        if args.exact:
            structure = solve_exact(matrix, args.k, spec.exact_limit)
        else:
            structure = solve(matrix, args.k, spec.exact_limit, spec.restarts, seed)
        result = {
            "k": args.k,
            "assignment": structure.assignment.tolist(),
            "objective": structure.objective,
            "solver_status": structure.solver_status.value,
        }
        (out / "structure.json").write_text(json.dumps(result, indent=1), encoding="utf-8")
        print(json.dumps(result))
    return EXIT_OK


# -- wiring ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="csrcfl", description="Robust clustered federated learning simulator.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, config_required, out_required):
        p.add_argument("--config", required=config_required, help="JSON config file")
        p.add_argument("--seed", type=_seed, default=None, help="unsigned 64-bit seed")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--threads", type=_positive, default=None, help="worker threads")

    p = sub.add_parser("gen", help="write synthetic client datasets to CSV")
    common(p, False, True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("run", help="run an experiment config")
    common(p, True, True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("cv", help="cross-validate the radius for one dataset")
    common(p, False, False)
    p.add_argument("--data", help="client CSV file")
    p.add_argument("--target", help="target column")
    p.add_argument("--features", help="comma-separated feature columns")
    p.add_argument("--family", choices=[f.value for f in ModelFamily])
    p.add_argument("--grid", help="comma-separated candidate radii")
    p.add_argument("--folds", type=int, default=None)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("matrix", help="dump the robust transfer-loss matrix of an experiment's first seed")
    common(p, True, True)
    p.add_argument("--k", type=_positive, default=None, help="also solve for K coalitions")
    p.add_argument("--exact", action="store_true", help="require the exact solver")
    p.set_defaults(func=cmd_matrix)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except CapacityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CAPACITY
    except (ValidationError, CSRCFLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

"""Benchmark arms, K sweeps and result files for the synthetic and CSV scenarios."""

from __future__ import annotations

import csv
import enum
import json
import time
import warnings
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.metrics import adjusted_rand_score
from sklearn.model_selection import KFold, train_test_split

from .coalition import assigned_models, build_transfer_matrix, solve
from .data import (
    COVARIANCE,
    WEIGHT_SCALE,
    AmbiguitySpec,
    FederationConfig,
    ModelFamily,
    TabularDataset,
    gen_linear_clients,
    gen_logistic_clients,
    load_csv,
    standardize,
)
from .dro import train_robust
from .errors import CSRCFLError, ParseError, SchemaError, ValidationError
from .fedsim import run_protocol
from .models import TrainSettings, empirical_loss, train_erm


class Scenario(str, enum.Enum):
    SYNTHETIC_LINEAR = "SyntheticLinear"
    SYNTHETIC_LOGISTIC = "SyntheticLogistic"
    CSV_FEDERATION = "CsvFederation"


class Arm(str, enum.Enum):
    LOCAL = "Local"
    ROBUST_LOCAL = "RobustLocal"
    CFL_EPS0 = "CFL_eps0"
    CS_RCFL = "CS_RCFL"


ARM_ORDER = {arm: i for i, arm in enumerate(Arm)}


# -- epsilon rules -------------------------------------------------------------


def epsilon_policy_sample_count(n_samples: int, family) -> float:
    """Radius used by the clustered arm: larger for small clients (``n <= 100``)."""
    if n_samples < 1:
        raise ValidationError("n_samples must be >= 1")
    family = ModelFamily.coerce(family)
    if family is ModelFamily.LINEAR_L1:
        return 1.0 if n_samples > 100 else 2.0
    return 0.5 if n_samples > 100 else 1.0


def epsilon_robust_local(n_samples: int, family) -> float:
    """Radius for the robust local arm: policy values for linear, ``0.05 / 0.1`` for logistic."""
    family = ModelFamily.coerce(family)
    if family is ModelFamily.LINEAR_L1:
        return epsilon_policy_sample_count(n_samples, family)
    return 0.05 if n_samples > 100 else 0.1


def cross_validate_epsilon(
    dataset: TabularDataset,
    family,
    candidate_grid: Sequence[float] = (0.001, 0.01, 0.1),
    n_folds: int = 3,
    rng_seed=0,
    settings: TrainSettings | None = None,
    kappa: float = 1.0,
) -> float:
    """Grid value with the lowest mean held-out loss of the robust model.

    Ties go to the smaller radius.
    """
    grid = sorted(float(e) for e in candidate_grid)
    if not grid:
        raise ValidationError("candidate_grid must not be empty")
    if n_folds < 2:
        raise ValidationError("n_folds must be >= 2")
    if dataset.n_samples < n_folds:
        raise ValidationError(
            f"dataset {dataset.client_id!r} has {dataset.n_samples} samples, fewer than {n_folds} folds"
        )
    if len(grid) == 1:
        return grid[0]
    family = ModelFamily.coerce(family)
    folds = list(KFold(n_folds, shuffle=True, random_state=_sk_seed(rng_seed)).split(dataset.features))
    best_eps, best_loss = grid[0], np.inf
    for eps in grid:
        spec = AmbiguitySpec(eps, kappa)
        losses = []
        for train_idx, val_idx in folds:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                model = train_robust(dataset.subset(train_idx), family, spec, settings)
            losses.append(empirical_loss(model, dataset.subset(val_idx)))
        loss = float(np.mean(losses))
        if loss < best_loss:
            best_eps, best_loss = eps, loss
    return best_eps


def _sk_seed(seed) -> int:
    return int(np.random.default_rng(seed).integers(0, 2**31 - 1))


# -- experiment configs and records ---------------------------------------------


def _enum(cls, value):
    try:
        return cls(value)
    except ValueError:
        raise ValidationError(f"unknown {cls.__name__} {value!r}; expected one of {[m.value for m in cls]}") from None


@dataclass(frozen=True)
class CsvSource:
    """Where a CSV federation comes from.

    Either ``paths`` (one file per client) or a single ``path`` whose
    ``client_column`` says which client each row belongs to.
    """

    target_column: str
    feature_columns: tuple
    path: str | None = None
    client_column: str | None = None
    paths: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "feature_columns", tuple(self.feature_columns))
        object.__setattr__(self, "paths", tuple(str(p) for p in self.paths))
        if bool(self.paths) == bool(self.path):
            raise ValidationError("CsvSource needs exactly one of 'paths' or 'path'")
        if self.path and not self.client_column:
            raise ValidationError("CsvSource with a single 'path' needs 'client_column'")


@dataclass(frozen=True)
class ExperimentSpec:
    """A full experiment.

    ``epsilon`` is ``"sample_count"`` (per-client rule), ``"cv"``
    (per-client cross-validation over ``cv_grid``) or a number used by
    every client. ``standardize=None`` standardizes CSV clients only.
    """

    scenario: Scenario
    k_values: tuple = tuple(range(3, 11))
    arms: tuple = tuple(Arm)
    seeds: tuple = (0,)
    n_clients: int = 10
    n_features: int = 50
    samples_range: tuple | None = None
    n_true_weights: int = 3
    noise_sigma: float = 5.0
    weight_scale: float = WEIGHT_SCALE
    covariance: str = COVARIANCE
    n_test_sets: int = 10
    test_size: int = 100
    epsilon: object = "sample_count"
    kappa: float = 1.0
    cv_grid: tuple = (0.001, 0.01, 0.1)
    cv_folds: int = 3
    csv: CsvSource | None = None
    family: ModelFamily | None = None
    test_fraction: float = 0.3
    standardize: bool | None = None
    exact_limit: int = 12
    restarts: int = 20
    train: TrainSettings = field(default_factory=TrainSettings)
    threads: int = 1

    def __post_init__(self):
        scenario = _enum(Scenario, self.scenario)
        object.__setattr__(self, "scenario", scenario)
        object.__setattr__(self, "arms", tuple(_enum(Arm, a) for a in self.arms))
        object.__setattr__(self, "k_values", tuple(int(k) for k in self.k_values))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if scenario is Scenario.CSV_FEDERATION:
            if self.csv is None or self.family is None:
                raise ValidationError("CsvFederation needs 'csv' and 'family'")
            family = ModelFamily.coerce(self.family)
        else:
            family = (
                ModelFamily.LINEAR_L1 if scenario is Scenario.SYNTHETIC_LINEAR else ModelFamily.LOGISTIC
            )
            if self.samples_range is None:
                default = (50, 150) if family is ModelFamily.LINEAR_L1 else (100, 200)
                object.__setattr__(self, "samples_range", default)
            lo, hi = self.samples_range
            if not 1 <= lo <= hi:
                raise ValidationError(f"bad samples_range {self.samples_range}")
            bad = [k for k in self.k_values if not 1 <= k <= self.n_clients]
            if bad:
                raise ValidationError(f"K values {bad} outside [1, {self.n_clients}]")
        object.__setattr__(self, "family", family)
        if not self.arms or not self.seeds:
            raise ValidationError("arms and seeds must be non-empty")
        if self.n_test_sets < 1 or self.test_size < 1:
            raise ValidationError("n_test_sets and test_size must be >= 1")
        if not (isinstance(self.epsilon, (int, float)) or self.epsilon in ("sample_count", "cv")):
            raise ValidationError(f"epsilon must be a number, 'sample_count' or 'cv', got {self.epsilon!r}")
        if isinstance(self.epsilon, (int, float)) and self.epsilon < 0:
            raise ValidationError("epsilon must be >= 0")

    @property
    def do_standardize(self) -> bool:
        if self.standardize is None:
            return self.scenario is Scenario.CSV_FEDERATION
        return bool(self.standardize)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValidationError(f"unknown experiment keys {unknown}")
        if "scenario" not in d:
            raise SchemaError("experiment config needs 'scenario'")
        try:
            if d.get("csv") is not None:
                d["csv"] = CsvSource(**d["csv"])
            if isinstance(d.get("train"), dict):
                d["train"] = TrainSettings(**d["train"])
            for key in ("k_values", "arms", "seeds", "samples_range", "cv_grid"):
                if d.get(key) is not None:
                    d[key] = tuple(d[key])
            return cls(**d)
        except TypeError as exc:
            raise ValidationError(str(exc)) from None


@dataclass
class ResultRecord:
    arm: str
    k: int | None
    seed: int
    client_losses: list
    mean_loss: float
    std_loss: float
    ari: float | None
    seconds: float

    @classmethod
    def from_losses(cls, arm, k, seed, losses, ari, seconds):
        losses = [float(v) for v in losses]
        return cls(
            Arm(arm).value, k, int(seed), losses,
            float(np.mean(losses)), float(np.std(losses)),
            None if ari is None else float(ari), float(seconds),
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "ResultRecord":
        return cls(**d)

    def sort_key(self):
        return (ARM_ORDER[Arm(self.arm)], -1 if self.k is None else self.k, self.seed)


# -- federation builders ---------------------------------------------------------


@dataclass
class Federation:
    train: list
    tests: list  # tests[i] is a list of test datasets for client i
    family: ModelFamily
    truth: np.ndarray | None = None


def _synthetic_federation(spec: ExperimentSpec, seed: int) -> Federation:
    kwargs = dict(
        n_clients=spec.n_clients,
        n_features=spec.n_features,
        samples_range=spec.samples_range,
        n_true_weights=spec.n_true_weights,
        rng_seed=seed,
        weight_scale=spec.weight_scale,
        covariance=spec.covariance,
    )
    if spec.family is ModelFamily.LINEAR_L1:
        clients = gen_linear_clients(noise_sigma=spec.noise_sigma, **kwargs)
    else:
        clients = gen_logistic_clients(**kwargs)
    rng = np.random.default_rng([seed, 1])
    tests = [
        [clients.sample(i, spec.test_size, rng) for _ in range(spec.n_test_sets)]
        for i in range(clients.n_clients)
    ]
    train = list(clients.datasets)
    if spec.do_standardize:
        train, tests = _standardize_all(train, tests)
    return Federation(train, tests, spec.family, np.asarray(clients.labels))


def _standardize_all(train, tests):
    out_train, out_tests = [], []
    for d, ts in zip(train, tests):
        sd, record = standardize(d)
        out_train.append(sd)
        out_tests.append([record.apply(t) for t in ts])
    return out_train, out_tests


def read_csv_clients(source: CsvSource, family) -> list:
    """Load every client of a CSV federation, mapping 0/1 labels to -1/+1 for logistic."""
    family = ModelFamily.coerce(family)
    if source.paths:
        datasets = [load_csv(p, source.target_column, source.feature_columns) for p in source.paths]
    else:
        datasets = _load_grouped_csv(source)
    if family is ModelFamily.LOGISTIC:
        datasets = [signed_labels(d) for d in datasets]
    return datasets


def _load_grouped_csv(source: CsvSource) -> list:
    path = Path(source.path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        needed = [source.client_column, source.target_column, *source.feature_columns]
        missing = [c for c in needed if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {missing}")
        cidx = header.index(source.client_column)
        tidx = header.index(source.target_column)
        fidx = [header.index(c) for c in source.feature_columns]
        rows = defaultdict(lambda: ([], []))
        for r, row in enumerate(reader):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                vals = [float(row[j]) for j in fidx]
                target = float(row[tidx])
            except (IndexError, ValueError):
                raise ParseError(f"{path}: row {r}: non-numeric selected cell", row=r) from None
            if not np.all(np.isfinite(vals + [target])):
                raise ParseError(f"{path}: row {r}: non-finite selected cell", row=r)
            X, y = rows[row[cidx].strip()]
            X.append(vals)
            y.append(target)
    if not rows:
        raise ValidationError(f"{path}: no data rows")
    return [TabularDataset(np.array(X), np.array(y), cid) for cid, (X, y) in sorted(rows.items())]


def signed_labels(d: TabularDataset) -> TabularDataset:
    values = set(np.unique(d.targets).tolist())
    if values <= {-1.0, 1.0}:
        return d
    if values <= {0.0, 1.0}:
        return TabularDataset(d.features, 2.0 * d.targets - 1.0, d.client_id)
    raise ValidationError(f"client {d.client_id!r}: logistic targets must be in {{0,1}} or {{-1,+1}}")


def _csv_federation(spec: ExperimentSpec, seed: int) -> Federation:
    datasets = read_csv_clients(spec.csv, spec.family)
    train, tests = [], []
    for i, d in enumerate(datasets):
        stratify = d.targets if spec.family is ModelFamily.LOGISTIC and _can_stratify(d, spec.test_fraction) else None
        tr, te = train_test_split(
            np.arange(d.n_samples),
            test_size=spec.test_fraction,
            random_state=_sk_seed([seed, i]),
            stratify=stratify,
        )
        train.append(d.subset(np.sort(tr)))
        tests.append([d.subset(np.sort(te))])
    if spec.do_standardize:
        train, tests = _standardize_all(train, tests)
    return Federation(train, tests, spec.family)


def _can_stratify(d, test_fraction):
    _, counts = np.unique(d.targets, return_counts=True)
    n_test = int(np.ceil(test_fraction * d.n_samples))
    return counts.size > 1 and counts.min() >= 2 and n_test >= counts.size and d.n_samples - n_test >= counts.size


def build_federation(spec: ExperimentSpec, seed: int) -> Federation:
    if spec.scenario is Scenario.CSV_FEDERATION:
        return _csv_federation(spec, seed)
    return _synthetic_federation(spec, seed)


def ambiguity_specs(spec: ExperimentSpec, datasets, seed: int, rule=epsilon_policy_sample_count) -> list:
    if spec.epsilon == "sample_count":
        return [AmbiguitySpec(rule(d.n_samples, spec.family), spec.kappa) for d in datasets]
    if spec.epsilon == "cv":
        return [
            AmbiguitySpec(
                cross_validate_epsilon(d, spec.family, spec.cv_grid, spec.cv_folds, [seed, i], spec.train, spec.kappa),
                spec.kappa,
            )
            for i, d in enumerate(datasets)
        ]
    return [AmbiguitySpec(float(spec.epsilon), spec.kappa) for _ in datasets]


# -- running --------------------------------------------------------------------


def _test_losses(models, tests) -> list:
    return [float(np.mean([empirical_loss(m, t) for t in ts])) for m, ts in zip(models, tests)]


def _run_seed(spec: ExperimentSpec, seed: int) -> list:
    fed = build_federation(spec, seed)
    n = len(fed.train)
    ks = [k for k in spec.k_values if 1 <= k <= n]
    if len(ks) != len(spec.k_values):
        raise ValidationError(f"K values {spec.k_values} must lie in [1, {n}]")
    records = []
    arms = set(spec.arms)

    def ari(structure):
        return None if fed.truth is None else adjusted_rand_score(fed.truth, structure.assignment)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        local = None
        if arms & {Arm.LOCAL, Arm.CFL_EPS0}:
            t0 = time.perf_counter()
            local = [train_erm(d, fed.family, spec.train) for d in fed.train]
            if Arm.LOCAL in arms:
                records.append(ResultRecord.from_losses(
                    Arm.LOCAL, None, seed, _test_losses(local, fed.tests), None, time.perf_counter() - t0))

        if Arm.ROBUST_LOCAL in arms:
            t0 = time.perf_counter()
            robust_specs = ambiguity_specs(spec, fed.train, seed, epsilon_robust_local)
            models = [train_robust(d, fed.family, s, spec.train) for d, s in zip(fed.train, robust_specs)]
            records.append(ResultRecord.from_losses(
                Arm.ROBUST_LOCAL, None, seed, _test_losses(models, fed.tests), None, time.perf_counter() - t0))

        if Arm.CFL_EPS0 in arms:
            t_matrix = time.perf_counter()
            zero = [AmbiguitySpec(0.0, spec.kappa)] * n
            L0 = build_transfer_matrix(local, fed.train, zero, fed.family, spec.threads)
            t_matrix = time.perf_counter() - t_matrix
            for k in ks:
                t0 = time.perf_counter()
                structure = solve(L0, k, spec.exact_limit, spec.restarts, seed)
                models = assigned_models(local, structure)
                records.append(ResultRecord.from_losses(
                    Arm.CFL_EPS0, k, seed, _test_losses(models, fed.tests), ari(structure),
                    t_matrix + time.perf_counter() - t0))

        if Arm.CS_RCFL in arms:
            specs = ambiguity_specs(spec, fed.train, seed)
            for k in ks:
                t0 = time.perf_counter()
                config = FederationConfig(
                    fed.train, specs, k, fed.family, spec.train,
                    spec.exact_limit, spec.restarts, seed, spec.threads,
                )
                transcript = run_protocol(config)
                records.append(ResultRecord.from_losses(
                    Arm.CS_RCFL, k, seed, _test_losses(transcript.client_models(), fed.tests),
                    ari(transcript.structure), time.perf_counter() - t0))
    return records


def run_experiment(spec: ExperimentSpec) -> list:
    """All (arm, K, seed) cells, sorted by arm, then K, then seed."""
    records = []
    for seed in spec.seeds:
        try:
            records.extend(_run_seed(spec, seed))
        except CSRCFLError as exc:
            exc.args = (f"seed {seed}: {exc}",) + exc.args[1:]
            raise
    return sorted(records, key=ResultRecord.sort_key)


# -- output ---------------------------------------------------------------------

CSV_COLUMNS = ("arm", "k", "seed", "n_clients", "mean_loss", "std_loss", "ari")


def emit_results(records: Sequence[ResultRecord], out_dir) -> list:
    """Write ``results.csv``, ``results.json`` and ``summary.md`` under ``out_dir``.

    Wall-clock times are kept out of ``results.csv`` so it is reproducible
    byte for byte; ``results.json`` carries everything.
    """
    if not records:
        raise ValidationError("no records to emit")
    records = sorted(records, key=ResultRecord.sort_key)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    csv_path = out / "results.csv"
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in records:
            writer.writerow([
                r.arm, "" if r.k is None else r.k, r.seed, len(r.client_losses),
                repr(r.mean_loss), repr(r.std_loss), "" if r.ari is None else repr(r.ari),
            ])

    json_path = out / "results.json"
    json_path.write_text(json.dumps([r.to_dict() for r in records], indent=1), encoding="utf-8")

    md_path = out / "summary.md"
    md_path.write_text(summary_table(records), encoding="utf-8")
    return [csv_path, json_path, md_path]


def load_results(path) -> list:
    return [ResultRecord.from_dict(d) for d in json.loads(Path(path).read_text(encoding="utf-8"))]


def summarize(records) -> dict:
    """``{(arm, k): (mean, std)}`` of per-record mean loss across seeds."""
    cells = defaultdict(list)
    for r in records:
        cells[(r.arm, r.k)].append(r.mean_loss)
    return {key: (float(np.mean(v)), float(np.std(v))) for key, v in cells.items()}


def summary_table(records) -> str:
    cells = summarize(records)
    arms = sorted({a for a, _ in cells}, key=lambda a: ARM_ORDER[Arm(a)])
    ks = sorted({k for _, k in cells if k is not None})
    cols = ks or [None]
    lines = [
        "| arm | " + " | ".join("-" if k is None else f"K={k}" for k in cols) + " |",
        "|---" * (len(cols) + 1) + "|",
    ]
    for arm in arms:
        row = []
        for k in cols:
            cell = cells.get((arm, k), cells.get((arm, None)))
            row.append("" if cell is None else f"{cell[0]:.4g} ± {cell[1]:.2g}")
        lines.append(f"| {arm} | " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"

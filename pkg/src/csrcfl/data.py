"""Client datasets, model parameters, ambiguity radii and synthetic generators."""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ParseError, SchemaError, ValidationError


class ModelFamily(str, enum.Enum):
    LINEAR_L1 = "linear_l1"
    LOGISTIC = "logistic"

    @classmethod
    def coerce(cls, value) -> "ModelFamily":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValidationError(
                f"unknown model family {value!r}; expected one of {[m.value for m in cls]}"
            ) from None


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TabularDataset:
    """One client's labeled samples; the empirical distribution is uniform over rows."""

    features: np.ndarray
    targets: np.ndarray
    client_id: str = ""

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        y = np.asarray(self.targets, dtype=float)
        if X.ndim != 2:
            raise ValidationError(f"features must be 2-D, got shape {X.shape}")
        if y.ndim != 1:
            raise ValidationError(f"targets must be 1-D, got shape {y.shape}")
        if X.shape[0] < 1:
            raise ValidationError("dataset must contain at least one sample")
        if X.shape[0] != y.shape[0]:
            raise ValidationError(
                f"features have {X.shape[0]} rows but targets have {y.shape[0]}"
            )
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValidationError("dataset contains NaN or infinite entries")
        object.__setattr__(self, "features", _frozen(X))
        object.__setattr__(self, "targets", _frozen(y))
        object.__setattr__(self, "client_id", str(self.client_id))

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def is_binary(self) -> bool:
        return bool(np.all(np.abs(self.targets) == 1.0))

    def subset(self, index) -> "TabularDataset":
        index = np.asarray(index)
        return TabularDataset(self.features[index], self.targets[index], self.client_id)

    def __eq__(self, other):
        if not isinstance(other, TabularDataset):
            return NotImplemented
        return (
            self.client_id == other.client_id
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.targets, other.targets)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class ModelParams:
    weights: np.ndarray
    family: ModelFamily

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1:
            raise ValidationError(f"weights must be 1-D, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValidationError("weights contain NaN or infinite entries")
        object.__setattr__(self, "weights", _frozen(w))
        object.__setattr__(self, "family", ModelFamily.coerce(self.family))

    @property
    def n_features(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def zeros(cls, n_features: int, family) -> "ModelParams":
        return cls(np.zeros(n_features), family)

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return self.family == other.family and np.array_equal(self.weights, other.weights)

    __hash__ = None


@dataclass(frozen=True)
class AmbiguitySpec:
    """Wasserstein radius ``epsilon`` and label-flip cost ``kappa`` (logistic only)."""

    epsilon: float = 0.0
    kappa: float = 1.0

    def __post_init__(self):
        eps, kappa = float(self.epsilon), float(self.kappa)
        if not np.isfinite(eps) or eps < 0:
            raise ValidationError(f"epsilon must be finite and >= 0, got {self.epsilon!r}")
        if not np.isfinite(kappa) or kappa <= 0:
            raise ValidationError(f"kappa must be finite and > 0, got {self.kappa!r}")
        object.__setattr__(self, "epsilon", eps)
        object.__setattr__(self, "kappa", kappa)


@dataclass(frozen=True)
class FederationConfig:
    """Everything needed to run one federated round."""

    datasets: tuple
    specs: tuple
    n_coalitions: int
    family: ModelFamily
    train_settings: object = None
    exact_limit: int = 12
    restarts: int = 20
    rng_seed: int = 0
    threads: int = 1

    def __post_init__(self):
        datasets = tuple(self.datasets)
        specs = tuple(self.specs)
        if not datasets:
            raise ValidationError("a federation needs at least one client")
        if len(specs) != len(datasets):
            raise ValidationError(
                f"got {len(datasets)} datasets but {len(specs)} ambiguity specs"
            )
        n = len(datasets)
        if not 1 <= int(self.n_coalitions) <= n:
            raise ValidationError(f"n_coalitions must lie in [1, {n}], got {self.n_coalitions}")
        dims = {d.n_features for d in datasets}
        if len(dims) != 1:
            raise ValidationError(f"clients disagree on n_features: {sorted(dims)}")
        ids = [d.client_id for d in datasets]
        if len(set(ids)) != len(ids):
            raise ValidationError("client ids must be unique")
        object.__setattr__(self, "datasets", datasets)
        object.__setattr__(self, "specs", specs)
        object.__setattr__(self, "n_coalitions", int(self.n_coalitions))
        object.__setattr__(self, "family", ModelFamily.coerce(self.family))

    @property
    def n_clients(self) -> int:
        return len(self.datasets)


# -- CSV ingestion ---------------------------------------------------------


def load_csv(path, target_column: str, feature_columns: Sequence[str], client_id=None):
    """Read selected numeric columns of a headed CSV file into a dataset.

    Rows keep file order and no standardization is applied.
    """
    feature_columns = list(feature_columns)
    if not feature_columns:
        raise ValidationError("feature_columns must name at least one column")
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: file is empty, a header row is required") from None
        header = [h.strip() for h in header]
        missing = [c for c in [target_column, *feature_columns] if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {missing}")
        cols = [header.index(c) for c in feature_columns]
        tcol = header.index(target_column)
        X, y = [], []
        for row_idx, row in enumerate(reader):
            if not row or all(not cell.strip() for cell in row):
                continue
            X.append([_parse_cell(row, c, row_idx, header, path) for c in cols])
            y.append(_parse_cell(row, tcol, row_idx, header, path))
    if not X:
        raise ValidationError(f"{path}: no data rows")
    return TabularDataset(np.array(X), np.array(y), client_id or path.stem)


def _parse_cell(row, col, row_idx, header, path):
    try:
        value = float(row[col])
    except (IndexError, ValueError):
        raise ParseError(
            f"{path}: row {row_idx}: cannot parse column {header[col]!r} as a number",
            row=row_idx,
        ) from None
    if not np.isfinite(value):
        raise ParseError(
            f"{path}: row {row_idx}: column {header[col]!r} is not finite ({row[col]!r})",
            row=row_idx,
        )
    return value


def dataset_to_csv(dataset: TabularDataset, path, feature_names=None, target_name="y"):
    """Write a dataset with 17 significant digits, so it reloads bit-identically."""
    names = list(feature_names or [f"x{k}" for k in range(dataset.n_features)])
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([*names, target_name])
        for xrow, yv in zip(dataset.features, dataset.targets):
            writer.writerow([f"{v:.17g}" for v in xrow] + [f"{yv:.17g}"])
    return names


# -- standardization -------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Standardization:
    mean: np.ndarray
    scale: np.ndarray
    constant: np.ndarray

    def apply(self, dataset: TabularDataset) -> TabularDataset:
        X = (dataset.features - self.mean) / self.scale
        X[:, self.constant] = 0.0
        return TabularDataset(X, dataset.targets, dataset.client_id)


def standardize(dataset: TabularDataset):
    """Center and scale each feature with the population standard deviation.

    Constant columns become all zeros. Returns the new dataset and the
    record needed to apply the same transform to held-out data.
    """
    X = dataset.features
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    constant = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
    scale = np.where(constant, 1.0, std)
    record = Standardization(_frozen(mean), _frozen(scale), constant.copy())
    return record.apply(dataset), record


# -- synthetic clients -----------------------------------------------------

WEIGHT_SCALE = 10.0
COVARIANCE = "spd"


@dataclass(eq=False)
class SyntheticClients:
    """Generated clients plus the distributions they were drawn from.

    ``labels[i]`` is the index of the true weight vector behind client ``i``.
    """

    datasets: list
    labels: np.ndarray
    true_weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    family: ModelFamily
    noise_sigma: float = 0.0
    _chol: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self._chol is None:
            self._chol = np.linalg.cholesky(self.covariances)

    def __iter__(self):
        # allows ``datasets, labels = gen_linear_clients(...)``
        return iter((self.datasets, self.labels))

    @property
    def n_clients(self) -> int:
        return len(self.datasets)

    def sample(self, client: int, n_samples: int, rng) -> TabularDataset:
        """Draw fresh samples from client ``client``'s generating distribution."""
        rng = np.random.default_rng(rng)
        return _draw_client(
            rng,
            self.means[client],
            self._chol[client],
            self.true_weights[self.labels[client]],
            n_samples,
            self.family,
            self.noise_sigma,
            self.datasets[client].client_id,
        )


def _draw_client(rng, mean, chol, w, n, family, noise_sigma, client_id):
    z = rng.standard_normal((n, mean.shape[0]))
    X = mean + z @ chol.T
    score = X @ w
    if family is ModelFamily.LINEAR_L1:
        noise = rng.standard_normal(n) * noise_sigma if noise_sigma > 0 else np.zeros(n)
        y = score + noise
    else:
        # sigmoid(score) > 0.5  <=>  score > 0; ties go to -1
        y = np.where(score > 0, 1.0, -1.0)
    return TabularDataset(X, y, client_id)


def _check_generator_args(n_clients, n_features, samples_range, n_true_weights):
    lo, hi = (int(v) for v in samples_range)
    if n_clients < 1 or n_features < 1:
        raise ValidationError("n_clients and n_features must be >= 1")
    if lo < 1 or hi < lo:
        raise ValidationError(f"samples_range must satisfy 1 <= lo <= hi, got {samples_range}")
    if not 1 <= n_true_weights <= n_clients:
        raise ValidationError(
            f"n_true_weights must lie in [1, n_clients={n_clients}], got {n_true_weights}"
        )
    return lo, hi


def _random_covariance(rng, n_features, kind):
    if kind == "wishart":
        A = rng.standard_normal((n_features, n_features))
        return A @ A.T / n_features + 0.1 * np.eye(n_features)
    if kind == "spd":
        # random orthonormal basis, eigenvalues uniform in [1, 2)
        Q, R = np.linalg.qr(rng.standard_normal((n_features, n_features)))
        Q = Q * np.sign(np.diag(R))
        return (Q * (1.0 + rng.random(n_features))) @ Q.T
    raise ValidationError(f"unknown covariance kind {kind!r}; expected 'spd' or 'wishart'")


def _generate(family, n_clients, n_features, samples_range, n_true_weights,
              noise_sigma, rng_seed, weight_scale, covariance):
    lo, hi = _check_generator_args(n_clients, n_features, samples_range, n_true_weights)
    if noise_sigma < 0:
        raise ValidationError("noise_sigma must be >= 0")
    if not weight_scale > 0:
        raise ValidationError("weight_scale must be > 0")
    rng = np.random.default_rng(rng_seed)
    true_weights = weight_scale * rng.standard_normal((n_true_weights, n_features))
    labels = np.arange(n_clients) % n_true_weights
    means = np.empty((n_clients, n_features))
    covs = np.empty((n_clients, n_features, n_features))
    chols = np.empty_like(covs)
    datasets = []
    for i in range(n_clients):
        n_i = int(rng.integers(lo, hi, endpoint=True))
        means[i] = rng.standard_normal(n_features)
        covs[i] = _random_covariance(rng, n_features, covariance)
        chols[i] = np.linalg.cholesky(covs[i])
        datasets.append(
            _draw_client(
                rng, means[i], chols[i], true_weights[labels[i]], n_i,
                family, noise_sigma, f"client-{i:02d}",
            )
        )
    return SyntheticClients(
        datasets, labels, true_weights, means, covs, family, float(noise_sigma), chols
    )


def gen_linear_clients(
    n_clients=10,
    n_features=50,
    samples_range=(50, 150),
    n_true_weights=3,
    noise_sigma=5.0,
    rng_seed=0,
    weight_scale=WEIGHT_SCALE,
    covariance=COVARIANCE,
) -> SyntheticClients:
    """Clients with ``y = w.x + noise`` and ``x ~ N(mu_i, Sigma_i)``.

    Clients are assigned round-robin to ``n_true_weights`` ground-truth
    weight vectors drawn from ``N(0, weight_scale^2 I)``; ``mu_i ~ N(0, I)``.
    ``covariance="spd"`` rotates eigenvalues uniform in [1, 2) by a random
    orthonormal basis; ``"wishart"`` uses ``A A^T / n_features + 0.1 I``.
    """
    return _generate(
        ModelFamily.LINEAR_L1, n_clients, n_features, samples_range,
        n_true_weights, noise_sigma, rng_seed, weight_scale, covariance,
    )


def gen_logistic_clients(
    n_clients=10,
    n_features=50,
    samples_range=(100, 200),
    n_true_weights=3,
    rng_seed=0,
    weight_scale=WEIGHT_SCALE,
    covariance=COVARIANCE,
) -> SyntheticClients:
    """Clients labeled +1 where ``sigmoid(w.x) > 0.5`` and -1 otherwise.

    Features are drawn as in :func:`gen_linear_clients`.
    """
    return _generate(
        ModelFamily.LOGISTIC, n_clients, n_features, samples_range,
        n_true_weights, 0.0, rng_seed, weight_scale, covariance,
    )

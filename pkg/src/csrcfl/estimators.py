"""scikit-learn estimators over the functional core.

``RobustL1Regressor`` and ``RobustLogisticClassifier`` train one client's
model (plain ERM at ``epsilon=0``). ``RobustCoalitionClustering`` partitions
clients given a precomputed transfer-loss matrix. ``ClusteredFederatedModel``
runs the whole federated round on a list of client datasets.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, ClusterMixin, RegressorMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y
from scipy.special import expit

from .coalition import EXACT_LIMIT, TransferLossMatrix, solve
from .data import AmbiguitySpec, FederationConfig, ModelFamily, TabularDataset
from .dro import robust_loss, train_robust
from .errors import ValidationError
from .experiments import epsilon_policy_sample_count
from .fedsim import run_protocol
from .models import TrainSettings


def _settings(est) -> TrainSettings:
    return TrainSettings(
        max_iters=est.max_iters,
        initial_step=est.initial_step,
        tolerance=est.tol,
        linear_solver=getattr(est, "solver", "lp"),
    )


class RobustL1Regressor(RegressorMixin, BaseEstimator):
    """Absolute-loss linear regression, robust to Wasserstein shifts of radius ``epsilon``.

    No intercept is fitted; center the data or add a constant column.
    """

    def __init__(self, epsilon=0.0, max_iters=1000, initial_step=1.0, tol=1e-6, solver="lp"):
        self.epsilon = epsilon
        self.max_iters = max_iters
        self.initial_step = initial_step
        self.tol = tol
        self.solver = solver

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        data = TabularDataset(X, y)
        spec = AmbiguitySpec(self.epsilon)
        params = train_robust(data, ModelFamily.LINEAR_L1, spec, _settings(self))
        self.coef_ = params.weights.copy()
        self.robust_loss_ = robust_loss(params, data, spec).value
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self)
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X @ self.coef_


class RobustLogisticClassifier(ClassifierMixin, BaseEstimator):
    """Binary logistic regression, robust to Wasserstein shifts with label-flip cost ``kappa``."""

    def __init__(self, epsilon=0.0, kappa=1.0, max_iters=1000, initial_step=1.0, tol=1e-6):
        self.epsilon = epsilon
        self.kappa = kappa
        self.max_iters = max_iters
        self.initial_step = initial_step
        self.tol = tol

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        check_classification_targets(y)
        self.classes_ = np.unique(y)
        if self.classes_.shape[0] != 2:
            raise ValueError(f"need exactly two classes, got {self.classes_.shape[0]}")
        signed = np.where(y == self.classes_[1], 1.0, -1.0)
        data = TabularDataset(X, signed)
        spec = AmbiguitySpec(self.epsilon, self.kappa)
        params = train_robust(data, ModelFamily.LOGISTIC, spec, _settings(self))
        self.coef_ = params.weights.copy()
        self.robust_loss_ = robust_loss(params, data, spec).value
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self)
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X @ self.coef_

    def predict_proba(self, X):
        p = expit(self.decision_function(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        # score exactly 0 goes to the negative class
        return np.where(self.decision_function(X) > 0, self.classes_[1], self.classes_[0])


class RobustCoalitionClustering(ClusterMixin, BaseEstimator):
    """Partition clients from a square transfer-loss matrix ``X`` (rows evaluate, columns own)."""

    def __init__(self, n_coalitions=3, exact_limit=EXACT_LIMIT, restarts=20, random_state=0):
        self.n_coalitions = n_coalitions
        self.exact_limit = exact_limit
        self.restarts = restarts
        self.random_state = random_state

    def fit(self, X, y=None):
        L = TransferLossMatrix(check_array(X)).entries
        structure = solve(L, self.n_coalitions, self.exact_limit, self.restarts, self.random_state)
        self.labels_ = structure.assignment.copy()
        self.objective_ = structure.objective
        self.solver_status_ = structure.solver_status.value
        return self


class ClusteredFederatedModel(BaseEstimator):
    """One federated round over a list of client datasets.

    ``fit(Xs, ys)`` takes one feature matrix and one target vector per
    client. ``epsilon`` is ``"sample_count"``, a number, or one number
    per client.
    """

    def __init__(
        self,
        family="linear_l1",
        n_coalitions=3,
        epsilon="sample_count",
        kappa=1.0,
        max_iters=1000,
        initial_step=1.0,
        tol=1e-6,
        exact_limit=EXACT_LIMIT,
        restarts=20,
        random_state=0,
    ):
        self.family = family
        self.n_coalitions = n_coalitions
        self.epsilon = epsilon
        self.kappa = kappa
        self.max_iters = max_iters
        self.initial_step = initial_step
        self.tol = tol
        self.exact_limit = exact_limit
        self.restarts = restarts
        self.random_state = random_state

    def _specs(self, datasets, family):
        eps = self.epsilon
        if isinstance(eps, str):
            if eps != "sample_count":
                raise ValidationError(f"unknown epsilon rule {eps!r}")
            values = [epsilon_policy_sample_count(d.n_samples, family) for d in datasets]
        elif np.ndim(eps) == 0:
            values = [float(eps)] * len(datasets)
        else:
            values = [float(e) for e in eps]
            if len(values) != len(datasets):
                raise ValidationError(f"{len(values)} radii for {len(datasets)} clients")
        return [AmbiguitySpec(e, self.kappa) for e in values]

    def fit(self, Xs, ys):
        family = ModelFamily.coerce(self.family)
        if len(Xs) != len(ys):
            raise ValidationError(f"{len(Xs)} feature matrices but {len(ys)} target vectors")
        datasets = []
        for i, (X, y) in enumerate(zip(Xs, ys)):
            X, y = check_X_y(X, y, y_numeric=True)
            datasets.append(TabularDataset(X, y, f"client-{i:02d}"))
        config = FederationConfig(
            datasets, self._specs(datasets, family), self.n_coalitions, family,
            _settings(self), self.exact_limit, self.restarts, self.random_state,
        )
        self.transcript_ = run_protocol(config)
        self.labels_ = self.transcript_.structure.assignment.copy()
        self.objective_ = self.transcript_.structure.objective
        self.coalition_coef_ = np.array(
            [self.transcript_.coalition_models[k].weights for k in range(self.n_coalitions)]
        )
        self.coef_ = self.coalition_coef_[self.labels_]
        self.n_features_in_ = datasets[0].n_features
        return self

    def decision_function(self, X, client):
        check_is_fitted(self)
        X = check_array(X)
        return X @ self.coef_[client]

    def predict(self, X, client):
        """Predictions of ``client``'s coalition model (labels in {-1, +1} for logistic)."""
        score = self.decision_function(X, client)
        if ModelFamily.coerce(self.family) is ModelFamily.LOGISTIC:
            return np.where(score > 0, 1.0, -1.0)
        return score

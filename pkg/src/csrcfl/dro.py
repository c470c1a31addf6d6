"""Worst-case expected loss over a 1-Wasserstein ball around a client's data.

Both model families admit finite dual forms at fixed weights:

* absolute-loss linear regression, with the joint l2 metric on ``(x, y)``:
  ``eps * sqrt(||w||^2 + 1) + mean|y - x.w|``;
* logistic regression, with metric ``||x - x'||_2 + kappa * |y - y'| / 2``:
  ``min_{alpha >= ||w||} eps * alpha + mean_p max(l(x_p, y_p), l(x_p, -y_p) - alpha * kappa)``.

The second is convex and piecewise linear in ``alpha``, so it is minimized
exactly by scanning its breakpoints.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .data import AmbiguitySpec, ModelFamily, ModelParams, TabularDataset
from .errors import ValidationError
from .models import TrainSettings, check_compatible, subgradient_descent, train_erm


@dataclass(frozen=True)
class RobustLossValue:
    """Worst-case loss with its dual certificate.

    ``value == epsilon * alpha + empirical_part``; for the logistic family
    ``empirical_part`` is the mean of the per-sample envelope terms.
    """

    value: float
    alpha: float
    empirical_part: float

    def __float__(self):
        return self.value


def _check_family(params: ModelParams, expected: ModelFamily):
    if params.family is not expected:
        raise ValidationError(f"expected a {expected.value} model, got {params.family.value}")


# -- linear ----------------------------------------------------------------


def _linear_value(w, X, y, eps):
    alpha = np.sqrt(float(w @ w) + 1.0)
    emp = float(np.abs(y - X @ w).mean())
    return eps * alpha + emp, alpha, emp


def robust_loss_linear(params: ModelParams, dataset: TabularDataset, spec: AmbiguitySpec) -> RobustLossValue:
    _check_family(params, ModelFamily.LINEAR_L1)
    check_compatible(params.weights, dataset, params.family)
    value, alpha, emp = _linear_value(params.weights, dataset.features, dataset.targets, spec.epsilon)
    return RobustLossValue(value, alpha, emp)


def _linear_objective(X, y, eps):
    n = X.shape[0]

    def objective(w):
        value, alpha, _ = _linear_value(w, X, y, eps)
        grad = eps * w / alpha - X.T @ np.sign(y - X @ w) / n
        return value, grad

    return objective


# -- logistic --------------------------------------------------------------


def _logistic_dual(w, X, y, eps, kappa):
    """Exact minimizer over alpha; returns ``(value, alpha, envelope, margins)``."""
    margin = y * (X @ w)
    own = np.logaddexp(0.0, -margin)
    alpha_min = float(np.linalg.norm(w))
    if eps == 0.0:
        return float(own.mean()), alpha_min, own, margin
    flipped = np.logaddexp(0.0, margin)
    # flipped - own == margin exactly; using margin avoids cancellation
    breakpoints = np.maximum(0.0, margin / kappa)
    ahead = np.sort(breakpoints[breakpoints > alpha_min])
    # slope of the objective at alpha is eps - kappa * #{breakpoints > alpha} / n
    allowed = int(np.floor(eps * margin.shape[0] / kappa))
    if ahead.shape[0] <= allowed:
        alpha = alpha_min
    else:
        alpha = float(ahead[ahead.shape[0] - 1 - allowed])
    envelope = np.maximum(own, flipped - alpha * kappa)
    return eps * alpha + float(envelope.mean()), alpha, envelope, margin


def robust_loss_logistic(params: ModelParams, dataset: TabularDataset, spec: AmbiguitySpec) -> RobustLossValue:
    _check_family(params, ModelFamily.LOGISTIC)
    check_compatible(params.weights, dataset, params.family)
    value, alpha, envelope, _ = _logistic_dual(
        params.weights, dataset.features, dataset.targets, spec.epsilon, spec.kappa
    )
    return RobustLossValue(value, alpha, float(envelope.mean()))


def logistic_dual_objective(alpha, params: ModelParams, dataset: TabularDataset, spec: AmbiguitySpec) -> float:
    """The one-dimensional function of ``alpha`` that the breakpoint scan minimizes."""
    margin = dataset.targets * (dataset.features @ params.weights)
    own = np.logaddexp(0.0, -margin)
    flipped = np.logaddexp(0.0, margin)
    return spec.epsilon * alpha + float(np.maximum(own, flipped - alpha * spec.kappa).mean())


def _logistic_objective(X, y, eps, kappa):
    n = X.shape[0]

    def objective(w):
        value, alpha, _, margin = _logistic_dual(w, X, y, eps, kappa)
        own = np.logaddexp(0.0, -margin)
        if eps == 0.0:
            return value, -(X.T @ (y * expit(-margin))) / n
        use_flip = np.logaddexp(0.0, margin) - alpha * kappa > own
        # d/dw of own loss is -y x sigmoid(-m); of the flipped loss, +y x sigmoid(m)
        coef = np.where(use_flip, y * expit(margin), -y * expit(-margin))
        grad = X.T @ coef / n
        wnorm = np.linalg.norm(w)
        if wnorm > 0 and alpha <= wnorm:
            # alpha is pinned to ||w|| and moves with it
            grad = grad + (eps - kappa * use_flip.mean()) * w / wnorm
        return value, grad

    return objective


# -- dispatch and training -------------------------------------------------


def robust_loss(params: ModelParams, dataset: TabularDataset, spec: AmbiguitySpec) -> RobustLossValue:
    if params.family is ModelFamily.LINEAR_L1:
        return robust_loss_linear(params, dataset, spec)
    return robust_loss_logistic(params, dataset, spec)


def robust_objective(dataset: TabularDataset, family, spec: AmbiguitySpec):
    """``w -> (robust loss, subgradient)`` with the inner dual variable optimal."""
    family = ModelFamily.coerce(family)
    X, y = dataset.features, dataset.targets
    if family is ModelFamily.LINEAR_L1:
        return _linear_objective(X, y, spec.epsilon)
    return _logistic_objective(X, y, spec.epsilon, spec.kappa)


def train_robust(
    dataset: TabularDataset,
    family,
    spec: AmbiguitySpec,
    settings: TrainSettings | None = None,
) -> ModelParams:
    """Minimize the worst-case loss over the client's ambiguity ball.

    Runs the subgradient method from the ERM solution and keeps the best
    of that run and the zero vector. At ``epsilon == 0`` the two
    objectives coincide and the ERM solution is returned as is.
    """
    family = ModelFamily.coerce(family)
    settings = settings or TrainSettings()
    erm = train_erm(dataset, family, settings)
    if spec.epsilon == 0.0:
        return erm
    objective = robust_objective(dataset, family, spec)
    w, f = subgradient_descent(objective, erm.weights, settings)
    zero = np.zeros(dataset.n_features)
    if objective(zero)[0] <= f:
        w = zero
    return ModelParams(w, family)

"""Empirical losses and local (non-robust) training for the two model families."""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog
from scipy.special import expit

from .data import ModelFamily, ModelParams, TabularDataset
from .errors import ValidationError

SINGLE_CLASS_RIDGE = 1e-6
ARMIJO_C = 1e-4
SHRINK = 0.5


class StepRule(str, enum.Enum):
    CONSTANT_OVER_SQRT_T = "constant_over_sqrt_t"
    BACKTRACKING = "backtracking"


@dataclass(frozen=True)
class TrainSettings:
    """Solver knobs shared by local and robust training.

    ``step_rule=None`` picks the natural rule per family: diminishing
    steps for the nonsmooth absolute loss, Armijo backtracking for the
    logistic loss. ``linear_solver`` selects how absolute-loss ERM is
    solved: ``"lp"`` (exact linear program) or ``"subgradient"``.
    """

    max_iters: int = 1000
    step_rule: StepRule | None = None
    initial_step: float = 1.0
    tolerance: float = 1e-6
    rng_seed: int = 0
    linear_solver: str = "lp"

    def __post_init__(self):
        if int(self.max_iters) < 1:
            raise ValidationError(f"max_iters must be >= 1, got {self.max_iters}")
        if not self.tolerance > 0:
            raise ValidationError(f"tolerance must be > 0, got {self.tolerance}")
        if not self.initial_step > 0:
            raise ValidationError(f"initial_step must be > 0, got {self.initial_step}")
        if self.linear_solver not in ("lp", "subgradient"):
            raise ValidationError(f"unknown linear_solver {self.linear_solver!r}")
        if self.step_rule is not None:
            try:
                object.__setattr__(self, "step_rule", StepRule(self.step_rule))
            except ValueError:
                raise ValidationError(f"unknown step_rule {self.step_rule!r}") from None
        object.__setattr__(self, "max_iters", int(self.max_iters))

    def rule_for(self, family: ModelFamily) -> StepRule:
        if self.step_rule is not None:
            return self.step_rule
        if family is ModelFamily.LOGISTIC:
            return StepRule.BACKTRACKING
        return StepRule.CONSTANT_OVER_SQRT_T


def check_compatible(weights: np.ndarray, dataset: TabularDataset, family: ModelFamily):
    if weights.shape[0] != dataset.n_features:
        raise ValidationError(
            f"model has {weights.shape[0]} weights but dataset "
            f"{dataset.client_id!r} has {dataset.n_features} features"
        )
    if family is ModelFamily.LOGISTIC and not dataset.is_binary:
        raise ValidationError(
            f"logistic model evaluated on dataset {dataset.client_id!r} whose targets are not in {{-1, +1}}"
        )


def pointwise_loss(weights, X, y, family: ModelFamily) -> np.ndarray:
    score = X @ weights
    if family is ModelFamily.LINEAR_L1:
        return np.abs(y - score)
    return np.logaddexp(0.0, -y * score)


def _loss_and_grad(weights, X, y, family):
    """Mean loss and a (sub)gradient with respect to the weights."""
    n = X.shape[0]
    score = X @ weights
    if family is ModelFamily.LINEAR_L1:
        resid = y - score
        return np.abs(resid).mean(), -(X.T @ np.sign(resid)) / n
    margin = y * score
    return np.logaddexp(0.0, -margin).mean(), -(X.T @ (y * expit(-margin))) / n


def empirical_loss(params: ModelParams, dataset: TabularDataset) -> float:
    """Sample mean of the pointwise loss under the client's empirical distribution."""
    check_compatible(params.weights, dataset, params.family)
    return float(pointwise_loss(params.weights, dataset.features, dataset.targets, params.family).mean())


def loss_gradient(params: ModelParams, dataset: TabularDataset) -> np.ndarray:
    """Gradient (logistic) or the sign subgradient (absolute loss) of ``empirical_loss``."""
    check_compatible(params.weights, dataset, params.family)
    return _loss_and_grad(params.weights, dataset.features, dataset.targets, params.family)[1]


# -- generic first-order loops --------------------------------------------


def subgradient_descent(objective, x0, settings: TrainSettings, history=None):
    """Subgradient method with steps ``initial_step / sqrt(t + 1)``.

    ``objective(x)`` returns ``(value, subgradient)``. The best iterate
    seen is returned, so the result never scores worse than ``x0``.
    """
    x = np.array(x0, dtype=float)
    f, g = objective(x)
    best_x, best_f = x.copy(), f
    for t in range(settings.max_iters):
        gnorm = np.linalg.norm(g)
        if gnorm == 0.0:
            break
        x = x - settings.initial_step / np.sqrt(t + 1) * g
        f, g = objective(x)
        if history is not None:
            history.append(f)
        if f < best_f:
            best_x, best_f = x.copy(), f
    return best_x, best_f


def backtracking_descent(objective, x0, settings: TrainSettings, history=None):
    """Gradient descent with an Armijo line search; stops once the gradient norm reaches tolerance."""
    x = np.array(x0, dtype=float)
    f, g = objective(x)
    step = settings.initial_step
    for _ in range(settings.max_iters):
        gg = float(g @ g)
        if np.sqrt(gg) <= settings.tolerance:
            break
        step = min(settings.initial_step, 2.0 * step)
        while True:
            x_new = x - step * g
            f_new, g_new = objective(x_new)
            if f_new <= f - ARMIJO_C * step * gg:
                break
            step *= SHRINK
            if step < 1e-20:
                return x, f
        x, f, g = x_new, f_new, g_new
        if history is not None:
            history.append(f)
    return x, f


def _lad_linear_program(X, y):
    """Least absolute deviations as an LP: min mean(u + v) s.t. X w + u - v = y."""
    n, p = X.shape
    c = np.concatenate([np.zeros(p), np.full(2 * n, 1.0 / n)])
    A_eq = np.hstack([X, np.eye(n), -np.eye(n)])
    bounds = [(None, None)] * p + [(0, None)] * (2 * n)
    res = linprog(c, A_eq=A_eq, b_eq=y, bounds=bounds, method="highs")
    if res.status != 0:
        return None
    return res.x[:p]


def train_erm(dataset: TabularDataset, family, settings: TrainSettings | None = None) -> ModelParams:
    """Minimize the empirical loss starting from the zero vector."""
    family = ModelFamily.coerce(family)
    settings = settings or TrainSettings()
    X, y = dataset.features, dataset.targets
    w0 = np.zeros(dataset.n_features)
    check_compatible(w0, dataset, family)

    if family is ModelFamily.LINEAR_L1:
        if settings.linear_solver == "lp":
            w = _lad_linear_program(X, y)
            if w is not None and _loss_and_grad(w, X, y, family)[0] <= np.abs(y).mean():
                return ModelParams(w, family)
        w, _ = subgradient_descent(lambda v: _loss_and_grad(v, X, y, family), w0, settings)
        return ModelParams(w, family)

    objective = _logistic_objective(dataset)
    rule = settings.rule_for(family)
    if rule is StepRule.BACKTRACKING:
        w, _ = backtracking_descent(objective, w0, settings)
    else:
        w, _ = subgradient_descent(objective, w0, settings)
    return ModelParams(w, family)


def _logistic_objective(dataset: TabularDataset):
    X, y = dataset.features, dataset.targets
    family = ModelFamily.LOGISTIC
    if np.unique(y).size > 1:
        return lambda w: _loss_and_grad(w, X, y, family)
    warnings.warn(
        f"dataset {dataset.client_id!r} has a single label class; the logistic "
        f"minimizer is unbounded, adding ridge {SINGLE_CLASS_RIDGE:g}*||w||^2",
        RuntimeWarning,
        stacklevel=3,
    )

    def ridged(w):
        f, g = _loss_and_grad(w, X, y, family)
        return f + SINGLE_CLASS_RIDGE * float(w @ w), g + 2 * SINGLE_CLASS_RIDGE * w

    return ridged

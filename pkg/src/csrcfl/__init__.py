"""Distributionally robust clustered federated learning."""

from .coalition import (
    CoalitionStructure,
    SolverStatus,
    TransferLossMatrix,
    aggregate,
    build_transfer_matrix,
    objective_value,
    solve,
    solve_exact,
    solve_heuristic,
)
from .data import (
    AmbiguitySpec,
    FederationConfig,
    ModelFamily,
    ModelParams,
    TabularDataset,
    gen_linear_clients,
    gen_logistic_clients,
    load_csv,
    standardize,
)
from .dro import RobustLossValue, robust_loss, robust_loss_linear, robust_loss_logistic, train_robust
from .errors import CapacityError, CSRCFLError, ParseError, ProtocolError, SchemaError, ValidationError
from .estimators import (
    ClusteredFederatedModel,
    RobustCoalitionClustering,
    RobustL1Regressor,
    RobustLogisticClassifier,
)
from .experiments import (
    Arm,
    ExperimentSpec,
    ResultRecord,
    Scenario,
    cross_validate_epsilon,
    emit_results,
    epsilon_policy_sample_count,
    run_experiment,
)
from .fedsim import ProtocolMessage, ProtocolTranscript, run_direct, run_protocol, verify_anonymity
from .models import TrainSettings, empirical_loss, train_erm

__version__ = "0.1.0"

__all__ = [
    "aggregate",
    "AmbiguitySpec",
    "Arm",
    "build_transfer_matrix",
    "CapacityError",
    "ClusteredFederatedModel",
    "CoalitionStructure",
    "cross_validate_epsilon",
    "CSRCFLError",
    "emit_results",
    "empirical_loss",
    "epsilon_policy_sample_count",
    "ExperimentSpec",
    "FederationConfig",
    "gen_linear_clients",
    "gen_logistic_clients",
    "load_csv",
    "ModelFamily",
    "ModelParams",
    "objective_value",
    "ParseError",
    "ProtocolError",
    "ProtocolMessage",
    "ProtocolTranscript",
    "ResultRecord",
    "robust_loss",
    "robust_loss_linear",
    "robust_loss_logistic",
    "RobustCoalitionClustering",
    "RobustL1Regressor",
    "RobustLogisticClassifier",
    "RobustLossValue",
    "run_direct",
    "run_experiment",
    "run_protocol",
    "Scenario",
    "SchemaError",
    "solve",
    "solve_exact",
    "solve_heuristic",
    "SolverStatus",
    "standardize",
    "TabularDataset",
    "train_erm",
    "train_robust",
    "TrainSettings",
    "TransferLossMatrix",
    "ValidationError",
    "verify_anonymity",
]

"""Deterministic federated-learning simulator for heterogeneous clients.

Provides from-scratch differentiable models, a synthetic non-IID federation
generator with planted client clusters, a replayable round engine with
pay-per-access budgets, and the full strategy catalogue: weighted averaging,
three clustered schemes, three personalization schemes, consensus
distillation across heterogeneous architectures, one-shot ensembling, and
one-class anomaly detection.
"""

from .datagen import ClientDataset, FederationConfig, generate_federation
from .engine import (
    AccessBudget,
    ClientView,
    FedAvg,
    FederationState,
    Hyperparams,
    RoundRecord,
    Strategy,
    charge_access,
    global_loss,
    run_round,
    weighted_average,
)
from .errors import (
    BudgetExhaustedError,
    ConfigError,
    ContractViolationError,
    DomainError,
    FedbankError,
    ParseError,
    SchemaError,
    ShapeError,
    SimulationHalted,
    UndefinedSimilarityError,
)
from .experiment import ExperimentConfig, ResultsBundle, run_experiment
from .models import Batch, ModelSpec, forward, init_params, loss_and_grad, sgd_train

__version__ = "0.1.0"

__all__ = [
    "AccessBudget",
    "Batch",
    "BudgetExhaustedError",
    "ClientDataset",
    "ClientView",
    "ConfigError",
    "ContractViolationError",
    "DomainError",
    "ExperimentConfig",
    "FedAvg",
    "FedbankError",
    "FederationConfig",
    "FederationState",
    "Hyperparams",
    "ModelSpec",
    "ParseError",
    "ResultsBundle",
    "RoundRecord",
    "SchemaError",
    "ShapeError",
    "SimulationHalted",
    "Strategy",
    "UndefinedSimilarityError",
    "charge_access",
    "forward",
    "generate_federation",
    "global_loss",
    "init_params",
    "loss_and_grad",
    "run_round",
    "run_experiment",
    "sgd_train",
    "weighted_average",
    "__version__",
]

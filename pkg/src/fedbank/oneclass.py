"""Federated one-class fraud detection with reconstruction autoencoders.

Clients hold only normal rows; a shared autoencoder is trained by plain
federated averaging on squared reconstruction error. Examples are scored by
per-row mean squared reconstruction error and flagged as anomalies above a
threshold calibrated to a target false-positive rate on normal validation
scores.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .datagen import ClientDataset
from .engine import FedAvg, FederationState, Hyperparams, RoundRecord, run_round
from .errors import ContractViolationError, DomainError
from .models import Array, ModelSpec, forward


@dataclass(frozen=True)
class AnomalyScore:
    """Reconstruction-error score and the thresholded verdict for one example."""

    example_index: int
    score: float
    label_pred: str

    def __post_init__(self) -> None:
        if self.score < 0:
            raise DomainError("anomaly scores are non-negative")
        if self.label_pred not in ("normal", "anomaly"):
            raise DomainError("label_pred must be 'normal' or 'anomaly'")


@dataclass(frozen=True)
class Standardizer:
    """Per-dimension z-scoring with federation-level statistics."""

    mean: Array
    std: Array

    def transform(self, X: Array) -> Array:
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.std


def fit_standardizer(clients: list[ClientDataset]) -> Standardizer:
    pooled = np.concatenate([c.X for c in clients], axis=0)
    std = pooled.std(axis=0)
    return Standardizer(mean=pooled.mean(axis=0), std=np.where(std < 1e-8, 1.0, std))


def standardize_clients(
    clients: list[ClientDataset], scaler: Standardizer
) -> list[ClientDataset]:
    return [replace(c, X=scaler.transform(c.X)) for c in clients]


def train_one_class_round(
    clients_normal_only: list[ClientDataset],
    spec: ModelSpec,
    state: FederationState,
    hyper: Hyperparams,
    *,
    parallel: bool = False,
) -> tuple[FederationState, RoundRecord]:
    """One federated-averaging round on reconstruction loss.

    Training data must contain no anomaly-flagged rows: clients only ever
    contribute normal behaviour, anomalies exist for evaluation alone.
    """
    if spec.kind != "autoencoder":
        raise DomainError("one-class training requires an autoencoder spec")
    for c in clients_normal_only:
        if c.anomaly_mask is not None and c.anomaly_mask.any():
            raise ContractViolationError(
                f"client {c.client_id} still contains anomaly rows; strip them first"
            )
    return run_round(
        state, FedAvg(), clients_normal_only, hyper.sample_fraction, spec, hyper,
        parallel=parallel,
    )


def reconstruction_scores(spec: ModelSpec, params: Array, X: Array) -> Array:
    """Per-example mean squared reconstruction error."""
    X = np.asarray(X, dtype=np.float64)
    recon = forward(spec, params, X)
    return ((recon - X) ** 2).mean(axis=1)


def score(
    spec: ModelSpec, params: Array, X: Array, threshold: float
) -> list[AnomalyScore]:
    """Score every row and flag those strictly above the threshold."""
    if threshold < 0:
        raise DomainError("threshold must be >= 0")
    errors = reconstruction_scores(spec, params, X)
    return [
        AnomalyScore(
            example_index=i,
            score=float(e),
            label_pred="anomaly" if e > threshold else "normal",
        )
        for i, e in enumerate(errors)
    ]


def calibrate_threshold(scores_on_normal_validation, target_fpr: float) -> float:
    """Empirical (1 - target_fpr) quantile of normal validation scores.

    Uses the lower order statistic so the threshold is an observed score and
    the validation false-positive rate does not exceed the target.
    """
    scores = np.asarray(scores_on_normal_validation, dtype=np.float64)
    if scores.size == 0:
        raise DomainError("calibration needs at least one validation score")
    if not 0 < target_fpr < 1:
        raise DomainError("target_fpr must lie in (0, 1)")
    return float(np.quantile(scores, 1.0 - target_fpr, method="lower"))

"""Federated round orchestration.

A round samples eligible clients, charges one access each, dispatches a
strategy's local update per client (optionally in parallel), folds the
resulting messages deterministically in client-id order, and records the
importance-weighted global loss. Everything is replayable from the root
seed: per-client training seeds depend only on (seed, round, client_id), so
results are independent of execution interleaving.
"""

from __future__ import annotations

import abc
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .datagen import ClientDataset
from .errors import BudgetExhaustedError, DomainError, ShapeError, SimulationHalted
from .metrics import accuracy
from .models import (
    Array,
    ModelSpec,
    evaluate_loss,
    forward,
    init_params,
    sgd_train,
)

# Seed-derivation stream tags; fixed forever for replayability.
_TAG_INIT = 0
_TAG_SAMPLE = 1
_TAG_LOCAL = 2
_TAG_PERSONAL = 3
_TAG_VALSPLIT = 4


def child_seed(root: int, *path: int) -> int:
    """Stable derived seed for an independent stream."""
    ints = [root] + [abs(int(p)) for p in path]
    return int(np.random.SeedSequence(ints).generate_state(1)[0])


def local_train_seed(root: int, round_index: int, client_id: int) -> int:
    """The seed run_round hands to a client's local training in a given round."""
    return child_seed(root, _TAG_LOCAL, round_index, client_id)


def personal_seed(root: int, round_index: int, client_id: int) -> int:
    return child_seed(root, _TAG_PERSONAL, round_index, client_id)


@dataclass(frozen=True)
class Hyperparams:
    """Flat hyperparameter block shared by every strategy."""

    lr: float = 0.1
    local_epochs: int = 1
    batch_size: int = 32
    rounds: int = 30
    sample_fraction: float = 1.0
    num_centers: int = 1
    lam: float = 0.0
    alpha: float = 1.0
    temperature: float = 2.0
    k_select: int = 1
    split_threshold: float = 0.0
    min_cluster_size: int = 1
    target_fpr: float = 0.05
    max_accesses: int | None = None

    def local_steps(self, n_examples: int) -> int:
        return self.local_epochs * math.ceil(n_examples / self.batch_size)


@dataclass(frozen=True)
class AccessBudget:
    """Pay-per-access counter for one client."""

    max_accesses: int
    used: int = 0

    def __post_init__(self) -> None:
        if self.max_accesses < 0 or not 0 <= self.used <= self.max_accesses:
            raise DomainError("access budget requires 0 <= used <= max_accesses")

    @property
    def remaining(self) -> int:
        return self.max_accesses - self.used

    def charge(self) -> "AccessBudget":
        if self.used >= self.max_accesses:
            raise BudgetExhaustedError(
                f"budget exhausted: {self.used}/{self.max_accesses} accesses used"
            )
        return AccessBudget(self.max_accesses, self.used + 1)


@dataclass(frozen=True)
class ClientView:
    """What a strategy is allowed to see of a client: data and weight only."""

    client_id: int
    X: Array
    y: Array
    weight: float

    def __len__(self) -> int:
        return self.X.shape[0]


def as_view(client: ClientDataset) -> ClientView:
    return ClientView(client.client_id, client.X, client.y, client.weight)


@dataclass(frozen=True)
class FederationState:
    """Coordinator-side state: global model(s), assignments, personal models,
    access budgets and the round counter."""

    round: int
    global_params: tuple[Array, ...]
    assignments: dict[int, int]
    personal_params: dict[int, Array]
    budgets: dict[int, AccessBudget]
    rng_seed: int

    def __post_init__(self) -> None:
        if self.round < 0:
            raise DomainError("round must be >= 0")
        for cid, k in self.assignments.items():
            if not 0 <= k < len(self.global_params):
                raise DomainError(f"client {cid} assigned to missing model index {k}")


@dataclass(frozen=True)
class RoundRecord:
    """Per-round metrics; global_loss is the weighted sum of per-client losses."""

    round: int
    global_loss: float
    per_client_loss: dict[int, float]
    per_client_accuracy: dict[int, float | None]
    accesses_charged: int

    def to_json(self) -> str:
        payload = {
            "round": self.round,
            "global_loss": self.global_loss,
            "per_client_loss": {str(k): v for k, v in sorted(self.per_client_loss.items())},
            "per_client_accuracy": {
                str(k): v for k, v in sorted(self.per_client_accuracy.items())
            },
            "accesses_charged": self.accesses_charged,
        }
        return json.dumps(payload, sort_keys=True)


@dataclass
class ClientMessage:
    """What one client sends back after a local update."""

    client_id: int
    weight: float
    params: Array | None = None
    personal: Array | None = None
    predictions: Array | None = None
    val_loss: float | None = None
    cluster: int | None = None
    delta: Array | None = None


def weighted_average(entries: list[tuple[Array, float]]) -> Array:
    """Importance-weighted mean of equal-length vectors.

    Weights are normalized first, so uniformly rescaling them by a power of
    two leaves the result bit-identical.
    """
    if not entries:
        raise DomainError("weighted_average needs at least one entry")
    vecs = [np.asarray(v, dtype=np.float64) for v, _ in entries]
    weights = np.array([w for _, w in entries], dtype=np.float64)
    length = vecs[0].shape
    for v in vecs[1:]:
        if v.shape != length:
            raise ShapeError(f"vector shapes differ: {v.shape} vs {length}")
    if np.any(weights <= 0):
        raise DomainError("weights must be positive")
    normalized = weights / weights.sum()
    out = np.zeros(length, dtype=np.float64)
    for v, w in zip(vecs, normalized):
        out += w * v
    return out


def global_loss(
    clients: list[ClientDataset] | list[ClientView],
    spec: ModelSpec,
    params: Array,
    loss_kind: str | None = None,
) -> float:
    """Importance-weighted total loss over the federation."""
    total_weight = sum(c.weight for c in clients)
    if abs(total_weight - 1.0) > 1e-9:
        raise DomainError(f"client weights must sum to 1, got {total_weight!r}")
    return float(
        sum(c.weight * evaluate_loss(spec, params, c.X, c.y, loss_kind=loss_kind) for c in clients)
    )


def charge_access(state: FederationState, client_id: int) -> FederationState:
    """Charge one access to a client, returning the updated state."""
    if client_id not in state.budgets:
        raise DomainError(f"no budget registered for client {client_id}")
    budgets = dict(state.budgets)
    budgets[client_id] = budgets[client_id].charge()
    return replace(state, budgets=budgets)


class Strategy(abc.ABC):
    """Uniform local-update/aggregate interface every federation scheme implements."""

    name = "strategy"

    def build_state(
        self,
        spec: ModelSpec,
        clients: list[ClientDataset],
        hyper: Hyperparams,
        seed: int,
    ) -> FederationState:
        max_acc = hyper.max_accesses if hyper.max_accesses is not None else hyper.rounds
        budgets = {c.client_id: AccessBudget(max_acc) for c in clients}
        return FederationState(
            round=0,
            global_params=(init_params(spec, child_seed(seed, _TAG_INIT)),),
            assignments={},
            personal_params={},
            budgets=budgets,
            rng_seed=seed,
        )

    @abc.abstractmethod
    def local_update(
        self,
        client: ClientView,
        state: FederationState,
        spec: ModelSpec,
        hyper: Hyperparams,
        seed: int,
    ) -> ClientMessage:
        """Pure per-client computation; safe to run in parallel."""

    @abc.abstractmethod
    def aggregate(
        self,
        state: FederationState,
        messages: list[ClientMessage],
        spec: ModelSpec,
        hyper: Hyperparams,
    ) -> FederationState:
        """Deterministic fold over messages sorted by client id."""

    def loss_kind(self, spec: ModelSpec) -> str:
        return "cross-entropy" if spec.output == "softmax-classifier" else "squared-error"

    def client_eval(
        self,
        state: FederationState,
        client: ClientView,
        spec: ModelSpec,
        hyper: Hyperparams,
    ) -> tuple[float, float | None]:
        """Loss and accuracy of the model currently serving this client."""
        params = state.global_params[state.assignments.get(client.client_id, 0)]
        loss = evaluate_loss(spec, params, client.X, client.y, loss_kind=self.loss_kind(spec))
        if spec.output == "softmax-classifier":
            return loss, accuracy(forward(spec, params, client.X), client.y)
        return loss, None


class FedAvg(Strategy):
    """Vanilla federated averaging: local SGD then dataset-size-weighted mean."""

    name = "fedavg"

    def local_update(self, client, state, spec, hyper, seed):
        params = sgd_train(
            spec,
            state.global_params[0],
            client,
            steps=hyper.local_steps(len(client)),
            lr=hyper.lr,
            batch_size=hyper.batch_size,
            seed=seed,
            loss_kind=self.loss_kind(spec),
        )
        return ClientMessage(client_id=client.client_id, weight=client.weight, params=params)

    def aggregate(self, state, messages, spec, hyper):
        merged = weighted_average([(m.params, m.weight) for m in messages])
        return replace(state, global_params=(merged,))


def _check_budget_invariant(state: FederationState) -> None:
    for cid, budget in state.budgets.items():
        if not 0 <= budget.used <= budget.max_accesses:
            raise BudgetExhaustedError(
                f"budget invariant violated for client {cid}: "
                f"{budget.used}/{budget.max_accesses}"
            )


def run_round(
    state: FederationState,
    strategy: Strategy,
    clients: list[ClientDataset],
    sample_fraction: float,
    spec: ModelSpec,
    hyper: Hyperparams,
    *,
    parallel: bool = False,
) -> tuple[FederationState, RoundRecord]:
    """Run one federated round and return the new state plus its record.

    Raises SimulationHalted when no client has budget left; the caller is
    expected to stop the simulation gracefully.
    """
    if not 0 < sample_fraction <= 1:
        raise DomainError("sample_fraction must lie in (0, 1]")
    ordered = sorted(clients, key=lambda c: c.client_id)
    views = {c.client_id: as_view(c) for c in ordered}
    for c in ordered:
        if c.client_id not in state.budgets:
            raise DomainError(f"no budget registered for client {c.client_id}")
    eligible = [c.client_id for c in ordered if state.budgets[c.client_id].remaining > 0]
    if not eligible:
        raise SimulationHalted(f"round {state.round}: every client budget is exhausted")
    n_pick = math.ceil(sample_fraction * len(eligible))
    rng = np.random.default_rng(
        np.random.SeedSequence([state.rng_seed, _TAG_SAMPLE, state.round])
    )
    picked = rng.choice(len(eligible), size=n_pick, replace=False)
    participants = sorted(eligible[i] for i in picked)

    for cid in participants:
        state = charge_access(state, cid)

    def update(cid: int) -> ClientMessage:
        seed = local_train_seed(state.rng_seed, state.round, cid)
        return strategy.local_update(views[cid], state, spec, hyper, seed)

    if parallel and len(participants) > 1:
        with ThreadPoolExecutor(max_workers=min(8, len(participants))) as pool:
            messages = list(pool.map(update, participants))
    else:
        messages = [update(cid) for cid in participants]
    messages.sort(key=lambda m: m.client_id)

    new_state = strategy.aggregate(state, messages, spec, hyper)
    new_state = replace(new_state, round=state.round + 1)
    _check_budget_invariant(new_state)

    losses: dict[int, float] = {}
    accs: dict[int, float | None] = {}
    for cid, view in views.items():
        loss, acc = strategy.client_eval(new_state, view, spec, hyper)
        losses[cid] = float(loss)
        accs[cid] = None if acc is None else float(acc)
    total = sum(views[cid].weight * losses[cid] for cid in views)
    record = RoundRecord(
        round=state.round,
        global_loss=float(total),
        per_client_loss=losses,
        per_client_accuracy=accs,
        accesses_charged=len(participants),
    )
    return new_state, record

"""Model-heterogeneous federation through prediction exchange.

Clients with different architectures never average parameters; instead each
one publishes its class probabilities on a shared public dataset. The
coordinator averages those predictions into a consensus that every client
then distills from, optionally mixed with its own private labels. A one-shot
variant trains locally once, picks the best few models by local validation
loss and serves their uniform probability ensemble.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .engine import (
    ClientMessage,
    FederationState,
    Strategy,
    child_seed,
    _TAG_INIT,
    _TAG_VALSPLIT,
)
from .errors import DomainError, ParseError, ShapeError
from .metrics import accuracy
from .models import (
    Array,
    Batch,
    ModelSpec,
    _loss_grad_arrays,
    _check_params,
    evaluate_loss,
    forward,
    init_params,
    minibatch_indices,
    sgd_train,
)


@dataclass(frozen=True)
class PredictionMatrix:
    """Per-example class probabilities of one model on the public dataset."""

    rows: Array
    model_id: int = -1
    round: int = -1

    def __post_init__(self) -> None:
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.ndim != 2:
            raise ShapeError(f"prediction rows must be 2-D, got {rows.shape}")
        sums = rows.sum(axis=1)
        if np.abs(sums - 1.0).max(initial=0.0) > 1e-9 or rows.min(initial=0.0) < -1e-12:
            raise DomainError("prediction rows must be probability vectors")
        object.__setattr__(self, "rows", rows)

    def __len__(self) -> int:
        return self.rows.shape[0]


@dataclass(frozen=True)
class HeteroModelRegistry:
    """Per-client architectures; all must agree on input dim and class count."""

    specs: dict[int, ModelSpec]

    def __post_init__(self) -> None:
        if not self.specs:
            raise DomainError("registry must contain at least one model spec")
        dims = {s.input_dim for s in self.specs.values()}
        classes = {s.num_classes for s in self.specs.values()}
        if len(dims) != 1 or len(classes) != 1:
            raise DomainError("all registry models must share input_dim and num_classes")

    def __getitem__(self, client_id: int) -> ModelSpec:
        return self.specs[client_id]

    @property
    def num_classes(self) -> int:
        return next(iter(self.specs.values())).num_classes


def public_predictions(
    spec: ModelSpec, params: Array, public_X: Array, *, model_id: int = -1, round_index: int = -1
) -> PredictionMatrix:
    """Class probabilities of one model on every public example."""
    return PredictionMatrix(
        rows=forward(spec, params, public_X), model_id=model_id, round=round_index
    )


def average_predictions(
    mats: list[PredictionMatrix], weights: list[float] | None = None
) -> PredictionMatrix:
    """Row-wise weighted mean of prediction matrices, kept row-stochastic."""
    if not mats:
        raise DomainError("average_predictions needs at least one matrix")
    shape = mats[0].rows.shape
    for m in mats[1:]:
        if m.rows.shape != shape:
            raise ShapeError(f"prediction shapes differ: {m.rows.shape} vs {shape}")
    if weights is None:
        weights = [1.0] * len(mats)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(mats),) or np.any(w <= 0):
        raise DomainError("weights must be positive, one per matrix")
    w = w / w.sum()
    rows = np.zeros(shape)
    for m, wi in zip(mats, w):
        rows += wi * m.rows
    sums = rows.sum(axis=1, keepdims=True)
    if np.abs(sums - 1.0).max() > 1e-12:
        rows = rows / sums
    return PredictionMatrix(rows=rows, model_id=-1, round=mats[0].round)


def distill_update(
    spec: ModelSpec,
    params: Array,
    public_X: Array,
    consensus: PredictionMatrix,
    private,
    lam: float,
    temperature: float,
    steps: int,
    lr: float,
    seed: int,
    batch_size: int = 32,
) -> Array:
    """SGD on the tempered soft loss against the consensus plus lam times the
    hard loss on the client's own labels.

    lam = 0 is pure distillation; when the consensus equals the student's own
    predictions the soft gradient vanishes and the parameters do not move.
    """
    if lam < 0:
        raise DomainError("hard-loss weight must be >= 0")
    if temperature <= 0:
        raise DomainError("temperature must be positive")
    public_X = np.asarray(public_X, dtype=np.float64)
    if consensus.rows.shape[0] != public_X.shape[0]:
        raise ShapeError("consensus must have one row per public example")
    w = np.array(_check_params(spec, params), copy=True)
    if steps == 0:
        return w
    soft_batches = minibatch_indices(public_X.shape[0], batch_size, steps, child_seed(seed, 0))
    hard_batches = None
    if lam > 0:
        hard_batches = minibatch_indices(len(private.X), batch_size, steps, child_seed(seed, 1))
    for idx in soft_batches:
        _, g = _loss_grad_arrays(
            spec, w, public_X[idx], None, consensus.rows[idx], "soft-kl", temperature
        )
        if hard_batches is not None:
            jdx = next(hard_batches)
            _, gh = _loss_grad_arrays(
                spec, w, private.X[jdx], np.asarray(private.y)[jdx], None, "cross-entropy", 1.0
            )
            g = g + lam * gh
        w -= lr * g
    return w


@dataclass(frozen=True)
class EnsembleModel:
    """Uniform probability-averaging ensemble over selected client models."""

    member_ids: tuple[int, ...]
    specs: tuple[ModelSpec, ...]
    params: tuple[Array, ...]

    def predict_proba(self, X: Array) -> Array:
        rows = np.zeros((np.asarray(X).shape[0], self.specs[0].num_classes))
        for spec, p in zip(self.specs, self.params):
            rows += forward(spec, p, X)
        return rows / len(self.specs)

    def predict(self, X: Array) -> Array:
        return self.predict_proba(X).argmax(axis=1)


def one_shot_ensemble(
    registry: HeteroModelRegistry,
    client_params: dict[int, Array],
    val_losses: dict[int, float],
    public_X: Array,
    k_select: int,
) -> EnsembleModel:
    """Pick the k models with the lowest reported validation loss and ensemble
    them by uniform prediction averaging. Ties break toward lower client id."""
    if not 1 <= k_select <= len(client_params):
        raise DomainError(
            f"k_select must lie in [1, {len(client_params)}], got {k_select}"
        )
    missing = set(client_params) - set(val_losses)
    if missing:
        raise DomainError(f"missing validation losses for clients {sorted(missing)}")
    ranked = sorted(client_params, key=lambda cid: (val_losses[cid], cid))
    chosen = ranked[:k_select]
    ensemble = EnsembleModel(
        member_ids=tuple(chosen),
        specs=tuple(registry[cid] for cid in chosen),
        params=tuple(np.asarray(client_params[cid], dtype=np.float64) for cid in chosen),
    )
    # Fail fast if the public set does not match the member architectures.
    ensemble.predict_proba(np.asarray(public_X, dtype=np.float64)[:1])
    return ensemble


def save_predictions_csv(path: str | Path, mats: list[PredictionMatrix]) -> None:
    """Persist prediction matrices as CSV rows (round, model_id, example_index, p0..)."""
    if not mats:
        raise DomainError("nothing to save")
    n_classes = mats[0].rows.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round", "model_id", "example_index"] + [f"p{c}" for c in range(n_classes)])
        for m in mats:
            for i, row in enumerate(m.rows):
                writer.writerow([m.round, m.model_id, i] + [repr(float(v)) for v in row])


def load_predictions_csv(path: str | Path) -> list[PredictionMatrix]:
    """Read matrices written by :func:`save_predictions_csv`."""
    groups: dict[tuple[int, int], list[tuple[int, list[float]]]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        if header[:3] != ["round", "model_id", "example_index"]:
            raise ParseError(f"{path}: unexpected header")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rnd, mid, idx = int(row[0]), int(row[1]), int(row[2])
                probs = [float(v) for v in row[3:]]
            except ValueError as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from None
            groups.setdefault((rnd, mid), []).append((idx, probs))
    out = []
    for (rnd, mid), rows in sorted(groups.items()):
        rows.sort()
        out.append(PredictionMatrix(rows=np.array([r for _, r in rows]), model_id=mid, round=rnd))
    return out


class Distill(Strategy):
    """Federation by consensus distillation over a shared public dataset.

    The first round trains every participant locally on its private data;
    afterwards each participant distills from the (leave-one-out by default)
    average of the other participants' public predictions, mixed with its own
    labels at weight lam.
    """

    name = "distill"

    # First-round local pretraining runs this many times the per-round step
    # budget, so the first consensus comes from converged teachers.
    PRETRAIN_FACTOR = 10

    def __init__(
        self,
        registry: HeteroModelRegistry,
        public_X: Array,
        include_self: bool = False,
    ) -> None:
        self.registry = registry
        self.public_X = np.asarray(public_X, dtype=np.float64)
        self.include_self = include_self
        self._consensus: dict[int, PredictionMatrix] = {}

    def build_state(self, spec, clients, hyper, seed):
        state = super().build_state(spec, clients, hyper, seed)
        personal = {
            c.client_id: init_params(
                self.registry[c.client_id], child_seed(seed, _TAG_INIT, c.client_id)
            )
            for c in clients
        }
        return replace(state, global_params=(), personal_params=personal)

    def local_update(self, client, state, spec, hyper, seed):
        cid = client.client_id
        own_spec = self.registry[cid]
        params = state.personal_params[cid]
        consensus = self._consensus.get(cid)
        if consensus is None:
            params = sgd_train(
                own_spec, params, client,
                steps=self.PRETRAIN_FACTOR * hyper.local_steps(len(client)), lr=hyper.lr,
                batch_size=hyper.batch_size, seed=seed, loss_kind="cross-entropy",
            )
        else:
            # Distillation walks the public set, so budget steps by its size.
            params = distill_update(
                own_spec, params, self.public_X, consensus, client,
                lam=hyper.lam, temperature=hyper.temperature,
                steps=hyper.local_steps(len(self.public_X)), lr=hyper.lr,
                seed=seed, batch_size=hyper.batch_size,
            )
        preds = public_predictions(
            own_spec, params, self.public_X, model_id=cid, round_index=state.round
        )
        return ClientMessage(
            client_id=cid, weight=client.weight, personal=params, predictions=preds.rows
        )

    def aggregate(self, state, messages, spec, hyper):
        personal = dict(state.personal_params)
        personal.update({m.client_id: m.personal for m in messages})
        mats = {
            m.client_id: PredictionMatrix(
                rows=m.predictions, model_id=m.client_id, round=state.round
            )
            for m in messages
        }
        self._consensus = {}
        for cid in mats:
            teachers = [
                mats[other]
                for other in sorted(mats)
                if self.include_self or other != cid
            ]
            if teachers:
                self._consensus[cid] = average_predictions(teachers)
        return replace(state, personal_params=personal)

    def client_eval(self, state, client, spec, hyper):
        own_spec = self.registry[client.client_id]
        params = state.personal_params[client.client_id]
        loss = evaluate_loss(own_spec, params, client.X, client.y, loss_kind="cross-entropy")
        return loss, accuracy(forward(own_spec, params, client.X), client.y)

    def last_round_predictions(self, state: FederationState) -> list[PredictionMatrix]:
        return [
            public_predictions(
                self.registry[cid], state.personal_params[cid], self.public_X,
                model_id=cid, round_index=state.round,
            )
            for cid in sorted(state.personal_params)
        ]


class OneShot(Strategy):
    """Single-communication-round federation: every client trains locally
    once, reports a validation loss, and the coordinator serves the
    probability ensemble of the best k models."""

    name = "oneshot"

    def __init__(
        self, registry: HeteroModelRegistry, public_X: Array, val_fraction: float = 0.2
    ) -> None:
        if not 0 < val_fraction < 1:
            raise DomainError("val_fraction must lie in (0, 1)")
        self.registry = registry
        self.public_X = np.asarray(public_X, dtype=np.float64)
        self.val_fraction = val_fraction
        self.ensemble: EnsembleModel | None = None

    def build_state(self, spec, clients, hyper, seed):
        state = super().build_state(spec, clients, hyper, seed)
        return replace(state, global_params=())

    def local_update(self, client, state, spec, hyper, seed):
        cid = client.client_id
        own_spec = self.registry[cid]
        n = len(client)
        n_val = max(1, int(round(self.val_fraction * n)))
        rng = np.random.default_rng(
            np.random.SeedSequence([state.rng_seed, _TAG_VALSPLIT, cid])
        )
        order = rng.permutation(n)
        val_idx, train_idx = order[:n_val], order[n_val:]
        train = Batch(X=client.X[train_idx], y=client.y[train_idx])
        params = sgd_train(
            own_spec,
            init_params(own_spec, child_seed(state.rng_seed, _TAG_INIT, cid)),
            train,
            steps=hyper.local_steps(len(train)),
            lr=hyper.lr, batch_size=hyper.batch_size, seed=seed,
            loss_kind="cross-entropy",
        )
        val_loss = evaluate_loss(
            own_spec, params, client.X[val_idx], client.y[val_idx], loss_kind="cross-entropy"
        )
        return ClientMessage(
            client_id=cid, weight=client.weight, personal=params, val_loss=float(val_loss)
        )

    def aggregate(self, state, messages, spec, hyper):
        params = {m.client_id: m.personal for m in messages}
        val_losses = {m.client_id: m.val_loss for m in messages}
        k = min(hyper.k_select, len(params))
        self.ensemble = one_shot_ensemble(self.registry, params, val_losses, self.public_X, k)
        personal = dict(state.personal_params)
        personal.update(params)
        return replace(state, personal_params=personal)

    def client_eval(self, state, client, spec, hyper):
        if self.ensemble is None:
            return float("nan"), None
        probs = self.ensemble.predict_proba(client.X)
        picked = np.clip(probs[np.arange(len(client)), client.y], 1e-12, None)
        return float(-np.log(picked).mean()), accuracy(probs, client.y)

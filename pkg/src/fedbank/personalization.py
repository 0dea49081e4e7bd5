"""Per-client personalization on top of a shared global model.

Four flavours: a mixture objective that trains a private model alongside the
shared one, proximal fine-tuning that penalizes drifting from the shared
model, a meta objective evaluated after one local gradient step, and plain
fine-tuning as the baseline. Personal models can be persisted as flat-vector
binary files with a small architecture-fingerprint header.
"""

from __future__ import annotations

import struct
from dataclasses import replace
from pathlib import Path

import numpy as np

from .engine import (
    ClientMessage,
    Strategy,
    personal_seed,
    weighted_average,
)
from .errors import DomainError, ParseError, ShapeError
from .metrics import accuracy
from .models import (
    Array,
    Batch,
    ModelSpec,
    _loss_grad_arrays,
    _run_sgd,
    _check_params,
    default_loss,
    forward,
    minibatch_indices,
    spec_fingerprint,
)

_MAGIC = b"FBPM"
_HEADER = struct.Struct("<4sH16sqqq")


def _labels_of(client) -> tuple[Array | None, Array | None]:
    y = getattr(client, "y", None)
    targets = getattr(client, "targets", None)
    return (
        None if y is None else np.asarray(y),
        None if targets is None else np.asarray(targets, dtype=np.float64),
    )


def mixture_objective_grad(
    client, spec: ModelSpec, global_params: Array, personal_params: Array, lam: float
) -> tuple[float, Array, Array]:
    """Full-batch value and partial gradients of loss(W) + lam * loss(W_i)."""
    if lam < 0:
        raise DomainError("mixing weight must be >= 0")
    kind = default_loss(spec)
    X = np.asarray(client.X, dtype=np.float64)
    y, targets = _labels_of(client)
    loss_g, grad_g = _loss_grad_arrays(
        spec, _check_params(spec, global_params), X, y, targets, kind
    )
    if lam == 0:
        return loss_g, grad_g, np.zeros_like(grad_g)
    loss_p, grad_p = _loss_grad_arrays(
        spec, _check_params(spec, personal_params), X, y, targets, kind
    )
    return loss_g + lam * loss_p, grad_g, lam * grad_p


def proximal_personalize(
    client,
    spec: ModelSpec,
    global_params: Array,
    lam: float,
    lr: float,
    steps: int,
    seed: int,
) -> Array:
    """SGD on the local loss plus (lam/2) * ||W_i - W||^2, started at W.

    lam = 0 reduces bit-exactly to plain fine-tuning from the global model.
    """
    if lam < 0:
        raise DomainError("proximal weight must be >= 0")
    anchor = _check_params(spec, np.asarray(global_params, dtype=np.float64))
    return _proximal_sgd(client, spec, anchor, lam, lr, steps, seed)


def _proximal_sgd(client, spec, anchor, lam, lr, steps, seed, batch_size=None):
    y, targets = _labels_of(client)
    extra = None
    if lam > 0:
        extra = lambda w: lam * (w - anchor)  # noqa: E731
    return _run_sgd(
        spec,
        anchor,
        np.asarray(client.X, dtype=np.float64),
        y,
        targets,
        steps=steps,
        lr=lr,
        batch_size=batch_size if batch_size is not None else max(1, len(client.X)),
        seed=seed,
        loss_kind=default_loss(spec),
        extra_grad=extra,
    )


def finetune_baseline(
    client, spec: ModelSpec, global_params: Array, lr: float, steps: int, seed: int
) -> Array:
    """Plain local SGD from the global model; the personalization baseline."""
    return _proximal_sgd(client, spec, _check_params(spec, global_params), 0.0, lr, steps, seed)


def interpolate_with_public(client, public, ratio: float, seed: int):
    """Data-level personalization: pool the client's examples with a seeded
    draw from the shared public set, sized at ``ratio`` times the client's
    own sample count. ``ratio`` = 0 returns the client's data untouched."""
    if ratio < 0:
        raise DomainError("public mixing ratio must be >= 0")
    X = np.asarray(client.X, dtype=np.float64)
    y = np.asarray(client.y)
    n_draw = int(round(ratio * X.shape[0]))
    if n_draw == 0:
        return Batch(X=X, y=y)
    rng = np.random.default_rng(seed)
    idx = rng.choice(public.X.shape[0], size=min(n_draw, public.X.shape[0]), replace=False)
    return Batch(
        X=np.concatenate([X, np.asarray(public.X)[idx]]),
        y=np.concatenate([y, np.asarray(public.y)[idx]]),
    )


def _meta_loss_grad_arrays(
    spec: ModelSpec,
    params: Array,
    X: Array,
    y: Array | None,
    targets: Array | None,
    loss_kind: str,
    alpha: float,
) -> tuple[float, Array]:
    """Loss after one inner gradient step, and its gradient through the step.

    The curvature term is estimated with a central-difference Hessian-vector
    product along the post-step gradient.
    """
    _, g0 = _loss_grad_arrays(spec, params, X, y, targets, loss_kind)
    inner = params - alpha * g0
    loss_after, g_after = _loss_grad_arrays(spec, inner, X, y, targets, loss_kind)
    norm = float(np.linalg.norm(g_after))
    if norm == 0.0:
        return loss_after, g_after
    eps = 1e-4 / norm
    _, g_plus = _loss_grad_arrays(spec, params + eps * g_after, X, y, targets, loss_kind)
    _, g_minus = _loss_grad_arrays(spec, params - eps * g_after, X, y, targets, loss_kind)
    hvp = (g_plus - g_minus) / (2.0 * eps)
    return loss_after, g_after - alpha * hvp


def one_step_meta_loss_grad(
    client, spec: ModelSpec, global_params: Array, alpha: float
) -> tuple[float, Array]:
    """Full-batch meta objective: local loss evaluated one gradient step ahead."""
    if alpha <= 0:
        raise DomainError("inner step size alpha must be positive")
    params = _check_params(spec, np.asarray(global_params, dtype=np.float64))
    y, targets = _labels_of(client)
    return _meta_loss_grad_arrays(
        spec,
        params,
        np.asarray(client.X, dtype=np.float64),
        y,
        targets,
        default_loss(spec),
        alpha,
    )


def save_personal_params(
    path: str | Path, spec: ModelSpec, client_id: int, round_index: int, params: Array
) -> None:
    """Persist one personal model as a fingerprinted flat float64 vector."""
    params = _check_params(spec, params)
    header = _HEADER.pack(
        _MAGIC, 1, spec_fingerprint(spec), client_id, round_index, params.size
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(params.astype("<f8").tobytes())


def load_personal_params(
    path: str | Path, spec: ModelSpec | None = None
) -> tuple[int, int, Array]:
    """Read (client_id, round, params); verifies the architecture fingerprint
    when a spec is supplied."""
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
        if len(raw) < _HEADER.size:
            raise ParseError(f"{path}: truncated header")
        magic, version, digest, client_id, round_index, length = _HEADER.unpack(raw)
        if magic != _MAGIC or version != 1:
            raise ParseError(f"{path}: not a personal-model file")
        if spec is not None and digest != spec_fingerprint(spec):
            raise ShapeError(f"{path}: stored model does not match the given spec")
        body = fh.read(length * 8)
    params = np.frombuffer(body, dtype="<f8")
    if params.size != length:
        raise ParseError(f"{path}: truncated parameter vector")
    return int(client_id), int(round_index), params.astype(np.float64)


class Mixture(Strategy):
    """Shared model trained as usual; a private model trained alongside it.

    Each minibatch drives one step on the shared-model copy and, weighted by
    lam, one step on the client's private model. With lam = 0 the private
    model is untouched and the shared path is identical to plain averaging.
    """

    name = "mixture"

    def local_update(self, client, state, spec, hyper, seed):
        kind = self.loss_kind(spec)
        w = np.array(state.global_params[0], copy=True)
        wi = np.array(state.personal_params.get(client.client_id, w), copy=True)
        steps = hyper.local_steps(len(client))
        for idx in minibatch_indices(len(client), hyper.batch_size, steps, seed):
            _, g = _loss_grad_arrays(spec, w, client.X[idx], client.y[idx], None, kind)
            w -= hyper.lr * g
            if hyper.lam > 0:
                _, gp = _loss_grad_arrays(spec, wi, client.X[idx], client.y[idx], None, kind)
                wi -= hyper.lr * hyper.lam * gp
        return ClientMessage(
            client_id=client.client_id, weight=client.weight, params=w, personal=wi
        )

    def aggregate(self, state, messages, spec, hyper):
        merged = weighted_average([(m.params, m.weight) for m in messages])
        personal = dict(state.personal_params)
        personal.update({m.client_id: m.personal for m in messages})
        return replace(state, global_params=(merged,), personal_params=personal)


class Proximal(Strategy):
    """Plain averaging for the shared model plus proximally fine-tuned
    personal models anchored at it."""

    name = "proximal"

    def local_update(self, client, state, spec, hyper, seed):
        base = state.global_params[0]
        params = _run_sgd(
            spec, base, client.X, client.y, None,
            steps=hyper.local_steps(len(client)),
            lr=hyper.lr, batch_size=hyper.batch_size, seed=seed,
            loss_kind=self.loss_kind(spec),
        )
        wi = _proximal_sgd(
            client, spec, np.asarray(base, dtype=np.float64), hyper.lam, hyper.lr,
            hyper.local_steps(len(client)),
            personal_seed(state.rng_seed, state.round, client.client_id),
            batch_size=hyper.batch_size,
        )
        return ClientMessage(
            client_id=client.client_id, weight=client.weight, params=params, personal=wi
        )

    def aggregate(self, state, messages, spec, hyper):
        merged = weighted_average([(m.params, m.weight) for m in messages])
        personal = dict(state.personal_params)
        personal.update({m.client_id: m.personal for m in messages})
        return replace(state, global_params=(merged,), personal_params=personal)


class OneStepMeta(Strategy):
    """Trains the shared model so that one local gradient step suits each
    client; deployment takes that same inner step."""

    name = "onestep"

    def local_update(self, client, state, spec, hyper, seed):
        kind = self.loss_kind(spec)
        w = np.array(state.global_params[0], copy=True)
        steps = hyper.local_steps(len(client))
        for idx in minibatch_indices(len(client), hyper.batch_size, steps, seed):
            _, g = _meta_loss_grad_arrays(
                spec, w, client.X[idx], client.y[idx], None, kind, hyper.alpha
            )
            w -= hyper.lr * g
        return ClientMessage(client_id=client.client_id, weight=client.weight, params=w)

    def aggregate(self, state, messages, spec, hyper):
        merged = weighted_average([(m.params, m.weight) for m in messages])
        return replace(state, global_params=(merged,))

    def personalize(self, client, state, spec, hyper) -> Array:
        """Deploy-time adaptation: one full-batch gradient step from the
        shared model."""
        kind = self.loss_kind(spec)
        w = state.global_params[0]
        _, g = _loss_grad_arrays(spec, w, client.X, client.y, None, kind)
        return w - hyper.alpha * g

    def client_eval(self, state, client, spec, hyper):
        wi = self.personalize(client, state, spec, hyper)
        loss = float(
            _loss_grad_arrays(spec, wi, client.X, client.y, None, self.loss_kind(spec))[0]
        )
        if spec.output == "softmax-classifier":
            return loss, accuracy(forward(spec, wi, client.X), client.y)
        return loss, None

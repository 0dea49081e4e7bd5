"""Flat-parameter neural models trained with seeded minibatch SGD.

Logistic regression, small MLPs and symmetric autoencoders are implemented
directly on numpy arrays. All parameters of a model live in one flat float64
vector so that averaging, distances and persistence work uniformly across
model kinds. Gradients are hand-rolled backprop, checked against central
finite differences in the test suite.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import DomainError, ShapeError

Array = np.ndarray

MODEL_KINDS = ("logistic", "mlp", "autoencoder")
ACTIVATIONS = ("relu", "tanh")
OUTPUT_HEADS = ("softmax-classifier", "linear-reconstruction")
LOSS_KINDS = ("cross-entropy", "squared-error", "soft-kl")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture descriptor: layer widths, activation and output head.

    ``layer_dims`` lists every layer width from input to output, so the
    parameter count is a pure function of the spec. Autoencoders must be
    dimension-symmetric with a bottleneck strictly narrower than the input.
    """

    kind: str
    layer_dims: tuple[int, ...]
    activation: str = "tanh"
    output: str = "softmax-classifier"

    def __post_init__(self) -> None:
        object.__setattr__(self, "layer_dims", tuple(int(d) for d in self.layer_dims))
        if self.kind not in MODEL_KINDS:
            raise DomainError(f"unknown model kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise DomainError(f"unknown activation {self.activation!r}")
        if self.output not in OUTPUT_HEADS:
            raise DomainError(f"unknown output head {self.output!r}")
        dims = self.layer_dims
        if len(dims) < 2:
            raise DomainError("layer_dims needs at least input and output widths")
        if any(d < 1 for d in dims):
            raise DomainError("layer_dims must be positive integers")
        if self.kind == "logistic":
            if len(dims) != 2:
                raise DomainError("logistic model takes exactly [input_dim, num_classes]")
            if self.output != "softmax-classifier":
                raise DomainError("logistic model requires a softmax-classifier head")
        if self.kind == "autoencoder":
            if self.output != "linear-reconstruction":
                raise DomainError("autoencoder requires a linear-reconstruction head")
            if dims != dims[::-1]:
                raise DomainError("autoencoder layer_dims must be symmetric")
            if min(dims) >= dims[0]:
                raise DomainError("autoencoder bottleneck must be narrower than the input")

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def num_classes(self) -> int:
        if self.output != "softmax-classifier":
            raise DomainError("num_classes is only defined for classifier heads")
        return self.layer_dims[-1]

    @property
    def layer_shapes(self) -> tuple[tuple[int, int], ...]:
        d = self.layer_dims
        return tuple((d[i], d[i + 1]) for i in range(len(d) - 1))

    @property
    def param_count(self) -> int:
        return sum(din * dout + dout for din, dout in self.layer_shapes)

    def canonical(self) -> str:
        """Stable string form, used for fingerprinting persisted parameters."""
        return json.dumps(
            {
                "kind": self.kind,
                "layer_dims": list(self.layer_dims),
                "activation": self.activation,
                "output": self.output,
            },
            sort_keys=True,
        )


def spec_fingerprint(spec: ModelSpec) -> bytes:
    """16-byte digest identifying an architecture."""
    return hashlib.sha256(spec.canonical().encode()).digest()[:16]


@dataclass(frozen=True)
class Batch:
    """A block of examples: features plus optional labels or dense targets.

    ``y`` holds integer class labels; ``targets`` holds per-example rows used
    as soft-label distributions (soft-kl) or regression targets
    (squared-error). Reconstruction losses fall back to ``X`` itself when no
    targets are given.
    """

    X: Array
    y: Array | None = None
    targets: Array | None = None

    def __post_init__(self) -> None:
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim != 2:
            raise ShapeError(f"X must be 2-D, got shape {X.shape}")
        if X.shape[0] < 1:
            raise DomainError("batch must contain at least one example")
        if not np.isfinite(X).all():
            raise DomainError("batch features must be finite")
        object.__setattr__(self, "X", X)
        if self.y is not None:
            y = np.asarray(self.y)
            if not np.issubdtype(y.dtype, np.integer):
                y = y.astype(np.int64)
            if y.shape != (X.shape[0],):
                raise ShapeError(f"labels must have shape ({X.shape[0]},), got {y.shape}")
            object.__setattr__(self, "y", y)
        if self.targets is not None:
            t = np.asarray(self.targets, dtype=np.float64)
            if t.ndim != 2 or t.shape[0] != X.shape[0]:
                raise ShapeError(f"targets must have one row per example, got shape {t.shape}")
            object.__setattr__(self, "targets", t)

    def __len__(self) -> int:
        return self.X.shape[0]


def _check_params(spec: ModelSpec, params: Array) -> Array:
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (spec.param_count,):
        raise ShapeError(
            f"parameter vector has length {params.shape}, spec needs ({spec.param_count},)"
        )
    return params


def _check_features(spec: ModelSpec, X: Array) -> Array:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ShapeError(f"feature matrix {X.shape} does not match input dim {spec.input_dim}")
    return X


def unpack_params(spec: ModelSpec, params: Array) -> list[tuple[Array, Array]]:
    """Views of the flat vector as per-layer (weights, bias) pairs."""
    params = _check_params(spec, params)
    layers = []
    offset = 0
    for din, dout in spec.layer_shapes:
        W = params[offset : offset + din * dout].reshape(din, dout)
        offset += din * dout
        b = params[offset : offset + dout]
        offset += dout
        layers.append((W, b))
    return layers


def init_params(spec: ModelSpec, seed: int) -> Array:
    """Seeded initial parameters: weights uniform in +-1/sqrt(fan_in), zero biases."""
    rng = np.random.default_rng(seed)
    chunks = []
    for din, dout in spec.layer_shapes:
        r = 1.0 / math.sqrt(din)
        chunks.append(rng.uniform(-r, r, size=din * dout))
        chunks.append(np.zeros(dout))
    return np.concatenate(chunks)


def _softmax(z: Array) -> Array:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax(z: Array) -> Array:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _activate(z: Array, activation: str) -> Array:
    if activation == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _forward_pass(spec: ModelSpec, params: Array, X: Array) -> tuple[list[Array], list[Array]]:
    """Returns (layer inputs a_0..a_{L-1}, pre-activations z_0..z_{L-1})."""
    layers = unpack_params(spec, params)
    acts = [X]
    zs = []
    a = X
    for i, (W, b) in enumerate(layers):
        z = a @ W + b
        zs.append(z)
        if i < len(layers) - 1:
            a = _activate(z, spec.activation)
            acts.append(a)
    return acts, zs


def forward(spec: ModelSpec, params: Array, X: Array) -> Array:
    """Model outputs: probability rows for classifier heads, reconstructions
    (or raw linear outputs) otherwise."""
    X = _check_features(spec, X)
    _, zs = _forward_pass(spec, params, X)
    out = zs[-1]
    if spec.output == "softmax-classifier":
        return _softmax(out)
    return out


def _soften(targets: Array, temperature: float) -> Array:
    if temperature == 1.0:
        return targets
    powered = np.power(np.clip(targets, 0.0, None), 1.0 / temperature)
    return powered / powered.sum(axis=1, keepdims=True)


def _output_loss_grad(
    spec: ModelSpec,
    out: Array,
    y: Array | None,
    targets: Array | None,
    X: Array,
    loss_kind: str,
    temperature: float,
) -> tuple[float, Array]:
    """Loss and its gradient with respect to the final pre-activation."""
    n = out.shape[0]
    if loss_kind == "cross-entropy":
        if spec.output != "softmax-classifier":
            raise DomainError("cross-entropy needs a softmax-classifier head")
        if y is None:
            raise DomainError("cross-entropy needs integer labels")
        if y.min() < 0 or y.max() >= spec.num_classes:
            raise DomainError(f"labels must lie in [0, {spec.num_classes})")
        log_p = _log_softmax(out)
        loss = -log_p[np.arange(n), y].mean()
        grad = np.exp(log_p)
        grad[np.arange(n), y] -= 1.0
        return float(loss), grad / n
    if loss_kind == "soft-kl":
        if spec.output != "softmax-classifier":
            raise DomainError("soft-kl needs a softmax-classifier head")
        if targets is None:
            raise DomainError("soft-kl needs a target probability row per example")
        if targets.shape != out.shape:
            raise ShapeError(f"soft targets {targets.shape} do not match outputs {out.shape}")
        if temperature <= 0:
            raise DomainError("temperature must be positive")
        t = _soften(targets, temperature)
        s = _softmax(out / temperature)
        # KL(t || s): ratio form keeps the identity case exactly zero.
        ratio = t / np.clip(s, 1e-300, None)
        cell = np.where(t > 0, t * np.log(np.clip(ratio, 1e-300, None)), 0.0)
        loss = max(float(cell.sum() / n), 0.0)
        return loss, (s - t) / (n * temperature)
    if loss_kind == "squared-error":
        if spec.output != "linear-reconstruction":
            raise DomainError("squared-error needs a linear-reconstruction head")
        target = targets if targets is not None else X
        if target.shape != out.shape:
            raise ShapeError(f"targets {target.shape} do not match outputs {out.shape}")
        resid = out - target
        loss = 0.5 * float((resid * resid).sum()) / n
        return loss, resid / n
    raise DomainError(f"unknown loss kind {loss_kind!r}")


def _loss_grad_arrays(
    spec: ModelSpec,
    params: Array,
    X: Array,
    y: Array | None,
    targets: Array | None,
    loss_kind: str,
    temperature: float = 1.0,
) -> tuple[float, Array]:
    acts, zs = _forward_pass(spec, params, X)
    loss, g = _output_loss_grad(spec, zs[-1], y, targets, X, loss_kind, temperature)
    layers = unpack_params(spec, params)
    grads_w: list[Array] = [None] * len(layers)  # type: ignore[list-item]
    grads_b: list[Array] = [None] * len(layers)  # type: ignore[list-item]
    for i in reversed(range(len(layers))):
        W, _ = layers[i]
        grads_w[i] = acts[i].T @ g
        grads_b[i] = g.sum(axis=0)
        if i > 0:
            da = g @ W.T
            if spec.activation == "relu":
                g = da * (zs[i - 1] > 0)
            else:
                g = da * (1.0 - acts[i] * acts[i])
    flat = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in zip(grads_w, grads_b)])
    return loss, flat


def default_loss(spec: ModelSpec) -> str:
    return "cross-entropy" if spec.output == "softmax-classifier" else "squared-error"


def loss_and_grad(
    spec: ModelSpec,
    params: Array,
    batch: Batch,
    loss_kind: str | None = None,
    temperature: float = 1.0,
) -> tuple[float, Array]:
    """Mean loss over the batch and its gradient in the flat parameter vector."""
    params = _check_params(spec, params)
    X = _check_features(spec, batch.X)
    kind = loss_kind or default_loss(spec)
    if kind not in LOSS_KINDS:
        raise DomainError(f"unknown loss kind {kind!r}")
    return _loss_grad_arrays(spec, params, X, batch.y, batch.targets, kind, temperature)


def evaluate_loss(
    spec: ModelSpec,
    params: Array,
    X: Array,
    y: Array | None = None,
    targets: Array | None = None,
    loss_kind: str | None = None,
    temperature: float = 1.0,
) -> float:
    """Mean loss on raw arrays, without building a Batch."""
    params = _check_params(spec, params)
    X = _check_features(spec, X)
    kind = loss_kind or default_loss(spec)
    if y is not None:
        y = np.asarray(y)
    if targets is not None:
        targets = np.asarray(targets, dtype=np.float64)
    loss, _ = _loss_grad_arrays(spec, params, X, y, targets, kind, temperature)
    return loss


def minibatch_indices(n: int, batch_size: int, steps: int, seed: int) -> Iterator[Array]:
    """Seeded minibatch index stream: reshuffle each epoch, walk in chunks.

    The final chunk of an epoch may be short so that every example is seen
    once per epoch. Exactly ``steps`` index arrays are produced.
    """
    rng = np.random.default_rng(seed)
    produced = 0
    while produced < steps:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield order[start : start + batch_size]
            produced += 1
            if produced == steps:
                return


def _run_sgd(
    spec: ModelSpec,
    init: Array,
    X: Array,
    y: Array | None,
    targets: Array | None,
    *,
    steps: int,
    lr: float,
    batch_size: int,
    seed: int,
    loss_kind: str,
    temperature: float = 1.0,
    extra_grad=None,
) -> Array:
    w = np.array(init, dtype=np.float64, copy=True)
    if steps == 0:
        return w
    for idx in minibatch_indices(X.shape[0], batch_size, steps, seed):
        _, g = _loss_grad_arrays(
            spec,
            w,
            X[idx],
            None if y is None else y[idx],
            None if targets is None else targets[idx],
            loss_kind,
            temperature,
        )
        if extra_grad is not None:
            g = g + extra_grad(w)
        w -= lr * g
    return w


def sgd_train(
    spec: ModelSpec,
    init: Array,
    data,
    steps: int,
    lr: float,
    batch_size: int,
    seed: int,
    loss_kind: str | None = None,
    temperature: float = 1.0,
) -> Array:
    """Minibatch SGD from ``init`` for ``steps`` updates; pure in all arguments.

    ``data`` is anything with ``X`` and optional ``y``/``targets`` attributes
    (a Batch, a client dataset, ...). ``steps == 0`` returns a copy of
    ``init`` unchanged.
    """
    init = _check_params(spec, init)
    if steps < 0:
        raise DomainError("steps must be >= 0")
    if lr <= 0:
        raise DomainError("lr must be positive")
    if batch_size < 1:
        raise DomainError("batch_size must be >= 1")
    X = _check_features(spec, data.X)
    if X.shape[0] < 1:
        raise DomainError("training data must be nonempty")
    y = getattr(data, "y", None)
    if y is not None:
        y = np.asarray(y)
    targets = getattr(data, "targets", None)
    if targets is not None:
        targets = np.asarray(targets, dtype=np.float64)
    kind = loss_kind or default_loss(spec)
    return _run_sgd(
        spec,
        init,
        X,
        y,
        targets,
        steps=steps,
        lr=lr,
        batch_size=batch_size,
        seed=seed,
        loss_kind=kind,
        temperature=temperature,
    )

"""Synthetic non-IID federations with planted client clusters.

Clients are assigned round-robin to hidden clusters and draw labeled
Gaussian data whose class-conditional distributions depend on the cluster:
shifted feature means, permuted label semantics, or skewed label priors.
The planted cluster id is carried as hidden metadata that training
strategies never see.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainError, ParseError, SchemaError
from .models import Array, Batch

SKEW_KINDS = ("feature-shift", "label-swap", "label-skew")

# Off-manifold noise for fraud rows, in units of the within-class std (1.0).
ANOMALY_NOISE_SCALE = 5.0
LABEL_SKEW_ALPHA = 0.5


@dataclass(frozen=True)
class FederationConfig:
    """Knobs for one synthetic federation."""

    num_clients: int
    num_clusters: int = 1
    samples_per_client: int | tuple[int, int] = 100
    input_dim: int = 8
    num_classes: int = 2
    skew_kind: str = "feature-shift"
    anomaly_fraction: float = 0.0
    seed: int = 0
    public_samples: int = 200
    cluster_separation: float = 3.0
    class_separation: float = 4.0

    def __post_init__(self) -> None:
        if self.num_clients < 1:
            raise ConfigError("num_clients: must be >= 1")
        if not 1 <= self.num_clusters <= self.num_clients:
            raise ConfigError("num_clusters: must satisfy 1 <= num_clusters <= num_clients")
        spc = self.samples_per_client
        if isinstance(spc, (list, tuple)):
            if len(spc) != 2 or spc[0] > spc[1]:
                raise ConfigError("samples_per_client: range must be (lo, hi) with lo <= hi")
            object.__setattr__(self, "samples_per_client", (int(spc[0]), int(spc[1])))
            lo = spc[0]
        else:
            lo = spc
        if lo < 2:
            raise ConfigError("samples_per_client: must be >= 2")
        if self.input_dim < 1:
            raise ConfigError("input_dim: must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("num_classes: must be >= 2")
        if self.skew_kind not in SKEW_KINDS:
            raise ConfigError(f"skew_kind: must be one of {SKEW_KINDS}")
        if not 0.0 <= self.anomaly_fraction < 1.0:
            raise ConfigError("anomaly_fraction: must lie in [0, 1)")
        if self.seed < 0:
            raise ConfigError("seed: must be non-negative")
        if self.public_samples < 1:
            raise ConfigError("public_samples: must be >= 1")


@dataclass(frozen=True, eq=False)
class ClientDataset:
    """One participant's labeled examples plus hidden generation metadata.

    ``weight`` is the client's share of the global objective, proportional to
    its sample count. ``true_cluster`` and ``anomaly_mask`` exist only for
    evaluation; the federation engine strips them before any strategy code
    runs.
    """

    client_id: int
    X: Array
    y: Array
    weight: float
    true_cluster: int | None = None
    anomaly_mask: Array | None = None

    def __post_init__(self) -> None:
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise ConfigError("client data must be a 2-D X with one label per row")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        if self.weight <= 0:
            raise DomainError("client weight must be positive")
        mask = self.anomaly_mask
        if mask is None:
            mask = np.zeros(X.shape[0], dtype=bool)
        else:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != (X.shape[0],):
                raise ConfigError("anomaly_mask must have one flag per row")
        object.__setattr__(self, "anomaly_mask", mask)

    def __len__(self) -> int:
        return self.X.shape[0]


def _orthogonal(dim: int, rng: np.random.Generator) -> Array:
    q, r = np.linalg.qr(rng.normal(size=(dim, dim)))
    return q * np.sign(np.diag(r))


def _class_means(config: FederationConfig, rot: Array) -> Array:
    """One mean per class, pairwise class_separation apart when dims allow."""
    scale = config.class_separation / np.sqrt(2.0)
    means = np.zeros((config.num_classes, config.input_dim))
    for c in range(config.num_classes):
        means[c, c % config.input_dim] += scale * (1 + c // config.input_dim)
    return means @ rot.T


def _cluster_offsets(config: FederationConfig, rot: Array) -> Array:
    """Per-cluster mean shifts; cluster 0 is unshifted so K=1 stays IID."""
    offsets = np.zeros((config.num_clusters, config.input_dim))
    d = config.input_dim
    for k in range(1, config.num_clusters):
        axis = (d - 1 - ((k - 1) % d)) % d
        offsets[k, axis] = config.cluster_separation * (1 + (k - 1) // d)
    return offsets @ rot.T


def _swap_label(label: int, cluster: int, num_classes: int) -> int:
    return (label + cluster) % num_classes


def generate_federation(config: FederationConfig) -> tuple[list[ClientDataset], Batch]:
    """Build all client datasets plus a public holdout batch.

    Clients are assigned round-robin to planted clusters. Feature-shift
    clusters move every class-conditional mean by a cluster offset;
    label-swap clusters relabel the same mixture by a cyclic permutation;
    label-skew draws each client's label prior from a Dirichlet. The public
    holdout is drawn from the mixture over all clusters; its labels are for
    scoring only.
    """
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0]))
    rot = _orthogonal(config.input_dim, rng)
    class_means = _class_means(config, rot)
    offsets = _cluster_offsets(config, rot)
    use_offsets = config.skew_kind == "feature-shift"

    if isinstance(config.samples_per_client, tuple):
        lo, hi = config.samples_per_client
        counts = rng.integers(lo, hi + 1, size=config.num_clients)
    else:
        counts = np.full(config.num_clients, config.samples_per_client)
    total = float(counts.sum())

    priors = None
    if config.skew_kind == "label-skew":
        priors = rng.dirichlet(
            np.full(config.num_classes, LABEL_SKEW_ALPHA), size=config.num_clients
        )

    clients = []
    for cid in range(config.num_clients):
        n = int(counts[cid])
        cluster = cid % config.num_clusters
        if priors is not None:
            labels = rng.choice(config.num_classes, size=n, p=priors[cid])
        else:
            labels = rng.integers(0, config.num_classes, size=n)
        X = rng.normal(size=(n, config.input_dim)) + class_means[labels]
        if use_offsets:
            X += offsets[cluster]
        if config.skew_kind == "label-swap":
            labels = (labels + cluster) % config.num_classes
        mask = np.zeros(n, dtype=bool)
        n_anom = min(int(round(config.anomaly_fraction * n)), n - 1)
        if n_anom > 0:
            picked = rng.choice(n, size=n_anom, replace=False)
            mask[picked] = True
            X[picked] += rng.uniform(
                -ANOMALY_NOISE_SCALE, ANOMALY_NOISE_SCALE, size=(n_anom, config.input_dim)
            )
        clients.append(
            ClientDataset(
                client_id=cid,
                X=X,
                y=labels,
                weight=n / total,
                true_cluster=cluster,
                anomaly_mask=mask,
            )
        )

    m = config.public_samples
    pub_clusters = rng.integers(0, config.num_clusters, size=m)
    pub_labels = rng.integers(0, config.num_classes, size=m)
    pub_X = rng.normal(size=(m, config.input_dim)) + class_means[pub_labels]
    if use_offsets:
        pub_X += offsets[pub_clusters]
    if config.skew_kind == "label-swap":
        pub_labels = (pub_labels + pub_clusters) % config.num_classes
    return clients, Batch(X=pub_X, y=pub_labels)


def renormalize_weights(clients: list[ClientDataset]) -> list[ClientDataset]:
    """Reset every weight to the client's share of the total sample count."""
    total = float(sum(len(c) for c in clients))
    if total == 0:
        raise DomainError("cannot renormalize an empty federation")
    return [replace(c, weight=len(c) / total) for c in clients]


def normals_only(clients: list[ClientDataset]) -> list[ClientDataset]:
    """Drop anomaly-flagged rows and renormalize weights over what remains."""
    stripped = []
    for c in clients:
        keep = ~c.anomaly_mask
        if not keep.any():
            continue
        stripped.append(
            replace(
                c,
                X=c.X[keep],
                y=c.y[keep],
                anomaly_mask=np.zeros(int(keep.sum()), dtype=bool),
            )
        )
    return renormalize_weights(stripped)


def split_client(
    client: ClientDataset, test_fraction: float, seed: int
) -> tuple[ClientDataset, Batch]:
    """Deterministic per-client holdout split; the train part keeps at least one row."""
    if not 0.0 <= test_fraction < 1.0:
        raise DomainError("test_fraction must lie in [0, 1)")
    n = len(client)
    n_test = min(int(round(test_fraction * n)), n - 1)
    if n_test == 0:
        return client, Batch(X=client.X, y=client.y)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1, client.client_id]))
    order = rng.permutation(n)
    test_idx, train_idx = np.sort(order[:n_test]), np.sort(order[n_test:])
    train = replace(
        client, X=client.X[train_idx], y=client.y[train_idx],
        anomaly_mask=client.anomaly_mask[train_idx],
    )
    return train, Batch(X=client.X[test_idx], y=client.y[test_idx])


def split_federation(
    clients: list[ClientDataset], test_fraction: float, seed: int
) -> tuple[list[ClientDataset], dict[int, Batch]]:
    """Split every client and renormalize train weights across the federation."""
    trains, tests = [], {}
    for c in clients:
        tr, te = split_client(c, test_fraction, seed)
        trains.append(tr)
        tests[c.client_id] = te
    return renormalize_weights(trains), tests


def save_csv(dataset: ClientDataset, path: str | Path) -> None:
    """Write a client dataset as CSV: client_id, label, f0..f{d-1}."""
    d = dataset.X.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["client_id", "label"] + [f"f{j}" for j in range(d)])
        for i in range(len(dataset)):
            writer.writerow(
                [dataset.client_id, int(dataset.y[i])] + [repr(float(v)) for v in dataset.X[i]]
            )


def load_csv(path: str | Path) -> ClientDataset:
    """Read one client dataset written by :func:`save_csv`.

    Raises ParseError for malformed cells (naming the line) and SchemaError
    when a row's feature count contradicts the header.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        if len(header) < 3 or header[:2] != ["client_id", "label"]:
            raise SchemaError(f"{path}: header must be client_id,label,f0,...")
        d = len(header) - 2
        rows_X: list[list[float]] = []
        rows_y: list[int] = []
        client_id = None
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 2:
                raise SchemaError(
                    f"{path}: line {lineno}: expected {d} features, found {len(row) - 2}"
                )
            try:
                cid = int(row[0])
                label = int(row[1])
                feats = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from None
            if client_id is None:
                client_id = cid
            elif cid != client_id:
                raise SchemaError(
                    f"{path}: line {lineno}: mixed client ids {client_id} and {cid}"
                )
            rows_y.append(label)
            rows_X.append(feats)
        if not rows_X:
            raise ParseError(f"{path}: no data rows")
    return ClientDataset(
        client_id=int(client_id),  # type: ignore[arg-type]
        X=np.array(rows_X),
        y=np.array(rows_y),
        weight=1.0,
        true_cluster=None,
    )

"""Cluster-aware federation: multiple global models instead of one.

Three schemes are provided. Multi-center EM attaches each client to the
nearest center in parameter space and re-averages per cluster; hypothesis
assignment picks the center with the lowest loss on the client's data;
hierarchical splitting recursively bi-partitions clients whose local update
directions disagree, measured by cosine similarity.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .engine import (
    ClientMessage,
    Hyperparams,
    Strategy,
    local_train_seed,
    weighted_average,
)
from .errors import DomainError, ShapeError, UndefinedSimilarityError
from .models import Array, ModelSpec, evaluate_loss, sgd_train


@dataclass(frozen=True)
class ClusterModelSet:
    """K cluster centers plus the current client-to-cluster map."""

    centers: tuple[Array, ...]
    assignment: dict[int, int]

    def __post_init__(self) -> None:
        if len(self.centers) < 1:
            raise DomainError("at least one cluster center is required")
        for cid, k in self.assignment.items():
            if not 0 <= k < len(self.centers):
                raise DomainError(f"client {cid} assigned to missing cluster {k}")


@dataclass(frozen=True)
class SimilarityMatrix:
    """Symmetric pairwise cosine similarities with unit diagonal."""

    values: Array

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ShapeError(f"similarity matrix must be square, got {v.shape}")
        if np.abs(v - v.T).max(initial=0.0) > 1e-12:
            raise DomainError("similarity matrix must be symmetric within 1e-12")
        if v.size and (np.abs(np.diag(v) - 1.0).max() > 1e-12):
            raise DomainError("similarity diagonal must be 1")
        if v.size and (v.min() < -1.0 - 1e-12 or v.max() > 1.0 + 1e-12):
            raise DomainError("similarities must lie in [-1, 1]")
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.shape[0]


def gradient_cosine(g_i: Array, g_j: Array) -> float:
    """Cosine similarity of two update directions, clamped to [-1, 1]."""
    g_i = np.asarray(g_i, dtype=np.float64)
    g_j = np.asarray(g_j, dtype=np.float64)
    if g_i.shape != g_j.shape:
        raise ShapeError(f"vectors differ in shape: {g_i.shape} vs {g_j.shape}")
    ni = float(np.linalg.norm(g_i))
    nj = float(np.linalg.norm(g_j))
    if ni == 0.0 or nj == 0.0:
        raise UndefinedSimilarityError("cosine similarity is undefined for a zero vector")
    return float(np.clip(np.dot(g_i, g_j) / (ni * nj), -1.0, 1.0))


def pairwise_similarity(updates: list[Array]) -> SimilarityMatrix:
    """Similarity matrix over update vectors; diagonal fixed at exactly 1."""
    n = len(updates)
    values = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            values[i, j] = values[j, i] = gradient_cosine(updates[i], updates[j])
    return SimilarityMatrix(values)


def assign_by_weights(client_params: list[Array], centers: list[Array]) -> list[int]:
    """Nearest center per client by squared L2 parameter distance; ties go low."""
    if len(centers) == 0:
        raise DomainError("assign_by_weights needs at least one center")
    stacked = np.stack([np.asarray(c, dtype=np.float64) for c in centers])
    out = []
    for p in client_params:
        p = np.asarray(p, dtype=np.float64)
        if p.shape != stacked.shape[1:]:
            raise ShapeError(f"client vector {p.shape} does not match centers {stacked.shape[1:]}")
        d = ((stacked - p) ** 2).sum(axis=1)
        out.append(int(np.argmin(d)))
    return out


def assign_by_loss(client, centers: list[Array], spec: ModelSpec) -> int:
    """Index of the center whose model yields minimal loss on the client's data."""
    if len(centers) == 0:
        raise DomainError("assign_by_loss needs at least one center")
    losses = [evaluate_loss(spec, c, client.X, client.y) for c in centers]
    return int(np.argmin(losses))


def clustering_objective(
    entries: list[tuple[Array, float]], centers: tuple[Array, ...] | list[Array]
) -> float:
    """Weighted sum over clients of the squared distance to the nearest center."""
    total = 0.0
    stacked = np.stack([np.asarray(c, dtype=np.float64) for c in centers])
    for params, weight in entries:
        d = ((stacked - np.asarray(params)) ** 2).sum(axis=1)
        total += weight * float(d.min())
    return total


def _repair_empty_clusters(
    assignment: list[int], params: list[Array], centers: list[Array]
) -> list[int]:
    """Move the worst-fitting client into each memberless cluster.

    Deterministic rule: empty clusters are repaired in ascending index order;
    the donor is the client farthest from its assigned center, drawn only
    from clusters that keep at least one member, lowest position on ties.
    """
    assignment = list(assignment)
    k_total = len(centers)
    for k in range(k_total):
        if k in assignment:
            continue
        counts = {g: assignment.count(g) for g in set(assignment)}
        best_pos, best_dist = None, -1.0
        for pos, (p, g) in enumerate(zip(params, assignment)):
            if counts[g] < 2:
                continue
            dist = float(((np.asarray(p) - centers[g]) ** 2).sum())
            if dist > best_dist:
                best_pos, best_dist = pos, dist
        if best_pos is None:
            break
        counts[assignment[best_pos]] -= 1
        assignment[best_pos] = k
    return assignment


def _mstep(
    messages: list[ClientMessage], assignment: list[int], old_centers: tuple[Array, ...]
) -> tuple[Array, ...]:
    """Per-cluster weighted average of member params; empty clusters keep the
    previous center."""
    centers = []
    for k in range(len(old_centers)):
        member_entries = [
            (m.params, m.weight) for m, g in zip(messages, assignment) if g == k
        ]
        centers.append(weighted_average(member_entries) if member_entries else old_centers[k])
    return tuple(centers)


def em_round(
    clients,
    state: ClusterModelSet,
    spec: ModelSpec,
    hyper: Hyperparams,
    *,
    root_seed: int,
    round_index: int,
) -> ClusterModelSet:
    """One expectation-maximization round over the full federation.

    E-step: each client trains locally from its assigned center, then is
    reassigned to the nearest center by parameter distance. M-step: centers
    become the weight-averaged member models. The clustering objective is
    checked to be non-increasing across the M-step for the trained models.
    """
    ordered = sorted(clients, key=lambda c: c.client_id)
    messages = []
    for c in ordered:
        base = state.centers[state.assignment.get(c.client_id, 0)]
        trained = sgd_train(
            spec,
            base,
            c,
            steps=hyper.local_steps(len(c.X)),
            lr=hyper.lr,
            batch_size=hyper.batch_size,
            seed=local_train_seed(root_seed, round_index, c.client_id),
        )
        messages.append(ClientMessage(client_id=c.client_id, weight=c.weight, params=trained))
    assignment = assign_by_weights([m.params for m in messages], list(state.centers))
    assignment = _repair_empty_clusters(
        assignment, [m.params for m in messages], list(state.centers)
    )
    new_centers = _mstep(messages, assignment, state.centers)
    entries = [(m.params, m.weight) for m in messages]
    before = clustering_objective(entries, state.centers)
    after = clustering_objective(entries, new_centers)
    if after > before + 1e-9 * (1.0 + abs(before)):
        raise DomainError(f"clustering objective increased across M-step: {before} -> {after}")
    return ClusterModelSet(
        centers=new_centers,
        assignment={m.client_id: g for m, g in zip(messages, assignment)},
    )


def farthest_point_centers(entries: list[tuple[int, Array]], k: int) -> list[Array]:
    """Pick k well-spread parameter vectors: start farthest from the mean,
    then greedily maximize the distance to the chosen set. Ties go to the
    lowest client id."""
    if k > len(entries):
        raise DomainError(f"need at least {k} candidate models, got {len(entries)}")
    entries = sorted(entries, key=lambda e: e[0])
    stacked = np.stack([np.asarray(p, dtype=np.float64) for _, p in entries])
    mean = stacked.mean(axis=0)
    chosen = [int(np.argmax(((stacked - mean) ** 2).sum(axis=1)))]
    while len(chosen) < k:
        dists = np.full(len(entries), -1.0)
        for i in range(len(entries)):
            if i in chosen:
                continue
            dists[i] = min(float(((stacked[i] - stacked[j]) ** 2).sum()) for j in chosen)
        chosen.append(int(np.argmax(dists)))
    return [stacked[i].copy() for i in chosen]


def _two_way_complete_linkage(members: list[int], dist: Array) -> tuple[list[int], list[int]]:
    """Agglomerate with complete linkage until two clusters remain."""
    clusters = [[m] for m in members]
    while len(clusters) > 2:
        best = None
        best_d = np.inf
        for i in range(len(clusters)):
            for j in range(i + 1, len(clusters)):
                d = max(dist[a, b] for a in clusters[i] for b in clusters[j])
                if d < best_d:
                    best_d, best = d, (i, j)
        i, j = best
        clusters[i] = clusters[i] + clusters[j]
        del clusters[j]
    clusters.sort(key=min)
    return clusters[0], clusters[1]


def hierarchical_split(
    sim: SimilarityMatrix, split_threshold: float, min_cluster_size: int = 1
) -> list[list[int]]:
    """Recursively bi-partition indices whose update directions disagree.

    Each group is cut into the two-cluster complete-linkage partition of the
    distance 1 - similarity. The cut is kept only when the two sides stay
    dissimilar (max cross similarity below ``split_threshold``) and neither
    side falls under ``min_cluster_size``; accepted sides are split further.
    """
    if min_cluster_size < 1:
        raise DomainError("min_cluster_size must be >= 1")
    values = sim.values
    dist = 1.0 - values

    def rec(members: list[int]) -> list[list[int]]:
        if len(members) < 2 or len(members) < 2 * min_cluster_size:
            return [members]
        a, b = _two_way_complete_linkage(members, dist)
        cross_max = max(values[i, j] for i in a for j in b)
        if cross_max >= split_threshold or len(a) < min_cluster_size or len(b) < min_cluster_size:
            return [members]
        return rec(a) + rec(b)

    if len(sim) == 0:
        return []
    return rec(list(range(len(sim))))


class MultiCenter(Strategy):
    """EM over K global models with nearest-center assignment.

    Round 0 is a plain warm-up averaging round; its client models seed the K
    centers by farthest-point sampling (K=1 keeps the averaged model, which
    makes the single-center scheme coincide with plain averaging exactly).
    """

    name = "multicenter"

    def local_update(self, client, state, spec, hyper, seed):
        base = state.global_params[state.assignments.get(client.client_id, 0)]
        params = sgd_train(
            spec, base, client,
            steps=hyper.local_steps(len(client)),
            lr=hyper.lr, batch_size=hyper.batch_size, seed=seed,
            loss_kind=self.loss_kind(spec),
        )
        return ClientMessage(client_id=client.client_id, weight=client.weight, params=params)

    def aggregate(self, state, messages, spec, hyper):
        if state.round == 0:
            if hyper.num_centers == 1:
                merged = weighted_average([(m.params, m.weight) for m in messages])
                return replace(state, global_params=(merged,), assignments={})
            centers = farthest_point_centers(
                [(m.client_id, m.params) for m in messages], hyper.num_centers
            )
            assignment = assign_by_weights([m.params for m in messages], centers)
            return replace(
                state,
                global_params=tuple(centers),
                assignments={m.client_id: g for m, g in zip(messages, assignment)},
            )
        params = [m.params for m in messages]
        assignment = assign_by_weights(params, list(state.global_params))
        assignment = _repair_empty_clusters(assignment, params, list(state.global_params))
        entries = [(m.params, m.weight) for m in messages]
        new_centers = _mstep(messages, assignment, state.global_params)
        before = clustering_objective(entries, state.global_params)
        after = clustering_objective(entries, new_centers)
        if after > before + 1e-9 * (1.0 + abs(before)):
            raise DomainError(
                f"clustering objective increased across M-step: {before} -> {after}"
            )
        assignments = dict(state.assignments)
        assignments.update({m.client_id: g for m, g in zip(messages, assignment)})
        return replace(state, global_params=new_centers, assignments=assignments)


class Hypothesis(Strategy):
    """K global models; each client trains from whichever fits its data best.

    Shares the warm-up and farthest-point seeding with MultiCenter but
    assigns by model loss on the client's own examples instead of parameter
    distance.
    """

    name = "hypothesis"

    def local_update(self, client, state, spec, hyper, seed):
        if state.round == 0 or len(state.global_params) == 1:
            k = state.assignments.get(client.client_id, 0)
        else:
            k = assign_by_loss(client, list(state.global_params), spec)
        params = sgd_train(
            spec, state.global_params[k], client,
            steps=hyper.local_steps(len(client)),
            lr=hyper.lr, batch_size=hyper.batch_size, seed=seed,
            loss_kind=self.loss_kind(spec),
        )
        return ClientMessage(
            client_id=client.client_id, weight=client.weight, params=params, cluster=k
        )

    def aggregate(self, state, messages, spec, hyper):
        if state.round == 0 and hyper.num_centers > 1:
            centers = farthest_point_centers(
                [(m.client_id, m.params) for m in messages], hyper.num_centers
            )
            assignment = assign_by_weights([m.params for m in messages], centers)
            return replace(
                state,
                global_params=tuple(centers),
                assignments={m.client_id: g for m, g in zip(messages, assignment)},
            )
        assignment = [m.cluster for m in messages]
        new_centers = _mstep(messages, assignment, state.global_params)
        assignments = dict(state.assignments)
        assignments.update({m.client_id: m.cluster for m in messages})
        return replace(state, global_params=new_centers, assignments=assignments)


class Hierarchical(Strategy):
    """One model per group, with groups split on update-direction disagreement.

    Every round each group's participants report their parameter delta; a
    group is recursively bi-partitioned whenever its members' deltas contain
    sufficiently dissimilar directions. Groups are renumbered by their lowest
    member id so the partition history is deterministic.
    """

    name = "hierarchical"

    def __init__(self) -> None:
        self._deltas: dict[int, Array] = {}

    def local_update(self, client, state, spec, hyper, seed):
        g = state.assignments.get(client.client_id, 0)
        base = state.global_params[g]
        params = sgd_train(
            spec, base, client,
            steps=hyper.local_steps(len(client)),
            lr=hyper.lr, batch_size=hyper.batch_size, seed=seed,
            loss_kind=self.loss_kind(spec),
        )
        return ClientMessage(
            client_id=client.client_id, weight=client.weight,
            params=params, delta=params - base, cluster=g,
        )

    def aggregate(self, state, messages, spec, hyper):
        for m in messages:
            self._deltas[m.client_id] = m.delta
        known = sorted(set(state.assignments) | set(self._deltas))
        groups: dict[int, list[int]] = {}
        for cid in known:
            groups.setdefault(state.assignments.get(cid, 0), []).append(cid)

        new_groups: list[list[int]] = []
        for g in sorted(groups):
            members = groups[g]
            with_delta = [cid for cid in members if cid in self._deltas]
            if len(with_delta) < 2 or any(
                float(np.linalg.norm(self._deltas[cid])) == 0.0 for cid in with_delta
            ):
                new_groups.append(members)
                continue
            sim = pairwise_similarity([self._deltas[cid] for cid in with_delta])
            parts = hierarchical_split(sim, hyper.split_threshold, hyper.min_cluster_size)
            if len(parts) == 1:
                new_groups.append(members)
                continue
            id_parts = [[with_delta[i] for i in part] for part in parts]
            leftovers = [cid for cid in members if cid not in self._deltas]
            id_parts[0].extend(leftovers)
            new_groups.extend(sorted(p) for p in id_parts)

        new_groups.sort(key=min)
        assignments = {cid: gi for gi, part in enumerate(new_groups) for cid in part}
        by_client = {m.client_id: m for m in messages}
        old_model = {cid: state.global_params[g] for cid, g in state.assignments.items()}
        models = []
        for part in new_groups:
            entries = [
                (by_client[cid].params, by_client[cid].weight) for cid in part if cid in by_client
            ]
            if entries:
                models.append(weighted_average(entries))
            else:
                models.append(old_model.get(part[0], state.global_params[0]))
        return replace(state, global_params=tuple(models), assignments=assignments)

"""Config-driven experiment runner.

A single JSON config names the federation, the model, one strategy and its
hyperparameters. Running an experiment writes a resolved config snapshot,
a JSON-lines stream of round records, final per-client metrics and
strategy-specific artifacts into the output directory; replaying the
snapshot reproduces the round stream byte for byte.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import oneclass as oc
from .clustering import Hierarchical, Hypothesis, MultiCenter
from .datagen import (
    ClientDataset,
    FederationConfig,
    generate_federation,
    normals_only,
    renormalize_weights,
    split_federation,
)
from .distillation import Distill, HeteroModelRegistry, OneShot, save_predictions_csv
from .engine import (
    ClientView,
    FedAvg,
    FederationState,
    Hyperparams,
    RoundRecord,
    Strategy,
    run_round,
)
from .errors import ConfigError, SimulationHalted
from .metrics import cluster_purity, roc_auc
from .models import Batch, ModelSpec, evaluate_loss, forward
from .personalization import Mixture, OneStepMeta, Proximal, save_personal_params

STRATEGIES = (
    "fedavg",
    "multicenter",
    "hierarchical",
    "hypothesis",
    "mixture",
    "proximal",
    "onestep",
    "distill",
    "oneshot",
    "oneclass",
)
CLUSTER_STRATEGIES = {"multicenter", "hierarchical", "hypothesis"}

_REQUIRED_HYPER = {
    "multicenter": ("K",),
    "hypothesis": ("K",),
    "mixture": ("lambda",),
    "proximal": ("lambda",),
    "distill": ("lambda",),
    "onestep": ("alpha",),
    "oneshot": ("k_select",),
    "oneclass": ("target_fpr",),
}

_HYPER_DEFAULTS = {
    "lr": 0.1,
    "local_epochs": 1,
    "batch_size": 32,
    "rounds": 30,
    "sample_fraction": 1.0,
    "K": 1,
    "lambda": 0.0,
    "alpha": 1.0,
    "temperature": 2.0,
    "k_select": 1,
    "split_threshold": 0.0,
    "min_cluster_size": 1,
    "target_fpr": 0.05,
    "budgets": None,
    "test_fraction": 0.2,
}

_FEDERATION_DEFAULTS = {
    "num_clients": None,
    "num_clusters": 1,
    "samples_per_client": 100,
    "input_dim": 8,
    "num_classes": 2,
    "skew_kind": "feature-shift",
    "anomaly_fraction": 0.0,
    "seed": None,
    "public_samples": 200,
    "cluster_separation": 3.0,
    "class_separation": 4.0,
}


@dataclass
class ExperimentConfig:
    """Validated, fully-resolved experiment description."""

    federation: FederationConfig
    strategy: str
    hyper: Hyperparams
    model: ModelSpec
    registry_models: list[ModelSpec] | None
    seed: int
    output_dir: Path
    test_fraction: float
    resolved: dict


@dataclass
class ResultsBundle:
    """Everything one run produced, as returned to library callers."""

    config: dict
    records: list[RoundRecord]
    client_metrics: list[dict]
    assignment_history: list[dict]
    wall_clock_sec: float
    halted_reason: str | None
    extras: dict


def _model_from_config(mcfg: dict, input_dim: int, num_classes: int, where: str) -> ModelSpec:
    kind = mcfg.get("kind", "logistic")
    activation = mcfg.get("activation", "tanh")
    hidden = list(mcfg.get("hidden_dims", []))
    try:
        if kind == "logistic":
            return ModelSpec("logistic", (input_dim, num_classes), activation)
        if kind == "mlp":
            dims = (input_dim, *(hidden or [16]), num_classes)
            return ModelSpec("mlp", dims, activation)
        if kind == "autoencoder":
            if not hidden:
                hidden = [max(input_dim // 2, 2), max(input_dim // 4, 1)]
            dims = (input_dim, *hidden, *reversed(hidden[:-1]), input_dim)
            return ModelSpec("autoencoder", dims, activation, "linear-reconstruction")
    except Exception as exc:
        raise ConfigError(f"{where}: {exc}") from None
    raise ConfigError(f"{where}.kind: unknown model kind {kind!r}")


def _resolve_model_defaults(raw_model: dict, strategy: str) -> dict:
    model = dict(raw_model)
    if strategy == "oneclass":
        model.setdefault("kind", "autoencoder")
        if model["kind"] != "autoencoder":
            raise ConfigError("model.kind: strategy 'oneclass' requires an autoencoder")
    else:
        model.setdefault("kind", "logistic")
    model.setdefault("activation", "tanh")
    model.setdefault("hidden_dims", [])
    return model


def load_config(path: str | Path) -> dict:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    return raw


def resolve_config(
    raw: dict,
    *,
    seed_override: int | None = None,
    rounds_override: int | None = None,
    output_override: str | None = None,
) -> ExperimentConfig:
    """Fill defaults, apply overrides and validate; raises ConfigError with the
    offending field named."""
    strategy = raw.get("strategy")
    if strategy is None:
        raise ConfigError("strategy: required")
    if strategy not in STRATEGIES:
        raise ConfigError(f"strategy: unknown strategy {strategy!r}; choose from {STRATEGIES}")

    fed_raw = raw.get("federation")
    if not isinstance(fed_raw, dict):
        raise ConfigError("federation: required object")
    unknown = set(fed_raw) - set(_FEDERATION_DEFAULTS)
    if unknown:
        raise ConfigError(f"federation.{sorted(unknown)[0]}: unknown field")
    if "num_clients" not in fed_raw:
        raise ConfigError("federation.num_clients: required")

    hyper_raw = dict(raw.get("hyperparams", {}))
    unknown = set(hyper_raw) - set(_HYPER_DEFAULTS)
    if unknown:
        raise ConfigError(f"hyperparams.{sorted(unknown)[0]}: unknown field")
    for field_name in _REQUIRED_HYPER.get(strategy, ()):
        if field_name not in hyper_raw:
            raise ConfigError(
                f"hyperparams.{field_name}: required by strategy {strategy!r}"
            )

    seed = int(raw.get("seed", 0)) if seed_override is None else int(seed_override)
    if seed < 0:
        raise ConfigError("seed: must be non-negative")

    output_dir = output_override or raw.get("output_dir")
    if not output_dir:
        raise ConfigError("output_dir: required")

    fed_resolved = {**{k: v for k, v in _FEDERATION_DEFAULTS.items() if v is not None}, **fed_raw}
    fed_resolved.setdefault("seed", seed)
    if isinstance(fed_resolved.get("samples_per_client"), list):
        fed_resolved["samples_per_client"] = tuple(fed_resolved["samples_per_client"])
    try:
        federation = FederationConfig(**fed_resolved)
    except ConfigError as exc:
        raise ConfigError(f"federation.{exc}") from None
    except TypeError as exc:
        raise ConfigError(f"federation: {exc}") from None

    hyper_resolved = {**_HYPER_DEFAULTS, **hyper_raw}
    if rounds_override is not None:
        hyper_resolved["rounds"] = int(rounds_override)
    if strategy == "oneshot":
        hyper_resolved["rounds"] = 1
    if hyper_resolved["rounds"] < 1:
        raise ConfigError("hyperparams.rounds: must be >= 1")
    if not 0 < hyper_resolved["sample_fraction"] <= 1:
        raise ConfigError("hyperparams.sample_fraction: must lie in (0, 1]")
    if not 1 <= hyper_resolved["K"] <= federation.num_clients:
        raise ConfigError("hyperparams.K: must lie in [1, num_clients]")
    if hyper_resolved["lambda"] < 0:
        raise ConfigError("hyperparams.lambda: must be >= 0")
    if hyper_resolved["alpha"] <= 0:
        raise ConfigError("hyperparams.alpha: must be positive")
    if hyper_resolved["temperature"] <= 0:
        raise ConfigError("hyperparams.temperature: must be positive")
    if not 1 <= hyper_resolved["k_select"] <= federation.num_clients:
        raise ConfigError("hyperparams.k_select: must lie in [1, num_clients]")
    if not 0 < hyper_resolved["target_fpr"] < 1:
        raise ConfigError("hyperparams.target_fpr: must lie in (0, 1)")
    if not 0 <= hyper_resolved["test_fraction"] < 0.5:
        raise ConfigError("hyperparams.test_fraction: must lie in [0, 0.5)")
    budgets = hyper_resolved["budgets"]
    if budgets is not None and int(budgets) < 0:
        raise ConfigError("hyperparams.budgets: must be >= 0")

    hyper = Hyperparams(
        lr=float(hyper_resolved["lr"]),
        local_epochs=int(hyper_resolved["local_epochs"]),
        batch_size=int(hyper_resolved["batch_size"]),
        rounds=int(hyper_resolved["rounds"]),
        sample_fraction=float(hyper_resolved["sample_fraction"]),
        num_centers=int(hyper_resolved["K"]),
        lam=float(hyper_resolved["lambda"]),
        alpha=float(hyper_resolved["alpha"]),
        temperature=float(hyper_resolved["temperature"]),
        k_select=int(hyper_resolved["k_select"]),
        split_threshold=float(hyper_resolved["split_threshold"]),
        min_cluster_size=int(hyper_resolved["min_cluster_size"]),
        target_fpr=float(hyper_resolved["target_fpr"]),
        max_accesses=None if budgets is None else int(budgets),
    )
    if hyper.lr <= 0:
        raise ConfigError("hyperparams.lr: must be positive")
    if hyper.local_epochs < 1:
        raise ConfigError("hyperparams.local_epochs: must be >= 1")
    if hyper.batch_size < 1:
        raise ConfigError("hyperparams.batch_size: must be >= 1")

    model_raw = _resolve_model_defaults(raw.get("model", {}), strategy)
    model = _model_from_config(
        model_raw, federation.input_dim, federation.num_classes, "model"
    )

    registry_models = None
    registry_raw = raw.get("registry")
    if strategy in ("distill", "oneshot"):
        if registry_raw is None:
            if strategy == "distill":
                registry_raw = [
                    {"kind": "logistic"},
                    {"kind": "mlp", "hidden_dims": [16]},
                    {"kind": "mlp", "hidden_dims": [16, 8]},
                ]
            else:
                registry_raw = [model_raw]
        registry_models = [
            _model_from_config(
                _resolve_model_defaults(m, strategy), federation.input_dim,
                federation.num_classes, f"registry[{i}]",
            )
            for i, m in enumerate(registry_raw)
        ]
    elif registry_raw is not None:
        raise ConfigError("registry: only valid for strategies 'distill' and 'oneshot'")

    resolved = {
        "federation": {
            **fed_resolved,
            "samples_per_client": list(fed_resolved["samples_per_client"])
            if isinstance(fed_resolved["samples_per_client"], tuple)
            else fed_resolved["samples_per_client"],
        },
        "model": model_raw,
        "registry": registry_raw,
        "strategy": strategy,
        "hyperparams": hyper_resolved,
        "seed": seed,
        "output_dir": str(output_dir),
    }
    return ExperimentConfig(
        federation=federation,
        strategy=strategy,
        hyper=hyper,
        model=model,
        registry_models=registry_models,
        seed=seed,
        output_dir=Path(output_dir),
        test_fraction=float(hyper_resolved["test_fraction"]),
        resolved=resolved,
    )


def build_strategy(cfg: ExperimentConfig, clients: list[ClientDataset], public: Batch) -> Strategy:
    name = cfg.strategy
    if name == "fedavg" or name == "oneclass":
        return FedAvg()
    if name == "multicenter":
        return MultiCenter()
    if name == "hypothesis":
        return Hypothesis()
    if name == "hierarchical":
        return Hierarchical()
    if name == "mixture":
        return Mixture()
    if name == "proximal":
        return Proximal()
    if name == "onestep":
        return OneStepMeta()
    registry = HeteroModelRegistry(
        {
            c.client_id: cfg.registry_models[c.client_id % len(cfg.registry_models)]
            for c in clients
        }
    )
    if name == "distill":
        return Distill(registry, public.X)
    if name == "oneshot":
        return OneShot(registry, public.X)
    raise ConfigError(f"strategy: unknown strategy {name!r}")


def _personal_spec(strategy: Strategy, cfg: ExperimentConfig, cid: int) -> ModelSpec:
    if isinstance(strategy, (Distill, OneShot)):
        return strategy.registry[cid]
    return cfg.model


def _client_metric_rows(
    cfg: ExperimentConfig,
    strategy: Strategy,
    state: FederationState,
    clients: list[ClientDataset],
    tests: dict[int, Batch],
) -> list[dict]:
    rows = []
    for c in sorted(clients, key=lambda x: x.client_id):
        test = tests[c.client_id]
        view = ClientView(c.client_id, test.X, test.y, c.weight)
        loss, acc = strategy.client_eval(state, view, cfg.model, cfg.hyper)
        row = {
            "client_id": c.client_id,
            "weight": c.weight,
            "loss": float(loss),
            "accuracy": None if acc is None else float(acc),
            "cluster": state.assignments.get(c.client_id)
            if cfg.strategy in CLUSTER_STRATEGIES
            else None,
            "true_cluster": c.true_cluster,
            "personal_loss": None,
            "personal_accuracy": None,
        }
        if c.client_id in state.personal_params:
            pspec = _personal_spec(strategy, cfg, c.client_id)
            pparams = state.personal_params[c.client_id]
            row["personal_loss"] = float(
                evaluate_loss(pspec, pparams, test.X, test.y, loss_kind="cross-entropy")
                if pspec.output == "softmax-classifier"
                else evaluate_loss(pspec, pparams, test.X, loss_kind="squared-error")
            )
            if pspec.output == "softmax-classifier":
                probs = forward(pspec, pparams, test.X)
                row["personal_accuracy"] = float((probs.argmax(axis=1) == test.y).mean())
        rows.append(row)
    return rows


def _write_rounds(path: Path, records: list[RoundRecord]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def _write_assignments(path: Path, lines: list[dict]) -> None:
    with open(path, "w") as fh:
        for line in lines:
            fh.write(json.dumps(line, sort_keys=True) + "\n")


_METRIC_COLUMNS = (
    "client_id",
    "weight",
    "loss",
    "accuracy",
    "cluster",
    "true_cluster",
    "personal_loss",
    "personal_accuracy",
)


def _write_metrics(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_METRIC_COLUMNS)
        for row in rows:
            out = []
            for col in _METRIC_COLUMNS:
                v = row[col]
                out.append("" if v is None else (repr(v) if isinstance(v, float) else v))
            writer.writerow(out)


def _read_metrics(path: Path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for raw in csv.DictReader(fh):
            row: dict = {}
            for col in _METRIC_COLUMNS:
                v = raw.get(col, "")
                if v == "" or v is None:
                    row[col] = None
                elif col in ("client_id", "cluster", "true_cluster"):
                    row[col] = int(v)
                else:
                    row[col] = float(v)
            rows.append(row)
    return rows


def _run_standard(
    cfg: ExperimentConfig, clients: list[ClientDataset], public: Batch, parallel: bool
) -> tuple[ResultsBundle, FederationState, Strategy, dict[int, Batch]]:
    train_clients, tests = split_federation(clients, cfg.test_fraction, cfg.seed)
    strategy = build_strategy(cfg, clients, public)
    state = strategy.build_state(cfg.model, train_clients, cfg.hyper, cfg.seed)
    records: list[RoundRecord] = []
    assignment_lines: list[dict] = []
    halted = None
    t0 = time.perf_counter()
    for _ in range(cfg.hyper.rounds):
        try:
            state, rec = run_round(
                state, strategy, train_clients, cfg.hyper.sample_fraction,
                cfg.model, cfg.hyper, parallel=parallel,
            )
        except SimulationHalted as exc:
            halted = str(exc)
            break
        records.append(rec)
        if cfg.strategy in CLUSTER_STRATEGIES:
            for c in sorted(train_clients, key=lambda x: x.client_id):
                assignment_lines.append(
                    {
                        "round": rec.round,
                        "client_id": c.client_id,
                        "cluster": state.assignments.get(c.client_id, 0),
                    }
                )
    wall = time.perf_counter() - t0
    metric_rows = _client_metric_rows(cfg, strategy, state, clients, tests)
    bundle = ResultsBundle(
        config=cfg.resolved,
        records=records,
        client_metrics=metric_rows,
        assignment_history=assignment_lines,
        wall_clock_sec=wall,
        halted_reason=halted,
        extras={},
    )
    return bundle, state, strategy, tests


def _split_three_way(
    client: ClientDataset, fraction: float, seed: int
) -> tuple[ClientDataset, Batch, Batch]:
    """Train/validation/test split of one client's normal rows."""
    n = len(client)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2, client.client_id]))
    order = rng.permutation(n)
    n_side = max(1, int(round(fraction * n)))
    val_idx = np.sort(order[:n_side])
    test_idx = np.sort(order[n_side : 2 * n_side])
    train_idx = np.sort(order[2 * n_side :])
    train = replace(
        client,
        X=client.X[train_idx],
        y=client.y[train_idx],
        anomaly_mask=client.anomaly_mask[train_idx],
    )
    return (
        train,
        Batch(X=client.X[val_idx], y=client.y[val_idx]),
        Batch(X=client.X[test_idx], y=client.y[test_idx]),
    )


def _run_oneclass(
    cfg: ExperimentConfig, clients: list[ClientDataset], parallel: bool
) -> tuple[ResultsBundle, list[dict]]:
    normals = normals_only(clients)
    anomaly_X = np.concatenate(
        [c.X[c.anomaly_mask] for c in clients if c.anomaly_mask.any()] or
        [np.empty((0, cfg.federation.input_dim))],
        axis=0,
    )
    fraction = cfg.test_fraction if cfg.test_fraction > 0 else 0.2
    parts = [_split_three_way(c, fraction, cfg.seed) for c in normals]
    train_clients = renormalize_weights([p[0] for p in parts])
    val_X = np.concatenate([p[1].X for p in parts], axis=0)
    test_X = np.concatenate([p[2].X for p in parts], axis=0)

    scaler = oc.fit_standardizer(train_clients)
    train_clients = oc.standardize_clients(train_clients, scaler)
    val_X = scaler.transform(val_X)
    test_X = scaler.transform(test_X)
    anomaly_X = scaler.transform(anomaly_X) if len(anomaly_X) else anomaly_X

    strategy = FedAvg()
    state = strategy.build_state(cfg.model, train_clients, cfg.hyper, cfg.seed)
    records: list[RoundRecord] = []
    halted = None
    t0 = time.perf_counter()
    for _ in range(cfg.hyper.rounds):
        try:
            state, rec = oc.train_one_class_round(
                train_clients, cfg.model, state, cfg.hyper, parallel=parallel
            )
        except SimulationHalted as exc:
            halted = str(exc)
            break
        records.append(rec)
    wall = time.perf_counter() - t0

    params = state.global_params[0]
    val_scores = oc.reconstruction_scores(cfg.model, params, val_X)
    threshold = oc.calibrate_threshold(val_scores, cfg.hyper.target_fpr)
    eval_X = np.concatenate([test_X, anomaly_X], axis=0) if len(anomaly_X) else test_X
    truth = np.concatenate([np.zeros(len(test_X), dtype=int), np.ones(len(anomaly_X), dtype=int)])
    scored = oc.score(cfg.model, params, eval_X, threshold)
    score_rows = [
        {
            "example_index": s.example_index,
            "score": s.score,
            "label_pred": s.label_pred,
            "true_label": int(truth[s.example_index]),
        }
        for s in scored
    ]
    extras = {
        "threshold": float(threshold),
        "target_fpr": cfg.hyper.target_fpr,
        "realized_fpr": float(
            np.mean([s.score > threshold for s in scored[: len(test_X)]])
        ),
    }
    if len(anomaly_X):
        extras["auc"] = roc_auc([s.score for s in scored], truth)
        extras["detection_rate"] = float(
            np.mean([s.score > threshold for s in scored[len(test_X) :]])
        )

    metric_rows = []
    last = records[-1] if records else None
    for c in sorted(clients, key=lambda x: x.client_id):
        metric_rows.append(
            {
                "client_id": c.client_id,
                "weight": c.weight,
                "loss": last.per_client_loss.get(c.client_id) if last else None,
                "accuracy": None,
                "cluster": None,
                "true_cluster": c.true_cluster,
                "personal_loss": None,
                "personal_accuracy": None,
            }
        )
    bundle = ResultsBundle(
        config=cfg.resolved,
        records=records,
        client_metrics=metric_rows,
        assignment_history=[],
        wall_clock_sec=wall,
        halted_reason=halted,
        extras=extras,
    )
    return bundle, score_rows


def run_experiment(
    config: dict | str | Path,
    *,
    seed_override: int | None = None,
    rounds_override: int | None = None,
    output_override: str | None = None,
    parallel: bool = False,
) -> ResultsBundle:
    """Run one experiment end to end and write its artifacts.

    ``config`` is a path to a JSON file or an already-loaded dict. Raises
    ConfigError on invalid input; budget exhaustion mid-run ends the round
    loop gracefully and is reported in run_meta.json.
    """
    raw = load_config(config) if isinstance(config, (str, Path)) else config
    cfg = resolve_config(
        raw,
        seed_override=seed_override,
        rounds_override=rounds_override,
        output_override=output_override,
    )
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.resolved, indent=2, sort_keys=True) + "\n")

    clients, public = generate_federation(cfg.federation)
    score_rows: list[dict] = []
    if cfg.strategy == "oneclass":
        bundle, score_rows = _run_oneclass(cfg, clients, parallel)
    else:
        bundle, state, strategy, _ = _run_standard(cfg, clients, public, parallel)
        if isinstance(strategy, Distill):
            save_predictions_csv(out / "predictions.csv", strategy.last_round_predictions(state))
        if state.personal_params:
            pdir = out / "personal"
            pdir.mkdir(exist_ok=True)
            for cid in sorted(state.personal_params):
                save_personal_params(
                    pdir / f"client_{cid:03d}.params",
                    _personal_spec(strategy, cfg, cid),
                    cid,
                    state.round,
                    state.personal_params[cid],
                )

    _write_rounds(out / "rounds.jsonl", bundle.records)
    _write_metrics(out / "metrics.csv", bundle.client_metrics)
    if bundle.assignment_history:
        _write_assignments(out / "assignments.jsonl", bundle.assignment_history)
    if score_rows:
        with open(out / "scores.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["example_index", "score", "label_pred", "true_label"])
            for row in score_rows:
                writer.writerow(
                    [row["example_index"], repr(row["score"]), row["label_pred"], row["true_label"]]
                )
    meta = {
        "rounds_completed": len(bundle.records),
        "halted_early": bundle.halted_reason is not None,
        "halted_reason": bundle.halted_reason,
        "wall_clock_sec": bundle.wall_clock_sec,
        **bundle.extras,
    }
    (out / "run_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return bundle


def build_summary(output_dir: str | Path) -> dict:
    """Assemble the run summary from artifacts on disk.

    Raises FileNotFoundError when required artifacts are absent.
    """
    out = Path(output_dir)
    config_path = out / "config.json"
    rounds_path = out / "rounds.jsonl"
    metrics_path = out / "metrics.csv"
    for p in (config_path, rounds_path, metrics_path):
        if not p.exists():
            raise FileNotFoundError(f"missing artifact: {p}")
    config = json.loads(config_path.read_text())
    records = [json.loads(line) for line in rounds_path.read_text().splitlines() if line]
    metric_rows = _read_metrics(metrics_path)
    meta = {}
    if (out / "run_meta.json").exists():
        meta = json.loads((out / "run_meta.json").read_text())

    summary: dict = {
        "strategy": config["strategy"],
        "rounds_completed": len(records),
        "halted_early": bool(meta.get("halted_early", False)),
        "global_loss": records[-1]["global_loss"] if records else None,
        "wall_clock_sec": meta.get("wall_clock_sec"),
    }
    if records:
        accs = records[-1]["per_client_accuracy"]
        weights = {str(r["client_id"]): r["weight"] for r in metric_rows}
        if all(v is not None for v in accs.values()):
            summary["global_accuracy"] = sum(
                weights[cid] * acc for cid, acc in accs.items()
            )
        else:
            summary["global_accuracy"] = None
        summary["mean_client_loss"] = sum(records[-1]["per_client_loss"].values()) / len(
            records[-1]["per_client_loss"]
        )
    test_accs = [r["accuracy"] for r in metric_rows if r["accuracy"] is not None]
    summary["mean_test_accuracy"] = (
        sum(test_accs) / len(test_accs) if test_accs else None
    )
    clusters = [r["cluster"] for r in metric_rows]
    truths = [r["true_cluster"] for r in metric_rows]
    if all(v is not None for v in clusters) and all(v is not None for v in truths) and clusters:
        summary["cluster_purity"] = cluster_purity(clusters, truths)
    for key in ("auc", "threshold", "target_fpr", "realized_fpr", "detection_rate"):
        if key in meta:
            summary[key] = meta[key]
    return summary


def write_report(output_dir: str | Path) -> str:
    """Build the summary, persist summary.json, and return the printable text."""
    out = Path(output_dir)
    summary = build_summary(out)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    width = max(len(k) for k in summary)
    lines = []
    for key, value in summary.items():
        if isinstance(value, float):
            shown = f"{value:.6f}"
        elif value is None:
            shown = "-"
        else:
            shown = str(value)
        lines.append(f"{key.replace('_', ' '):<{width + 2}}{shown}")
    return "\n".join(lines)

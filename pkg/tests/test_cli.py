import json
import subprocess
import sys
from pathlib import Path

import pytest

from fedbank.cli import main
from fedbank.datagen import load_csv
from fedbank.errors import ConfigError
from fedbank.experiment import resolve_config
from fedbank.personalization import load_personal_params


def _config(tmp_path, **overrides):
    cfg = {
        "federation": {
            "num_clients": 6,
            "num_clusters": 1,
            "samples_per_client": 80,
            "input_dim": 5,
            "num_classes": 2,
        },
        "model": {"kind": "logistic"},
        "strategy": "fedavg",
        "hyperparams": {"lr": 0.4, "local_epochs": 1, "batch_size": 32, "rounds": 5},
        "seed": 13,
        "output_dir": str(tmp_path / "out"),
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and key in cfg:
            cfg[key] = {**cfg[key], **value}
        else:
            cfg[key] = value
    tmp_path.mkdir(parents=True, exist_ok=True)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path, cfg


class TestRunCommand:
    def test_fedavg_writes_expected_files(self, tmp_path, capsys):
        path, cfg = _config(tmp_path)
        assert main(["run", str(path)]) == 0
        out = Path(cfg["output_dir"])
        assert (out / "config.json").exists()
        assert (out / "metrics.csv").exists()
        lines = (out / "rounds.jsonl").read_text().splitlines()
        assert len(lines) == 5
        for line in lines:
            payload = json.loads(line)
            assert set(payload) == {
                "round", "global_loss", "per_client_loss",
                "per_client_accuracy", "accesses_charged",
            }

    def test_same_seed_byte_identical(self, tmp_path):
        path_a, cfg_a = _config(tmp_path / "a")
        path_b, cfg_b = _config(tmp_path / "b")
        assert main(["run", str(path_a)]) == 0
        assert main(["run", str(path_b)]) == 0
        rounds_a = (Path(cfg_a["output_dir"]) / "rounds.jsonl").read_bytes()
        rounds_b = (Path(cfg_b["output_dir"]) / "rounds.jsonl").read_bytes()
        assert rounds_a == rounds_b

    def test_parallel_flag_is_byte_identical(self, tmp_path):
        path_a, cfg_a = _config(tmp_path / "a")
        path_b, cfg_b = _config(tmp_path / "b")
        assert main(["run", str(path_a)]) == 0
        assert main(["run", str(path_b), "--parallel"]) == 0
        assert (Path(cfg_a["output_dir"]) / "rounds.jsonl").read_bytes() == (
            Path(cfg_b["output_dir"]) / "rounds.jsonl"
        ).read_bytes()

    def test_replay_from_snapshot(self, tmp_path):
        path, cfg = _config(tmp_path)
        assert main(["run", str(path)]) == 0
        out = Path(cfg["output_dir"])
        original = (out / "rounds.jsonl").read_bytes()
        replay_dir = tmp_path / "replay"
        assert main([
            "run", str(out / "config.json"), "--output-dir", str(replay_dir)
        ]) == 0
        assert (replay_dir / "rounds.jsonl").read_bytes() == original

    def test_missing_required_hyperparam_exits_2(self, tmp_path, capsys):
        path, _ = _config(tmp_path, strategy="multicenter")
        assert main(["run", str(path)]) == 2
        err = capsys.readouterr().err
        assert "K" in err and "multicenter" in err

    def test_unknown_strategy_rejected_at_parse_time(self, tmp_path, capsys):
        path, _ = _config(tmp_path, strategy="quantum")
        assert main(["run", str(path)]) == 2
        assert "quantum" in capsys.readouterr().err

    def test_unknown_hyperparam_rejected(self, tmp_path, capsys):
        path, _ = _config(tmp_path, hyperparams={"warp": 9})
        assert main(["run", str(path)]) == 2
        assert "warp" in capsys.readouterr().err

    def test_missing_config_file_exits_2(self, tmp_path):
        assert main(["run", str(tmp_path / "nope.json")]) == 2

    def test_rounds_override(self, tmp_path):
        path, cfg = _config(tmp_path)
        assert main(["run", str(path), "--rounds", "2"]) == 0
        out = Path(cfg["output_dir"])
        assert len((out / "rounds.jsonl").read_text().splitlines()) == 2
        snapshot = json.loads((out / "config.json").read_text())
        assert snapshot["hyperparams"]["rounds"] == 2

    def test_seed_override_changes_results(self, tmp_path):
        path_a, cfg_a = _config(tmp_path / "a")
        path_b, cfg_b = _config(tmp_path / "b")
        assert main(["run", str(path_a)]) == 0
        assert main(["run", str(path_b), "--seed", "99"]) == 0
        assert (Path(cfg_a["output_dir"]) / "rounds.jsonl").read_bytes() != (
            Path(cfg_b["output_dir"]) / "rounds.jsonl"
        ).read_bytes()

    def test_budget_exhaustion_completes_gracefully(self, tmp_path, capsys):
        path, cfg = _config(tmp_path, hyperparams={"budgets": 2, "rounds": 6})
        assert main(["run", str(path)]) == 0
        out = Path(cfg["output_dir"])
        assert len((out / "rounds.jsonl").read_text().splitlines()) == 2
        meta = json.loads((out / "run_meta.json").read_text())
        assert meta["halted_early"] is True
        assert "exhausted" in meta["halted_reason"]
        assert "warning" in capsys.readouterr().err

    def test_cluster_strategy_writes_assignments(self, tmp_path):
        path, cfg = _config(
            tmp_path,
            strategy="multicenter",
            federation={"num_clusters": 2, "skew_kind": "label-swap"},
            hyperparams={"K": 2, "rounds": 8, "local_epochs": 2},
        )
        assert main(["run", str(path)]) == 0
        out = Path(cfg["output_dir"])
        lines = [json.loads(l) for l in (out / "assignments.jsonl").read_text().splitlines()]
        assert len(lines) == 8 * 6
        assert set(lines[0]) == {"round", "client_id", "cluster"}

    def test_personal_models_persisted(self, tmp_path):
        path, cfg = _config(
            tmp_path, strategy="proximal", hyperparams={"lambda": 0.5, "rounds": 3}
        )
        assert main(["run", str(path)]) == 0
        out = Path(cfg["output_dir"])
        files = sorted((out / "personal").glob("client_*.params"))
        assert len(files) == 6
        cid, rnd, params = load_personal_params(files[0])
        assert cid == 0 and rnd == 3 and params.size > 0

    def test_oneclass_writes_scores(self, tmp_path):
        path, cfg = _config(
            tmp_path,
            strategy="oneclass",
            federation={"anomaly_fraction": 0.15, "samples_per_client": 150,
                        "input_dim": 6},
            model={"kind": "autoencoder", "hidden_dims": [3, 2]},
            hyperparams={"lr": 0.05, "rounds": 8, "local_epochs": 2,
                         "target_fpr": 0.1},
        )
        assert main(["run", str(path)]) == 0
        out = Path(cfg["output_dir"])
        scores = (out / "scores.csv").read_text().splitlines()
        assert scores[0] == "example_index,score,label_pred,true_label"
        assert len(scores) > 1
        meta = json.loads((out / "run_meta.json").read_text())
        assert {"auc", "threshold", "realized_fpr", "target_fpr"} <= set(meta)

    def test_distill_writes_predictions(self, tmp_path):
        path, cfg = _config(
            tmp_path, strategy="distill",
            hyperparams={"lambda": 0.1, "rounds": 3, "batch_size": 16},
        )
        assert main(["run", str(path)]) == 0
        out = Path(cfg["output_dir"])
        header = (out / "predictions.csv").read_text().splitlines()[0]
        assert header == "round,model_id,example_index,p0,p1"

    def test_oneshot_runs_exactly_one_round(self, tmp_path):
        path, cfg = _config(
            tmp_path, strategy="oneshot", hyperparams={"k_select": 3, "rounds": 7}
        )
        assert main(["run", str(path)]) == 0
        out = Path(cfg["output_dir"])
        assert len((out / "rounds.jsonl").read_text().splitlines()) == 1
        snapshot = json.loads((out / "config.json").read_text())
        assert snapshot["hyperparams"]["rounds"] == 1


class TestReportCommand:
    def test_report_prints_summary_and_writes_json(self, tmp_path, capsys):
        path, cfg = _config(tmp_path)
        assert main(["run", str(path)]) == 0
        assert main(["report", cfg["output_dir"]]) == 0
        printed = capsys.readouterr().out
        assert "global loss" in printed
        summary = json.loads((Path(cfg["output_dir"]) / "summary.json").read_text())
        rounds = [
            json.loads(l)
            for l in (Path(cfg["output_dir"]) / "rounds.jsonl").read_text().splitlines()
        ]
        assert summary["global_loss"] == rounds[-1]["global_loss"]
        assert summary["rounds_completed"] == len(rounds)

    def test_report_missing_artifacts_exits_3(self, tmp_path):
        assert main(["report", str(tmp_path / "nothing")]) == 3

    def test_purity_reported_only_for_cluster_runs(self, tmp_path, capsys):
        path, cfg = _config(tmp_path)
        main(["run", str(path)])
        main(["report", cfg["output_dir"]])
        assert "cluster purity" not in capsys.readouterr().out

        path2, cfg2 = _config(
            tmp_path / "clustered",
            strategy="hypothesis",
            federation={"num_clusters": 2, "skew_kind": "label-swap"},
            hyperparams={"K": 2, "rounds": 8, "local_epochs": 2},
        )
        main(["run", str(path2)])
        main(["report", cfg2["output_dir"]])
        out = capsys.readouterr().out
        assert "cluster purity" in out
        summary = json.loads((Path(cfg2["output_dir"]) / "summary.json").read_text())
        assert summary["cluster_purity"] >= 0.9

    def test_purity_suppressed_without_true_clusters(self, tmp_path, capsys):
        path, cfg = _config(
            tmp_path,
            strategy="hypothesis",
            federation={"num_clusters": 2},
            hyperparams={"K": 2, "rounds": 3},
        )
        main(["run", str(path)])
        metrics_path = Path(cfg["output_dir"]) / "metrics.csv"
        rows = metrics_path.read_text().splitlines()
        header = rows[0].split(",")
        idx = header.index("true_cluster")
        stripped = [rows[0]]
        for row in rows[1:]:
            cells = row.split(",")
            cells[idx] = ""
            stripped.append(",".join(cells))
        metrics_path.write_text("\n".join(stripped) + "\n")
        main(["report", cfg["output_dir"]])
        assert "cluster purity" not in capsys.readouterr().out


class TestGenerateData:
    def test_writes_loadable_client_files(self, tmp_path):
        path, _ = _config(tmp_path)
        out = tmp_path / "data"
        assert main(["generate-data", str(path), str(out)]) == 0
        files = sorted(out.glob("client_*.csv"))
        assert len(files) == 6
        ds = load_csv(files[0])
        assert ds.client_id == 0 and len(ds) == 80
        meta = json.loads((out / "federation.json").read_text())
        assert meta["num_clients"] == 6
        assert (out / "public.csv").exists()

    def test_generation_is_deterministic(self, tmp_path):
        path, _ = _config(tmp_path)
        out_a, out_b = tmp_path / "da", tmp_path / "db"
        main(["generate-data", str(path), str(out_a)])
        main(["generate-data", str(path), str(out_b)])
        assert (out_a / "client_000.csv").read_bytes() == (out_b / "client_000.csv").read_bytes()


class TestResolveConfig:
    def test_resolved_snapshot_replays_identically(self, tmp_path):
        path, _ = _config(tmp_path)
        raw = json.loads(path.read_text())
        cfg = resolve_config(raw)
        again = resolve_config(cfg.resolved)
        assert again.resolved == cfg.resolved

    def test_strategy_required(self):
        with pytest.raises(ConfigError, match="strategy"):
            resolve_config({"federation": {"num_clients": 2}, "output_dir": "x"})

    def test_federation_required(self):
        with pytest.raises(ConfigError, match="federation"):
            resolve_config({"strategy": "fedavg", "output_dir": "x"})

    def test_error_names_nested_field(self):
        with pytest.raises(ConfigError, match="num_classes"):
            resolve_config(
                {
                    "federation": {"num_clients": 4, "num_classes": 1},
                    "strategy": "fedavg",
                    "output_dir": "x",
                }
            )

    def test_registry_only_for_distillation(self, tmp_path):
        path, _ = _config(tmp_path, registry=[{"kind": "logistic"}])
        with pytest.raises(ConfigError, match="registry"):
            resolve_config(json.loads(path.read_text()))


def test_module_entry_point(tmp_path):
    path, cfg = _config(tmp_path)
    proc = subprocess.run(
        [sys.executable, "-m", "fedbank.cli", "run", str(path)],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert Path(cfg["output_dir"], "rounds.jsonl").exists()

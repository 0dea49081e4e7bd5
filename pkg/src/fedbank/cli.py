"""Command-line interface: run experiments, report results, generate data.

Exit codes: 0 success, 2 configuration error, 3 missing artifacts.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .datagen import generate_federation, save_csv
from .errors import ConfigError, FedbankError
from .experiment import resolve_config, load_config, run_experiment, write_report


def _cmd_run(args: argparse.Namespace) -> int:
    bundle = run_experiment(
        args.config,
        seed_override=args.seed,
        rounds_override=args.rounds,
        output_override=args.output_dir,
        parallel=args.parallel,
    )
    out = bundle.config["output_dir"]
    if bundle.halted_reason:
        print(f"warning: simulation halted early: {bundle.halted_reason}", file=sys.stderr)
    print(f"completed {len(bundle.records)} round(s); artifacts in {out}")
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    try:
        text = write_report(args.output_dir)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    print(text)
    return 0


def _cmd_generate(args: argparse.Namespace) -> int:
    raw = load_config(args.config)
    cfg = resolve_config(raw, seed_override=args.seed, output_override=args.out_dir)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    clients, public = generate_federation(cfg.federation)
    for c in clients:
        save_csv(c, out / f"client_{c.client_id:03d}.csv")
    with open(out / "public.csv", "w") as fh:
        header = ["label"] + [f"f{j}" for j in range(public.X.shape[1])]
        fh.write(",".join(header) + "\n")
        for i in range(len(public)):
            row = [str(int(public.y[i]))] + [repr(float(v)) for v in public.X[i]]
            fh.write(",".join(row) + "\n")
    meta = {
        "num_clients": len(clients),
        "weights": {str(c.client_id): c.weight for c in clients},
        "true_clusters": {str(c.client_id): c.true_cluster for c in clients},
        "anomaly_rows": {str(c.client_id): int(c.anomaly_mask.sum()) for c in clients},
    }
    (out / "federation.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(clients)} client file(s) to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedbank",
        description="Deterministic federated-learning simulator on synthetic banking data.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run an experiment described by a JSON config")
    run_p.add_argument("config", help="path to the experiment config")
    run_p.add_argument("--seed", type=int, default=None, help="override the config seed")
    run_p.add_argument("--rounds", type=int, default=None, help="override the round count")
    run_p.add_argument("--output-dir", default=None, help="override the output directory")
    run_p.add_argument(
        "--parallel", action="store_true", help="run client updates in a thread pool"
    )
    run_p.set_defaults(func=_cmd_run)

    rep_p = sub.add_parser("report", help="summarize a finished run directory")
    rep_p.add_argument("output_dir")
    rep_p.set_defaults(func=_cmd_report)

    gen_p = sub.add_parser("generate-data", help="write a federation to CSV files")
    gen_p.add_argument("config")
    gen_p.add_argument("out_dir")
    gen_p.add_argument("--seed", type=int, default=None, help="override the config seed")
    gen_p.set_defaults(func=_cmd_generate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FedbankError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

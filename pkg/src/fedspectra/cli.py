"""Experiment runner CLI.

Subcommands:
  run       execute one experiment from a config file
  sweep     repeat the experiment over a list of client counts
  report    summarize a finished run directory
  gen-data  materialize the synthetic dataset to disk

Exit codes: 0 success, 1 runtime failure, 2 configuration/parse error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path
from typing import List, Optional

from . import __version__
from .config import RunConfig, apply_setting, load_config, serialize_config
from .datasynth import export_dataset, generate, load_dataset
from .errors import ConfigError, FedSpectraError
from .federation import run_experiment

PREFERRED_MODELS = ("personalized", "model", "deputy")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedspectra", description="Federated learning simulation engine"
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="path to key = value config")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="K=V",
            help="override a config key (repeatable)",
        )
        p.add_argument("--out", help="output directory (overrides out_dir)")
        p.add_argument("--seed", type=int, help="override the config seed")

    p_run = sub.add_parser("run", help="run one experiment")
    common(p_run)

    p_sweep = sub.add_parser("sweep", help="run the experiment per client count")
    common(p_sweep)
    p_sweep.add_argument(
        "--clients", required=True, help="comma-separated client counts, e.g. 4,8,16"
    )

    p_report = sub.add_parser("report", help="summarize a run directory")
    p_report.add_argument("run_dir", help="directory containing metrics.csv")

    p_gen = sub.add_parser("gen-data", help="materialize the synthetic dataset")
    common(p_gen)
    return parser


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config)
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects K=V, got {item!r}")
        key, raw = item.split("=", 1)
        apply_setting(cfg, key.strip(), raw, where="--set")
    if args.out is not None:
        cfg.out_dir = args.out
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    cfg.validate()
    return cfg


def _partitions_for(cfg: RunConfig):
    if cfg.dataset_dir:
        return load_dataset(cfg.dataset_dir)
    return generate(cfg.synth_spec())


def _execute_run(cfg: RunConfig, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    partitions = _partitions_for(cfg)
    reports = run_experiment(
        cfg.federation_config(), partitions, out_dir=out_dir, classes=cfg.classes
    )
    (out_dir / "resolved_config.txt").write_text(serialize_config(cfg))
    return reports


def cmd_run(args) -> int:
    cfg = _resolve(args)
    _execute_run(cfg, Path(cfg.out_dir))
    return 0


def _final_round_summary(reports) -> dict:
    """Mean test metrics of the preferred model at the final round."""
    records = reports[-1].records
    model = next(
        m for m in PREFERRED_MODELS if any(r.model == m for r in records)
    )
    rows = [r for r in records if r.model == model and r.split == "test"]
    mean = lambda key: sum(getattr(r, key) for r in rows) / len(rows)
    return {
        "model": model,
        "accuracy": mean("accuracy"),
        "macro_f1": mean("macro_f1"),
        "macro_auc": mean("macro_auc"),
    }


def cmd_sweep(args) -> int:
    base = _resolve(args)
    try:
        client_counts = [int(tok) for tok in args.clients.split(",") if tok.strip()]
    except ValueError:
        raise ConfigError(f"--clients expects integers, got {args.clients!r}")
    if not client_counts or any(n < 1 for n in client_counts):
        raise ConfigError("--clients needs positive integers")

    sweep_dir = Path(base.out_dir)
    sweep_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for n in client_counts:
        cfg = load_config(args.config)
        for item in args.overrides:
            key, raw = item.split("=", 1)
            apply_setting(cfg, key.strip(), raw, where="--set")
        if getattr(args, "seed", None) is not None:
            cfg.seed = args.seed
        cfg.num_clients = n
        cfg.out_dir = str(sweep_dir / f"n{n}")
        cfg.validate()
        reports = _execute_run(cfg, Path(cfg.out_dir))
        summary = _final_round_summary(reports)
        rows.append(
            [
                str(n),
                cfg.aggregator,
                "true" if cfg.cto_enabled else "false",
                f"{summary['accuracy']:.12g}",
                f"{summary['macro_f1']:.12g}",
                f"{summary['macro_auc']:.12g}",
            ]
        )
    with open(sweep_dir / "sweep.csv", "w", newline="\n") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(
            ["n_clients", "aggregator", "cto_enabled", "accuracy", "macro_f1", "macro_auc"]
        )
        writer.writerows(rows)
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    path = run_dir / "metrics.csv"
    if not path.exists():
        print(f"error: {path} not found", file=sys.stderr)
        return 1
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        rows = list(reader)
    if not rows:
        print("error: no evaluation rows in metrics.csv", file=sys.stderr)
        return 1
    final_round = max(int(r["round"]) for r in rows)
    model = next(
        m
        for m in PREFERRED_MODELS
        if any(r["model"] == m for r in rows)
    )
    selected = [
        r
        for r in rows
        if int(r["round"]) == final_round and r["model"] == model and r["split"] == "test"
    ]
    if not selected:
        print("error: no final-round test rows", file=sys.stderr)
        return 1

    keys = ("accuracy", "macro_f1", "macro_auc")
    clients = {}
    for r in sorted(selected, key=lambda r: int(r["client_id"])):
        clients[r["client_id"]] = {k: float(r[k]) for k in keys}
    avg = {
        k: sum(v[k] for v in clients.values()) / len(clients) for k in keys
    }

    header = f"{'client':>8} {'accuracy':>10} {'macro_f1':>10} {'macro_auc':>10}"
    print(f"final round {final_round}, model={model}, split=test")
    print(header)
    for cid, vals in clients.items():
        print(
            f"{cid:>8} {vals['accuracy']:>10.4f} {vals['macro_f1']:>10.4f} "
            f"{vals['macro_auc']:>10.4f}"
        )
    print(
        f"{'Avg':>8} {avg['accuracy']:>10.4f} {avg['macro_f1']:>10.4f} "
        f"{avg['macro_auc']:>10.4f}"
    )
    summary = {
        "round": final_round,
        "model": model,
        "split": "test",
        "clients": clients,
        "avg": avg,
    }
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return 0


def cmd_gen_data(args) -> int:
    cfg = _resolve(args)
    partitions = generate(cfg.synth_spec())
    export_dataset(partitions, Path(cfg.out_dir))
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "run": cmd_run,
        "sweep": cmd_sweep,
        "report": cmd_report,
        "gen-data": cmd_gen_data,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FedSpectraError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

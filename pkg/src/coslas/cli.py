"""Command-line front end: ``coslas --config scenario.yaml --mode coslas``.

Writes ``metrics_<mode>.csv`` (and with ``--dump-trace`` also
``trace_<mode>.ndjson``) into the output directory. Exit codes: 0 success,
2 configuration or usage error, 1 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import csv
import json
import os
import sys

from .config import MODES, ConfigError, ScenarioConfig, load_config, validate
from .messages import NumericalError
from . import simulator as sim

CSV_HEADER = ["n", "q", "rmse_p_m", "rmse_pdot_mps", "rmse_beta_us", "rmse_alpha_ppm",
              "mode", "runs", "seed"]

# flag -> config field
FLAG_FIELDS = {"mode": "mode", "runs": "runs", "seed": "seed", "iterations": "Q",
               "steps": "steps", "out": "out", "per_iteration_metrics": "per_iteration_metrics",
               "dump_trace": "dump_trace"}


def _fmt(v: float) -> str:
    return format(v, ".10g")


def emit_metrics_csv(metrics: sim.Metrics, path) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for n, q, p, pd, b, a in metrics.rows:
            w.writerow([n, q, _fmt(p), _fmt(pd), _fmt(b), _fmt(a),
                        metrics.mode, metrics.runs, metrics.seed])


def emit_trace(records, path) -> None:
    with open(path, "w", newline="\n", encoding="ascii") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="coslas",
        description="Simulate cooperative localization and synchronization of mobile "
                    "agents and report RMSE metrics. Flags override the config file.")
    p.add_argument("--config", metavar="PATH", help="YAML scenario file (defaults: built-in scenario)")
    p.add_argument("--mode", choices=MODES, help="estimator variant (config: mode)")
    p.add_argument("--runs", type=int, metavar="R", help="number of Monte-Carlo runs (config: runs)")
    p.add_argument("--seed", type=int, metavar="S", help="master seed (config: seed)")
    p.add_argument("--iterations", type=int, metavar="Q",
                   help="message passing iterations per step (config: Q)")
    p.add_argument("--steps", type=int, metavar="N", help="number of time steps (config: steps)")
    p.add_argument("--out", metavar="DIR", help="output directory (config: out)")
    p.add_argument("--per-iteration-metrics", action="store_true", default=None,
                   help="report metrics after every iteration (config: per_iteration_metrics)")
    p.add_argument("--dump-trace", action="store_true", default=None,
                   help="write a per-run, per-step, per-agent trace (config: dump_trace)")
    return p


def resolve_config(args) -> ScenarioConfig:
    cfg = load_config(args.config) if args.config else ScenarioConfig()
    overrides = {field: getattr(args, flag) for flag, field in FLAG_FIELDS.items()
                 if getattr(args, flag) is not None}
    return validate(dataclasses.replace(cfg, **overrides))


def run(cfg: ScenarioConfig, workers: int | None = None) -> sim.Metrics:
    truth, traces = sim.run_scenario(cfg, cfg.mode, workers)
    for t in traces:
        if t.payload_max.max() > sim.MAX_PAYLOAD:
            raise NumericalError(f"comm_payload: {t.payload_max.max()} reals exceed the limit")
    metrics = sim.compute_metrics(cfg, truth, traces, cfg.mode)
    os.makedirs(cfg.out, exist_ok=True)
    emit_metrics_csv(metrics, os.path.join(cfg.out, f"metrics_{cfg.mode}.csv"))
    if cfg.dump_trace:
        emit_trace(sim.trace_records(cfg, truth, traces),
                   os.path.join(cfg.out, f"trace_{cfg.mode}.ndjson"))
    return metrics


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve_config(args)
        workers = sim.worker_count()
    except (ConfigError, ValueError) as exc:
        print(f"coslas: config error: {exc}", file=sys.stderr)
        return 2
    try:
        run(cfg, workers)
    except NumericalError as exc:
        print(f"coslas: numerical failure: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"coslas: cannot write output: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

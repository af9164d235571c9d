"""Command-line front end.

    fedbens run CONFIG [--out DIR] [--threads N]
    fedbens sweep CONFIG --axis {mixtures,temperature,prior_var,hessian,alpha} [--values v1,v2,...]
    fedbens inspect-partition CONFIG [--seed S]

Exit codes: 0 success, 1 runtime failure, 2 invalid config or arguments.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config, load_datasets, model_spec
from .data import holdout_server_validation
from .federation import _STREAM_HOLDOUT, RunReport, run_fedbens, split_clients, stream_int

log = logging.getLogger("fedbens")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

METRICS_HEADER = ["seed", "method", "accuracy", "bytes_sent", "seconds"]
SWEEP_HEADER = ["value", "seed", "method", "accuracy"]
PARTITION_HEADER = ["client", "class", "count"]

SWEEP_AXES = {
    "mixtures": ("n_mixtures", int, "1,2,3,4,5"),
    "temperature": ("temperature", float, "0.01,0.1,1,10"),
    "prior_var": ("prior_var", float, "0.01,0.1,1,10"),
    "hessian": ("hessian", str, "diagonal,diag_last_full,kronecker"),
    "alpha": ("alpha", float, "0.05,0.4"),
}


def _fmt(x: float) -> str:
    return repr(float(x))


def write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def report_rows(report: RunReport, record_timing: bool) -> list[list]:
    """metrics.csv rows for one seed: FedBEns ensemble, its weakest/strongest member, baselines."""
    seconds = _fmt(report.seconds["total"]) if record_timing else "nan"
    fb_bytes = report.bytes_sent["fedbens"]
    rows = [
        [report.seed, "fedbens", _fmt(report.ensemble_accuracy), fb_bytes, seconds],
        [report.seed, "fedbens_component_max", _fmt(report.component_max), fb_bytes, seconds],
        [report.seed, "fedbens_component_min", _fmt(report.component_min), fb_bytes, seconds],
    ]
    for name, acc in report.baseline_accuracies.items():
        rows.append([report.seed, name, _fmt(acc), report.bytes_sent[name], seconds])
    return sorted(rows, key=lambda r: (r[0], r[1]))


def aggregate(reports: Sequence[RunReport]) -> dict[str, dict[str, float]]:
    """Mean and population std over seeds per method (std is 0 for a single seed)."""
    per_method: dict[str, list[float]] = {}
    for r in reports:
        per_method.setdefault("fedbens", []).append(r.ensemble_accuracy)
        per_method.setdefault("fedbens_component_min", []).append(r.component_min)
        per_method.setdefault("fedbens_component_max", []).append(r.component_max)
        for name, acc in r.baseline_accuracies.items():
            per_method.setdefault(name, []).append(acc)
    return {m: {"mean": float(np.mean(v)), "std": float(np.std(v)), "n_seeds": len(v)} for m, v in sorted(per_method.items())}


def run_experiment(cfg: ExperimentConfig, threads: int = 1, base_dir: Path | None = None) -> list[RunReport]:
    train, test = load_datasets(cfg, base_dir)
    spec = model_spec(cfg, train)
    return [
        run_fedbens(train, test, spec, cfg.fed_config(seed, threads), baselines=cfg.baseline_names())
        for seed in sorted(cfg.seeds)
    ]


def cmd_run(cfg: ExperimentConfig, out: Path, threads: int, base_dir: Path | None) -> int:
    reports = run_experiment(cfg, threads, base_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [row for r in reports for row in report_rows(r, cfg.output.record_timing)]
    write_csv(out / "metrics.csv", METRICS_HEADER, rows)
    doc = {
        "config": cfg.model_dump(),
        "runs": [r.to_dict() for r in reports],
        "aggregate": aggregate(reports),
    }
    (out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    for method, stats in doc["aggregate"].items():
        print(f"{method:24s} {100 * stats['mean']:6.2f} +- {100 * stats['std']:.2f}")
    return EXIT_OK


def parse_values(axis: str, values: str | None) -> list:
    _, kind, default = SWEEP_AXES[axis]
    raw = [v.strip() for v in (values or default).split(",") if v.strip()]
    if not raw:
        raise ConfigError("--values is empty")
    try:
        return [kind(v) for v in raw]
    except ValueError as exc:
        raise ConfigError(f"bad value for axis {axis}: {exc}") from exc


def cmd_sweep(cfg: ExperimentConfig, axis: str, values: list, out: Path, threads: int, base_dir: Path | None) -> int:
    field = SWEEP_AXES[axis][0]
    rows = []
    for value in values:
        data = cfg.model_dump()
        data["federation"][field] = value
        try:
            variant = ExperimentConfig.model_validate(data)
        except Exception as exc:
            raise ConfigError(f"{axis}={value}: {exc}") from exc
        for r in run_experiment(variant, threads, base_dir):
            for seed, method, acc, _, _ in report_rows(r, False):
                rows.append([str(value), seed, method, acc])
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / f"sweep_{axis}.csv", SWEEP_HEADER, rows)
    return EXIT_OK


def cmd_inspect_partition(cfg: ExperimentConfig, out: Path, seed: int | None, base_dir: Path | None) -> int:
    """Per-client class histogram of the training split a ``run`` with this seed would use."""
    train, _ = load_datasets(cfg, base_dir)
    fed = cfg.fed_config(cfg.seeds[0] if seed is None else seed)
    train, _ = holdout_server_validation(train, fed.n_val, stream_int(fed.seed, _STREAM_HOLDOUT))
    rows = []
    for c, part in enumerate(split_clients(train, fed)):
        for k, n in enumerate(part.class_counts()):
            rows.append([c, k, int(n)])
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "partition.csv", PARTITION_HEADER, rows)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedbens", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("config")
        sp.add_argument("--out", default=None, help="output directory (overrides output.dir)")
        sp.add_argument("--threads", type=int, default=1, help="clients trained concurrently")

    common(sub.add_parser("run", help="run every configured seed"))
    sw = sub.add_parser("sweep", help="vary one hyperparameter")
    common(sw)
    sw.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    sw.add_argument("--values", default=None, help="comma-separated values (default: a standard grid)")
    ip = sub.add_parser("inspect-partition", help="write the per-client class histogram")
    common(ip)
    ip.add_argument("--seed", type=int, default=None)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        out = Path(args.out or cfg.output.dir)
        base_dir = Path(args.config).resolve().parent
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        if args.command == "run":
            return cmd_run(cfg, out, args.threads, base_dir)
        if args.command == "sweep":
            return cmd_sweep(cfg, args.axis, parse_values(args.axis, args.values), out, args.threads, base_dir)
        return cmd_inspect_partition(cfg, out, args.seed, base_dir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - top-level boundary maps everything else to exit 1
        log.debug("run failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""Experiment drivers and report output.

A report is a plain dict so it serialises to JSON without custom encoders::

    {"protocol": ..., "cells": [cell, ...], "comparison": [row, ...]}

where every cell holds its config, config fingerprint, one record per seed
(final metrics, per-eval trajectory, mask-churn statistics) and mean/max/std
aggregates over seeds.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from pathlib import Path

import numpy as np

from .config import ConfigError, TrainConfig
from .selection import dump_mask
from .train import SeedResult, build_datasets, run_seed

log = logging.getLogger(__name__)

PROTOCOLS = ("noise", "imbalance", "low-resource", "ablation", "dropout-sweep", "doubled-batch")
NOISE_LEVELS = (0.05, 0.10, 0.15)
REDUCTION_RATIOS = (0.7, 0.6, 0.5)
LOW_RESOURCE_SIZES = (500, 1000)
DROPOUT_KEEP = (0.95, 0.90)


class ReportError(RuntimeError):
    pass


def _variants(base: TrainConfig) -> dict[str, dict]:
    k = max(base.k, 2)
    return {
        "vanilla": {"strategy": "full-net", "k": 1},
        "child-tuning-d": {"strategy": "static-fisher", "k": 1},
        "dps": {"strategy": "dynamic-fisher", "k": 1},
        "g_avg": {"strategy": "gavg-only", "k": k},
        "g_avg+RSS": {"strategy": "random-subnet", "k": k},
        "g_avg+scaling": {"strategy": "bidrop-scaling-only", "k": k},
        "g_avg+perturbation": {"strategy": "bidrop-perturbation-only", "k": k},
        "bidrop-full": {"strategy": "bidrop-full", "k": k},
    }


ABLATION_ROWS = ("vanilla", "g_avg", "g_avg+RSS", "g_avg+scaling", "g_avg+perturbation", "bidrop-full")


def protocol_cells(protocol: str, base: TrainConfig) -> list[tuple[str, dict, TrainConfig]]:
    """Expand ``base`` over a protocol grid as ``(cell name, grid values, config)``."""
    variants = _variants(base)
    cells = []

    def add(label, grid, **changes):
        cells.append((label, grid, base.override(name=label, **changes)))

    if protocol == "noise":
        for ratio in NOISE_LEVELS:
            for method in ("vanilla", "child-tuning-d", "bidrop-full"):
                add(f"noise={ratio}/{method}", {"label_noise": ratio, "method": method},
                    label_noise=ratio, **variants[method])
    elif protocol == "imbalance":
        for ratio in REDUCTION_RATIOS:
            for method in ("vanilla", "child-tuning-d", "bidrop-full"):
                add(f"imbalance={ratio}/{method}", {"imbalance": ratio, "method": method},
                    imbalance=ratio, **variants[method])
    elif protocol == "low-resource":
        for size in LOW_RESOURCE_SIZES:
            for method in ("vanilla", "child-tuning-d", "dps", "bidrop-full"):
                add(f"size={size}/{method}", {"subsample": size, "method": method},
                    subsample=size, **variants[method])
    elif protocol == "ablation":
        for method in ABLATION_ROWS:
            add(method, {"method": method}, **variants[method])
    elif protocol == "dropout-sweep":
        for keep in DROPOUT_KEEP:
            rate = round(1.0 - keep, 10)
            add(f"dropout={rate}/bidrop-full", {"dropout_rate": rate, "method": "bidrop-full"},
                keep_prob=keep, **variants["bidrop-full"])
    elif protocol == "doubled-batch":
        add("vanilla", {"method": "vanilla", "batch": "B"}, double_batch=False, **variants["vanilla"])
        add("vanilla-double-batch", {"method": "vanilla", "batch": "2B"}, double_batch=True, **variants["vanilla"])
        add("bidrop-repeated-batch", {"method": "bidrop-full", "batch": "B x k"}, double_batch=False,
            **variants["bidrop-full"])
    else:
        raise ConfigError(f"unknown protocol {protocol!r}; expected one of {', '.join(PROTOCOLS)}")
    return cells


def primary_metric(protocol: str, config: TrainConfig) -> str:
    if config.loss == "mean-squared-error":
        return "mse"
    if protocol == "imbalance":
        return "minority_accuracy"
    return "accuracy"


def _seed_record(result: SeedResult) -> dict:
    churn = result.churn
    return {
        "seed": result.seed,
        "steps": result.steps,
        "final": result.final,
        "trajectory": result.trajectory,
        "final_train_loss": result.losses[-1],
        "mask_churn": {
            "mean": float(np.mean(churn)) if churn else 0.0,
            "max": float(np.max(churn)) if churn else 0.0,
            "nonzero_fraction": float(np.mean(np.asarray(churn) > 0)) if churn else 0.0,
        },
        "selected_count": {"min": int(min(result.selected_counts)), "max": int(max(result.selected_counts))},
        "warnings": result.warnings,
    }


def aggregate(seed_records: list[dict]) -> dict:
    """Mean, max and population std over seeds of every final metric."""
    names = sorted({name for rec in seed_records for name in rec["final"]})
    out = {}
    for name in names:
        values = np.array([rec["final"][name] for rec in seed_records if name in rec["final"]], dtype=float)
        out[name] = {"mean": float(values.mean()), "max": float(values.max()), "std": float(values.std())}
    return out


def run_cell(config: TrainConfig, name: str | None = None, base_dir=None, mask_dir=None, grid=None) -> dict:
    train, dev = build_datasets(config, base_dir)
    records = []
    for seed in config.seed_list():
        result = run_seed(config, train, dev, seed)
        records.append(_seed_record(result))
        if mask_dir is not None and result.final_mask is not None:
            mask_dir.mkdir(parents=True, exist_ok=True)
            label = (name or config.name).replace("/", "_")
            dump_mask(result.final_mask, mask_dir / f"{label}.seed{seed}.mask")
        log.info("%s seed %d: %s", name or config.name, seed, records[-1]["final"])
    return {
        "cell": name or config.name,
        "grid": grid or {},
        "config": config.to_dict(),
        "fingerprint": config.fingerprint(),
        "train_size": len(train),
        "seeds": records,
        "aggregates": aggregate(records),
    }


def _comparison(protocol: str, cells: list[dict], base: TrainConfig) -> list[dict]:
    metric = primary_metric(protocol, base)
    rows = []
    for cell in cells:
        agg = cell["aggregates"].get(metric, {})
        rows.append({"cell": cell["cell"], **cell["grid"], "metric": metric,
                     "mean": agg.get("mean"), "max": agg.get("max"), "std": agg.get("std")})
    return rows


def run_experiment(config: TrainConfig, base_dir=None, mask_dir=None) -> dict:
    cell = run_cell(config, base_dir=base_dir, mask_dir=mask_dir)
    return {"protocol": "run", "cells": [cell], "comparison": _comparison("run", [cell], config)}


def run_protocol(protocol: str, base: TrainConfig, base_dir=None, mask_dir=None) -> dict:
    cells_spec = protocol_cells(protocol, base)
    if protocol == "low-resource":
        train, _ = build_datasets(base.override(subsample=0), base_dir)
        if len(train) < max(LOW_RESOURCE_SIZES):
            raise ConfigError(
                f"low-resource protocol needs at least {max(LOW_RESOURCE_SIZES)} training rows, "
                f"base config yields {len(train)}"
            )
    cells = [run_cell(cfg, name, base_dir, mask_dir, grid) for name, grid, cfg in cells_spec]
    report = {
        "protocol": protocol,
        "base_fingerprint": base.fingerprint(),
        "cells": cells,
        "comparison": _comparison(protocol, cells, base),
    }
    if protocol in ("noise", "imbalance", "low-resource"):
        report["gaps"] = _gaps(report["comparison"])
    return report


def _gaps(rows: list[dict]) -> list[dict]:
    """Signed ``method - vanilla`` gap of the mean metric within each grid level."""
    by_level: dict = {}
    for row in rows:
        level = tuple((k, v) for k, v in row.items() if k not in ("cell", "method", "metric", "mean", "max", "std"))
        by_level.setdefault(level, {})[row["method"]] = row["mean"]
    gaps = []
    for level, methods in by_level.items():
        ref = methods.get("vanilla")
        for method, value in methods.items():
            if method != "vanilla" and ref is not None:
                gaps.append({**dict(level), "method": method, "gap_vs_vanilla": value - ref})
    return gaps


# -- output --------------------------------------------------------------------


def report_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2, allow_nan=False) + "\n"


def report_rows(report: dict) -> list[dict]:
    rows = []
    for cell in report["cells"]:
        for rec in cell["seeds"]:
            row = {"cell": cell["cell"], "strategy": cell["config"]["strategy"], "k": cell["config"]["k"],
                   "seed": rec["seed"], "steps": rec["steps"]}
            row.update({f"grid.{k}": v for k, v in sorted(cell["grid"].items())})
            row.update(rec["final"])
            row["mask_churn_mean"] = rec["mask_churn"]["mean"]
            rows.append(row)
    return rows


def report_csv(report: dict) -> str:
    rows = report_rows(report)
    columns: list[str] = []
    for row in rows:
        for key in row:
            if key not in columns:
                columns.append(key)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(v) for k, v in row.items()})
    return buf.getvalue()


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return value


def emit_report(report: dict, out_dir) -> tuple[Path, Path]:
    """Write ``report.json`` and ``report.csv`` into ``out_dir``."""
    if not report.get("cells") or not any(cell["seeds"] for cell in report["cells"]):
        raise ReportError("refusing to write a report without any metric records")
    for cell in report["cells"]:
        for rec in cell["seeds"]:
            if not rec["final"] or not all(math.isfinite(v) for v in rec["final"].values()):
                raise ReportError(f"cell {cell['cell']!r} seed {rec['seed']} has missing or non-finite metrics")
    out_dir = Path(out_dir)
    json_path = out_dir / "report.json"
    csv_path = out_dir / "report.csv"
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        json_path.write_text(report_json(report), encoding="utf-8")
        csv_path.write_text(report_csv(report), encoding="utf-8")
    except OSError as exc:
        raise ReportError(f"cannot write report to {exc.filename or out_dir}: {exc.strerror or exc}") from exc
    return json_path, csv_path


def format_comparison(report: dict) -> str:
    lines = [f"protocol: {report['protocol']}"]
    for row in report["comparison"]:
        mean = row["mean"]
        std = row["std"]
        text = "n/a" if mean is None else f"{mean:.4f} (max {row['max']:.4f}, std {std:.4f})"
        lines.append(f"  {row['cell']:<40} {row['metric']}: {text}")
    for gap in report.get("gaps", []):
        level = ", ".join(f"{k}={v}" for k, v in gap.items() if k not in ("method", "gap_vs_vanilla"))
        lines.append(f"  gap {gap['method']} - vanilla [{level}]: {gap['gap_vs_vanilla']:+.4f}")
    return "\n".join(lines)

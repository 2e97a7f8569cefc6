"""Experiment grids over modes, configs and seeds, with cached cells."""
from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .dataset import load_snapshots, synthetic_growing_kg
from .kg import GrowingKG
from .training import FASTKGE, MODES, RunReport, TrainingConfig, run_continual

logger = logging.getLogger(__name__)

# value ranges used for the published experiments; anything else is flagged "extended"
SETTINGS_RANGES = {
    "r_base": (10, 50, 100, 150, 200),
    "num_layers": (2, 5, 10, 20),
    "learning_rate": (0.1, 0.2, 0.3),
    "batch_size": (256, 512, 1024),
}
SWEEP_DIMENSIONS = ("r_base", "num_layers", "scorer")
METRICS = ("mrr", "hits1", "hits3", "hits10")


@dataclass
class ExperimentPlan:
    datasets: list
    modes: list = field(default_factory=lambda: list(MODES))
    grid: dict = field(default_factory=dict)
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    out_dir: str = "bench_out"
    base: dict = field(default_factory=dict)
    setting: str = "raw"

    def __post_init__(self):
        if not self.modes or not self.seeds or not self.datasets:
            raise ValueError("a plan needs at least one dataset, mode and seed")
        bad = [m for m in self.modes if m not in MODES]
        if bad:
            raise ValueError(f"unknown modes {bad}")

    @property
    def extended(self) -> dict:
        """Grid values outside the published ranges."""
        out = {}
        for key, values in self.grid.items():
            allowed = SETTINGS_RANGES.get(key)
            if allowed is not None:
                extra = [v for v in values if v not in allowed]
                if extra:
                    out[key] = extra
        return out

    def configs(self) -> list[dict]:
        keys = sorted(self.grid)
        return [dict(zip(keys, combo)) for combo in itertools.product(*(self.grid[k] for k in keys))]

    @classmethod
    def from_json(cls, path) -> "ExperimentPlan":
        data = json.loads(Path(path).read_text())
        return cls(**data)


def _dataset_label(ds) -> str:
    if isinstance(ds, dict):
        return ds.get("name") or "synthetic:" + json.dumps(ds.get("synthetic", {}), sort_keys=True)
    return str(ds)


def _dataset_fingerprint(ds) -> str:
    h = hashlib.sha256()
    if isinstance(ds, dict):
        h.update(json.dumps(ds, sort_keys=True).encode())
        return h.hexdigest()
    root = Path(ds)
    manifest = root / "stats.json"
    files = [manifest] if manifest.exists() else sorted(p for p in root.rglob("*.txt"))
    for p in files:
        h.update(str(p.relative_to(root)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def _load(ds) -> GrowingKG:
    if isinstance(ds, dict):
        return synthetic_growing_kg(**ds.get("synthetic", {}))
    return load_snapshots(ds)


def cell_key(fingerprint: str, config: dict, seed: int, mode: str) -> str:
    payload = json.dumps({"data": fingerprint, "config": config, "seed": seed, "mode": mode},
                         sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:24]


@dataclass
class ComparisonTable:
    rows: list
    comparisons: list
    cells: list
    sweeps: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"rows": self.rows, "comparisons": self.comparisons, "cells": self.cells,
                "sweeps": self.sweeps}

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "table.json").write_text(json.dumps(self.to_dict(), indent=2))
        if not self.rows:
            (out / "table.csv").write_text("")
            return
        fields = list(self.rows[0])
        with open(out / "table.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields)
            w.writeheader()
            for row in self.rows:
                w.writerow({k: json.dumps(v) if isinstance(v, (dict, list)) else v
                            for k, v in row.items()})


def _summarize(report: RunReport) -> dict:
    fin = report.final
    out = {m: fin.average[m] if fin else float("nan") for m in METRICS}
    out["old_mrr"] = fin.per_snapshot[0]["mrr"] if fin else float("nan")
    out["total_train_seconds"] = report.total_train_seconds
    out["incremental_train_seconds"] = report.incremental_train_seconds
    out["incremental_params"] = int(sum(s.trainable_params for s in report.train_stats if s.snapshot > 0))
    return out


def aggregate(cells: list, sweeps: dict | None = None) -> ComparisonTable:
    """Mean of each metric over seeds per (dataset, mode, config); FastKGE vs ablations."""
    groups: dict[tuple, list] = {}
    failures: dict[tuple, int] = {}
    for c in cells:
        key = (c["dataset"], c["mode"], json.dumps(c["config"], sort_keys=True))
        if c.get("error"):
            failures[key] = failures.get(key, 0) + 1
            groups.setdefault(key, [])
            continue
        groups.setdefault(key, []).append(c["summary"])
    rows = []
    for (ds, mode, cfg), summaries in sorted(groups.items()):
        row: dict[str, Any] = {"dataset": ds, "mode": mode, "config": json.loads(cfg),
                               "seeds": len(summaries), "failures": failures.get((ds, mode, cfg), 0)}
        for k in (*METRICS, "old_mrr", "total_train_seconds", "incremental_train_seconds",
                  "incremental_params"):
            vals = [s[k] for s in summaries]
            row[k] = float(np.mean(vals)) if vals else float("nan")
        rows.append(row)

    comparisons = []
    index = {(r["dataset"], r["mode"], json.dumps(r["config"], sort_keys=True)): r for r in rows}
    for (ds, mode, cfg), fast in index.items():
        if mode != FASTKGE:
            continue
        for other in MODES:
            base = index.get((ds, other, cfg))
            if other == FASTKGE or base is None:
                continue
            t_fast, t_base = fast["total_train_seconds"], base["total_train_seconds"]
            comparisons.append({
                "dataset": ds, "config": fast["config"], "baseline": other,
                "time_saving": time_saving(t_fast, t_base),
                "mrr_delta": fast["mrr"] - base["mrr"],
                "old_mrr_delta": fast["old_mrr"] - base["old_mrr"],
            })
    return ComparisonTable(rows, comparisons, cells, dict(sweeps or {}))


def time_saving(t_fast: float, t_base: float) -> float:
    """Fraction of the baseline's training time saved."""
    return 1.0 - t_fast / t_base if t_base > 0 else float("nan")


def run_plan(plan: ExperimentPlan, out_dir=None) -> ComparisonTable:
    out = Path(out_dir or plan.out_dir)
    cache = out / "cells"
    cache.mkdir(parents=True, exist_ok=True)
    if plan.extended:
        logger.warning("grid values outside the published ranges: %s", plan.extended)

    cells = []
    for ds in plan.datasets:
        label, fp = _dataset_label(ds), _dataset_fingerprint(ds)
        kg = None
        for config, mode, seed in itertools.product(plan.configs(), plan.modes, plan.seeds):
            full = {**plan.base, **config, "mode": mode, "seed": seed}
            key = cell_key(fp, {**plan.base, **config}, seed, mode)
            path = cache / f"{key}.json"
            cell = {"dataset": label, "mode": mode, "config": config, "seed": seed, "key": key}
            if path.exists():
                cells.append(json.loads(path.read_text()))
                continue
            try:
                if kg is None:
                    kg = _load(ds)
                report = run_continual(kg, TrainingConfig(**full), setting=plan.setting)
                cell["summary"] = _summarize(report)
                cell["report"] = report.to_dict()
            except Exception as exc:  # a failed cell must not sink the grid
                logger.error("cell %s failed: %s", key, exc)
                cell["error"] = f"{type(exc).__name__}: {exc}"
                cell["traceback"] = traceback.format_exc()
                cells.append(cell)
                continue
            path.write_text(json.dumps(cell, indent=2))
            cells.append(cell)

    sweeps = {k: list(plan.grid[k]) for k in SWEEP_DIMENSIONS if k in plan.grid}
    table = aggregate(cells, sweeps)
    table.write(out)
    emit_plots(table, out / "plots")
    return table


def emit_plots(table: ComparisonTable, out_dir) -> list[Path]:
    """One CSV per sweep dimension: ``dataset, mode, x, mrr, params, seconds``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    header = ["dataset", "mode", "x", "mrr", "incremental_params", "total_train_seconds"]
    for dim in SWEEP_DIMENSIONS:
        path = out / f"mrr_vs_{dim}.csv"
        values = table.sweeps.get(dim, [])
        series: dict[tuple, list] = {}
        for row in table.rows:
            x = row["config"].get(dim)
            if x is None or x not in values:
                continue
            series.setdefault((row["dataset"], row["mode"], x), []).append(row)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for (ds, mode, x), rows in sorted(series.items(), key=lambda kv: (kv[0][0], kv[0][1], values.index(kv[0][2]))):
                w.writerow([ds, mode, x,
                            float(np.mean([r["mrr"] for r in rows])),
                            float(np.mean([r["incremental_params"] for r in rows])),
                            float(np.mean([r["total_train_seconds"] for r in rows]))])
        written.append(path)
    return written

"""Cartesian sweeps, the ablation grid, and the results table.

``results.csv`` holds one row per (config, seed) cell.  Rows are appended
under a lock by rewriting the file through a temporary and renaming it,
so an interrupted sweep never leaves a torn table.  Re-running a sweep
skips cells already present with a non-failed status.
"""
from __future__ import annotations

import csv
import io
import itertools
import threading
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import yaml

from .backbone import VARIANTS
from .config import SECTIONS, ExperimentConfig
from .container import atomic_write_bytes
from .errors import ConfigError
from .experiment import SUMMARY_COLUMNS, axis_label, run_experiment

RESULT_COLUMNS = ["name"] + SUMMARY_COLUMNS
RESULTS_FILE = "results.csv"


@dataclass
class SweepSpec:
    """``base`` config document, axes ``{"section.key": [values]}``, variants, seeds."""

    base: dict
    axes: dict[str, list] = field(default_factory=dict)
    variants: list[str] = field(default_factory=lambda: list(VARIANTS))
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])

    @classmethod
    def from_dict(cls, doc: dict) -> "SweepSpec":
        allowed = {"base", "axes", "variants", "seeds"}
        for key in doc:
            if key not in allowed:
                raise ConfigError(f"unknown sweep key {key!r}", key=key)
        if "base" not in doc:
            raise ConfigError("sweep needs a base config", key="base")
        spec = cls(base=doc["base"], axes=doc.get("axes") or {},
                   variants=list(doc.get("variants") or VARIANTS),
                   seeds=list(doc.get("seeds") if doc.get("seeds") is not None else [0, 1, 2]))
        for axis, values in spec.axes.items():
            section, _, key = axis.partition(".")
            if section not in SECTIONS or not key:
                raise ConfigError(f"sweep axis {axis!r} must look like section.key", key=axis)
            if not isinstance(values, list) or not values:
                raise ConfigError(f"sweep axis {axis!r} needs a non-empty list", key=axis)
        if not spec.seeds:
            raise ConfigError("sweep needs at least one seed", key="seeds")
        return spec

    @classmethod
    def load(cls, path) -> "SweepSpec":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()) or {})

    def expand(self) -> list[ExperimentConfig]:
        """Every (variant, axis values, seed) combination, validated up front."""
        names = list(self.axes)
        configs = []
        for variant in self.variants:
            for values in itertools.product(*(self.axes[n] for n in names)):
                for seed in self.seeds:
                    doc = _deep_copy(self.base)
                    doc.setdefault("model", {})["variant"] = variant
                    for axis, value in zip(names, values):
                        section, _, key = axis.partition(".")
                        doc.setdefault(section, {})[key] = value
                    doc["seed"] = seed
                    configs.append(ExperimentConfig.from_dict(doc))
        return configs


def _deep_copy(doc):
    return yaml.safe_load(yaml.safe_dump(doc))


# --------------------------------------------------------------------------
# ablations
# --------------------------------------------------------------------------
ABLATIONS: list[tuple[str, dict]] = [
    ("default", {}),
    ("write=hard", {"write_mode": "hard_nearest"}),
    ("heads=separate", {"coord_heads": "separate"}),
    ("phys=off", {"phys_mode": "pointwise_only"}),
    ("grid=6", {"grid": [6, 6, 6]}),
    ("grid=8", {"grid": [8, 8, 8]}),
    ("chunk=2", {"chunk_size": 2}),
    ("chunk=4", {"chunk_size": 4}),
]


def ablation_configs(base: dict | None = None, seeds=(0, 1, 2),
                     names: list[str] | None = None) -> list[ExperimentConfig]:
    """The ablation grid on binding at W=20, sigma=0.05, each against the default."""
    base = _deep_copy(base or {})
    base.setdefault("model", {})["variant"] = "tensor"
    base["toy"] = {**base.get("toy", {}), "task": "coord_binding", "W": 20, "sigma_noise": 0.05}
    configs = []
    for name, memory in ABLATIONS:
        if names is not None and name not in names:
            continue
        for seed in seeds:
            doc = _deep_copy(base)
            doc["memory"] = {**doc.get("memory", {}), **memory}
            doc["name"] = f"ablate:{name}"
            doc["seed"] = seed
            configs.append(ExperimentConfig.from_dict(doc))
    return configs


# --------------------------------------------------------------------------
# results table
# --------------------------------------------------------------------------
class ResultsTable:
    """CSV sink with serialized, atomic appends."""

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def rows(self) -> list[dict]:
        if not self.path.exists():
            return []
        with self.path.open(newline="") as fh:
            return list(csv.DictReader(fh))

    def completed(self) -> set[tuple[str, str]]:
        return {(r["config_hash"], r["seed"]) for r in self.rows() if r["status"] != "failed"}

    def append(self, row: dict) -> None:
        with self._lock:
            rows = [r for r in self.rows()
                    if (r["config_hash"], r["seed"]) != (row["config_hash"], str(row["seed"]))]
            rows.append({k: row.get(k, "") for k in RESULT_COLUMNS})
            buf = io.StringIO()
            writer = csv.DictWriter(buf, fieldnames=RESULT_COLUMNS, lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
            atomic_write_bytes(self.path, buf.getvalue().encode())


def _failed_row(cfg: ExperimentConfig, exc: BaseException) -> dict:
    return {"name": cfg.name, "config_hash": cfg.config_hash(), "task": cfg.toy.task,
            "variant": cfg.model.variant, "axis": axis_label(cfg.toy), "seed": cfg.seed,
            "accuracy": "", "best_step": "", "steps_run": "", "status": "failed",
            "mean_gate": "", "n_params": "", "message": f"{type(exc).__name__}: {exc}"}


def run_cells(configs: list[ExperimentConfig], out_dir, jobs: int = 1,
              log: Callable[[str], None] | None = None) -> list[dict]:
    """Run every cell not yet in ``out_dir/results.csv``; return the full table."""
    if jobs < 1:
        raise ConfigError("jobs must be >= 1", key="jobs")
    out_dir = Path(out_dir)
    table = ResultsTable(out_dir / RESULTS_FILE)
    done = table.completed()
    todo = [c for c in configs if (c.config_hash(), str(c.seed)) not in done]

    def one(cfg: ExperimentConfig):
        try:
            _, row = run_experiment(cfg, out_dir / "runs", log=log)
            row = {"name": cfg.name, **row}
        except Exception as exc:  # a failed cell is recorded, the sweep goes on
            if log is not None:
                log(traceback.format_exc())
            row = _failed_row(cfg, exc)
        table.append(row)
        return row

    if jobs == 1:
        for cfg in todo:
            one(cfg)
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(one, todo))
    return table.rows()


def pivot(rows: list[dict], task: str | None = None, names: bool = False) -> dict:
    """Mean accuracy over seeds: ``{row_label: {variant: (mean, n_seeds)}}``.

    Rows are the sweep axis (or the ablation name when ``names``); failed
    cells are left out of the means.
    """
    cells: dict[str, dict[str, list[float]]] = {}
    for r in rows:
        if task is not None and r["task"] != task:
            continue
        if r["status"] == "failed" or r["accuracy"] == "":
            continue
        label = r["name"] if names else r["axis"]
        cells.setdefault(label, {}).setdefault(r["variant"], []).append(float(r["accuracy"]))
    return {label: {v: (float(np.mean(a)), len(a)) for v, a in by_v.items()}
            for label, by_v in cells.items()}


def write_pivots(rows: list[dict], out_dir) -> list[Path]:
    """One ``pivot_<task>.csv`` per task present: rows = config, columns = variant."""
    out_dir = Path(out_dir)
    written = []
    for task in sorted({r["task"] for r in rows}):
        named = any(r["name"].startswith("ablate:") for r in rows if r["task"] == task)
        table = pivot(rows, task, names=named)
        variants = sorted({v for by_v in table.values() for v in by_v})
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["config"] + variants)
        for label in sorted(table):
            writer.writerow([label] + [f"{table[label][v][0]:.4f}" if v in table[label] else ""
                                       for v in variants])
        path = out_dir / f"pivot_{task}.csv"
        atomic_write_bytes(path, buf.getvalue().encode())
        written.append(path)
    return written


__all__ = ["ABLATIONS", "RESULT_COLUMNS", "ResultsTable", "SweepSpec", "ablation_configs",
           "pivot", "run_cells", "write_pivots"]

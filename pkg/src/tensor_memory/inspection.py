"""Inference-time inspection: per-step traces, snapshot files, gate readouts."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import container
from .errors import SnapshotFormatError

SNAPSHOT_MAGIC = b"TMSNAPSH"
SNAPSHOT_VERSION = 1

_ARRAY_FIELDS = ("mu_read", "mu_write", "sigma", "gate", "hnorm_volume", "mask_volume",
                 "read", "content", "write_volume")
COORD_COLUMNS = ["t", "batch", "mu_read_x", "mu_read_y", "mu_read_z",
                 "mu_write_x", "mu_write_y", "mu_write_z", "sigma", "gate"]


@dataclass
class StepTrace:
    """Quantities logged for one scan step of one memory module.

    ``hnorm_volume`` is the channel-wise L2 norm of the hidden state after
    the update, shape (B, D, H, W).  The optional fields are filled only
    by a full trace.
    """

    step: int
    mu_read: np.ndarray
    mu_write: np.ndarray
    sigma: np.ndarray
    gate: np.ndarray
    hnorm_volume: np.ndarray | None = None
    mask_volume: np.ndarray | None = None
    read: np.ndarray | None = None
    content: np.ndarray | None = None
    write_volume: np.ndarray | None = None
    layer: int = 0

    def __eq__(self, other):
        if not isinstance(other, StepTrace):
            return NotImplemented
        if (self.step, self.layer) != (other.step, other.layer):
            return False
        for name in _ARRAY_FIELDS:
            a, b = getattr(self, name), getattr(other, name)
            if (a is None) != (b is None):
                return False
            if a is not None and (a.shape != b.shape or a.dtype != b.dtype
                                  or a.tobytes() != b.tobytes()):
                return False
        return True


def max_intensity_projections(volume: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Max of a (B, D, H, W) volume along D, H and W respectively."""
    return volume.max(axis=1), volume.max(axis=2), volume.max(axis=3)


@dataclass
class SnapshotFile:
    meta: dict
    traces: list[StepTrace]
    projections: dict[tuple[int, int], tuple[np.ndarray, np.ndarray, np.ndarray]] = field(
        default_factory=dict)
    path: Path | None = None


def _trace_arrays(traces: list[StepTrace]) -> dict[str, np.ndarray]:
    arrays = {}
    for k, tr in enumerate(traces):
        for name in _ARRAY_FIELDS:
            value = getattr(tr, name)
            if value is not None:
                arrays[f"{k}/{name}"] = value
        if tr.hnorm_volume is not None:
            for axis, mip in zip("dhw", max_intensity_projections(tr.hnorm_volume)):
                arrays[f"{k}/mip_{axis}"] = mip
    return arrays


def coordinate_rows(traces: list[StepTrace]) -> list[list]:
    rows = []
    for tr in traces:
        for b in range(tr.mu_read.shape[0]):
            rows.append([tr.step, b, *tr.mu_read[b].tolist(), *tr.mu_write[b].tolist(),
                         float(tr.sigma[b, 0]), float(tr.gate[0])])
    return rows


def export_trace(traces: list[StepTrace], path, config: dict | None = None) -> SnapshotFile:
    """Write a snapshot file plus a ``<stem>_coords.csv`` table next to it.

    Each step carries its hidden-norm volume and the three maximum-intensity
    projections of that volume.
    """
    if not traces:
        raise ValueError("export_trace needs at least one StepTrace (was tracing enabled?)")
    path = Path(path)
    meta = {
        "config": config or {},
        "steps": [{"step": tr.step, "layer": tr.layer} for tr in traces],
    }
    arrays = _trace_arrays(traces)
    try:
        container.write(path, SNAPSHOT_MAGIC, SNAPSHOT_VERSION, meta, arrays)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer"] + COORD_COLUMNS)
        for tr in traces:
            for row in coordinate_rows([tr]):
                writer.writerow([tr.layer] + [repr(v) if isinstance(v, float) else v for v in row])
        container.atomic_write_bytes(path.with_name(path.stem + "_coords.csv"),
                                     buf.getvalue().encode())
    except OSError as exc:
        raise OSError(f"cannot write trace to {path}: {exc}") from exc
    return read_snapshot(path)


def read_snapshot(path) -> SnapshotFile:
    meta, arrays = container.read(path, SNAPSHOT_MAGIC, SNAPSHOT_VERSION)
    if "steps" not in meta:
        raise SnapshotFormatError("snapshot header lacks a step table")
    traces, mips = [], {}
    for k, info in enumerate(meta["steps"]):
        kwargs = {name: arrays.get(f"{k}/{name}") for name in _ARRAY_FIELDS}
        tr = StepTrace(step=info["step"], layer=info["layer"], **kwargs)
        traces.append(tr)
        if f"{k}/mip_d" in arrays:
            mips[(tr.layer, tr.step)] = tuple(arrays[f"{k}/mip_{a}"] for a in "dhw")
    return SnapshotFile(meta=meta, traces=traces, projections=mips, path=Path(path))


def gate_report(model) -> list[float]:
    """sigmoid(gamma) for every memory module of ``model``, in layer order."""
    return [mem.gate_value() for mem in getattr(model, "memories", []) if mem is not None]


__all__ = [
    "COORD_COLUMNS", "SnapshotFile", "StepTrace", "coordinate_rows", "export_trace",
    "gate_report", "max_intensity_projections", "read_snapshot",
]

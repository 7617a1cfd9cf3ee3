"""Build, train and record one configured run."""
from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np

from . import container
from .autodiff.tensor import no_grad
from .backbone import IOSpec, ModelVariant, build_variant
from .config import ExperimentConfig
from .inspection import export_trace
from .toys import ToySpec, generate
from .trainer import RunRecord, stream_seeds, train_run

CHECKPOINT_MAGIC = b"TMCHKPT1"
CHECKPOINT_VERSION = 1

SUMMARY_COLUMNS = ["config_hash", "task", "variant", "axis", "seed", "accuracy", "best_step",
                   "steps_run", "status", "mean_gate", "n_params", "message"]


def io_spec(toy: ToySpec) -> IOSpec:
    if toy.feature_dim is None:
        return IOSpec(n_classes=toy.n_classes, max_len=toy.seq_len_total, vocab_size=toy.V)
    return IOSpec(n_classes=toy.n_classes, max_len=toy.seq_len_total, feature_dim=toy.feature_dim)


def build_model(cfg: ExperimentConfig) -> ModelVariant:
    seed = stream_seeds(cfg.seed)["model"]
    return build_variant(cfg.model, io_spec(cfg.toy), seed=seed, memory=cfg.memory)


def axis_label(toy: ToySpec) -> str:
    return {"occlusion": f"L={toy.L}", "map_building": f"T={toy.T}",
            "coord_binding": f"W={toy.W},sigma={toy.sigma_noise:g}",
            "no_harm": f"seq={toy.seq_len}"}[toy.task]


def summary_row(cfg: ExperimentConfig, record: RunRecord) -> dict:
    gates = record.best_gates
    return {
        "config_hash": cfg.config_hash(),
        "task": cfg.toy.task,
        "variant": cfg.model.variant,
        "axis": axis_label(cfg.toy),
        "seed": cfg.seed,
        "accuracy": f"{record.best_accuracy:.6f}",
        "best_step": record.best_step,
        "steps_run": len(record.train_losses),
        "status": record.status,
        "mean_gate": f"{float(np.mean(gates)):.6f}" if gates else "",
        "n_params": record.n_params,
        "message": record.message,
    }


def save_checkpoint(model: ModelVariant, path, meta: dict) -> None:
    container.write(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, meta, model.params.state_dict())


def load_checkpoint(model: ModelVariant, path) -> dict:
    meta, arrays = container.read(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    model.params.load_state_dict(arrays)
    return meta


def trace_model(model: ModelVariant, toy: ToySpec, path, mode: str = "basic",
                batch_size: int = 4, config: dict | None = None):
    """Run one eval batch through ``model`` with tracing and export the snapshot."""
    batch = generate(toy.with_(batch_size=batch_size), 0)
    with no_grad():
        _, traces = model.forward(batch.tokens, trace=mode)
    return export_trace(traces, path, config)


def run_experiment(cfg: ExperimentConfig, out_dir=None, *, log=None) -> tuple[RunRecord, dict]:
    """Train one variant on one toy; write its record, checkpoint and optional trace.

    Files land in ``out_dir/<config_hash>-s<seed>/`` when ``out_dir`` is given.
    """
    model = build_model(cfg)
    echo = cfg.to_dict()
    echo["resolved_mlp_mult"] = model.cfg.mlp_mult
    t0 = time.perf_counter()

    def on_eval(point):
        if log is not None:
            log(f"[{cfg.toy.task}/{cfg.model.variant}/s{cfg.seed}] step {point.step} "
                f"loss {point.train_loss:.4f} acc {point.eval_accuracy:.4f}")

    record = train_run(model, cfg.toy, cfg.train, config_echo=echo, on_eval=on_eval)
    row = summary_row(cfg, record)
    if out_dir is not None:
        run_dir = Path(out_dir) / f"{cfg.config_hash()}-s{cfg.seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        record.write_jsonl(run_dir / "record.jsonl")
        save_checkpoint(model, run_dir / "best.ckpt",
                        {"config": echo, "best_step": record.best_step})
        (run_dir / "summary.json").write_text(json.dumps(row, sort_keys=True) + "\n")
        if cfg.trace and cfg.model.variant == "tensor":
            eval_toy = cfg.toy.with_(seed=stream_seeds(cfg.seed)["data/eval"])
            trace_model(model, eval_toy, run_dir / "trace.tmsnap", config=echo)
        (run_dir / "timing.json").write_text(
            json.dumps({"wall_clock": time.perf_counter() - t0}) + "\n")
    return record, row


__all__ = ["SUMMARY_COLUMNS", "axis_label", "build_model", "io_spec", "load_checkpoint",
           "run_experiment", "save_checkpoint", "summary_row", "trace_model"]

"""Deterministic training loop for the toy suite.

Batches are streamed: step ``s`` trains on batch ``s`` of the training
stream and every evaluation reads the same fixed batches of a separate
eval stream, so a run is fully determined by its seeds and configs.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff.params import ParamStore, child_rng
from .autodiff.tensor import no_grad
from .errors import ConfigError, NumericError
from .toys import ToySpec, generate

DIVERGENCE_LOSS = 1e4


@dataclass
class TrainConfig:
    lr_peak: float = 3e-4
    warmup_steps: int = 500
    total_steps: int = 10_000
    batch_size: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    weight_decay: float = 0.0
    grad_clip_norm: float | None = 1.0
    early_stop_patience: int = 10
    eval_every: int = 250
    eval_batches: int = 8
    # stop as soon as an evaluation is perfect; accuracy cannot improve past it
    stop_at_perfect: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.lr_peak < 0:
            raise ConfigError("lr_peak must be >= 0", key="lr_peak")
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1", key="total_steps")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError("warmup_steps must lie in [0, total_steps)", key="warmup_steps")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", key="batch_size")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)", key="beta1")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1", key="eval_every")
        if self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be >= 1", key="early_stop_patience")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise ConfigError("grad_clip_norm must be positive or null", key="grad_clip_norm")

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# schedule and optimizer
# --------------------------------------------------------------------------
def cosine_warmup_lr(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``lr_peak``, then cosine decay to zero at ``total_steps``."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr_peak * step / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.lr_peak * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if max_norm is not None and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


def adam_step(params: ParamStore, grads: dict[str, np.ndarray], state: AdamState, t: int,
              lr_t: float, cfg: TrainConfig) -> AdamState:
    """One bias-corrected Adam update with optional decoupled weight decay.

    ``grads`` are clipped in place first when ``cfg.grad_clip_norm`` is set.
    """
    if t < 1:
        raise ValueError("adam_step needs t >= 1")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter {name!r}")
    clip_global_norm(grads, cfg.grad_clip_norm)
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, g in grads.items():
        p = params[name].data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if cfg.weight_decay:
            p -= lr_t * cfg.weight_decay * p
        p -= lr_t * (m / c1) / (np.sqrt(v / c2) + cfg.eps_adam)
    state.t = t
    return state


# --------------------------------------------------------------------------
# records
# --------------------------------------------------------------------------
@dataclass
class EvalPoint:
    step: int
    train_loss: float
    eval_accuracy: float
    gates: list[float]
    wall_clock: float


@dataclass
class RunRecord:
    config: dict
    evals: list[EvalPoint] = field(default_factory=list)
    train_losses: list[float] = field(default_factory=list)
    best_accuracy: float = float("nan")
    best_step: int = -1
    best_gates: list[float] = field(default_factory=list)
    status: str = "running"
    message: str = ""
    n_params: int = 0

    def to_dict(self, timing: bool = True) -> dict:
        d = asdict(self)
        if not timing:
            for e in d["evals"]:
                e.pop("wall_clock")
        return d

    def fingerprint(self) -> str:
        """Canonical text of everything except wall-clock timings."""
        return json.dumps(self.to_dict(timing=False), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        d = dict(d)
        d["evals"] = [EvalPoint(**e) for e in d["evals"]]
        return cls(**d)

    def write_jsonl(self, path) -> None:
        """One line per evaluation followed by a summary line."""
        lines = [json.dumps({"kind": "eval", **asdict(e)}, sort_keys=True) for e in self.evals]
        summary = self.to_dict()
        summary.pop("evals")
        summary.pop("train_losses")
        lines.append(json.dumps({"kind": "summary", **summary}, sort_keys=True))
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# loops
# --------------------------------------------------------------------------
def evaluate(model, toyspec: ToySpec, n_batches: int, seed: int) -> float:
    """Accuracy over answer positions of ``n_batches`` batches of the stream ``seed``."""
    spec = toyspec.with_(seed=seed)
    correct = total = 0
    with no_grad():
        for b in range(n_batches):
            batch = generate(spec, b)
            pred = model.predict(batch.tokens, batch.answer_positions)
            correct += int((pred == batch.targets).sum())
            total += batch.targets.size
    return correct / total


def stream_seeds(root_seed: int) -> dict[str, int]:
    """Named child seeds of one run."""
    return {name: int(child_rng(root_seed, name).integers(2**31))
            for name in ("model", "data/train", "data/eval", "dropout")}


def train_run(model, toyspec: ToySpec, cfg: TrainConfig, *, eval_seed: int | None = None,
              config_echo: dict | None = None,
              on_eval: Callable[[EvalPoint], None] | None = None) -> RunRecord:
    """Train ``model`` on fresh batches of ``toyspec`` and return its record.

    The best parameters seen at an evaluation are restored before returning.
    Divergence (loss above 1e4 or non-finite) ends the run with status
    ``"diverged"`` and keeps the record accumulated so far.
    """
    seeds = stream_seeds(cfg.seed)
    train_spec = toyspec.with_(seed=seeds["data/train"], batch_size=cfg.batch_size)
    eval_spec = toyspec.with_(batch_size=cfg.batch_size)
    eval_seed = seeds["data/eval"] if eval_seed is None else eval_seed
    drop_rng = child_rng(cfg.seed, "dropout")
    params = model.params
    record = RunRecord(config=config_echo or {"toy": toyspec.to_dict(), "train": cfg.to_dict()},
                       n_params=params.count())
    state = AdamState()
    best_state = params.state_dict()
    since_best = 0
    window: list[float] = []
    t0 = time.perf_counter()

    def do_eval(step):
        nonlocal best_state, since_best
        acc = evaluate(model, eval_spec, cfg.eval_batches, eval_seed)
        point = EvalPoint(step, float(np.mean(window)) if window else float("nan"), acc,
                          model.gates(), time.perf_counter() - t0)
        record.evals.append(point)
        window.clear()
        if on_eval is not None:
            on_eval(point)
        if not acc <= record.best_accuracy:   # also true while best is nan
            record.best_accuracy, record.best_step = acc, step
            record.best_gates = point.gates
            best_state = params.state_dict()
            since_best = 0
        else:
            since_best += 1
        return acc

    do_eval(0)
    record.status = "completed"
    for step in range(1, cfg.total_steps + 1):
        batch = generate(train_spec, step - 1)
        params.zero_grad()
        try:
            loss = model.loss(batch.tokens, batch.targets, batch.answer_positions,
                              training=True, rng=drop_rng)
            value = float(loss.data)
            if not math.isfinite(value) or value > DIVERGENCE_LOSS:
                raise NumericError(f"loss diverged to {value} at step {step}")
            loss.backward()
            grads = {n: (t.grad if t.grad is not None else np.zeros_like(t.data))
                     for n, t in params.items()}
            adam_step(params, grads, state, step, cosine_warmup_lr(step, cfg), cfg)
        except NumericError as exc:
            record.status, record.message = "diverged", str(exc)
            break
        record.train_losses.append(value)
        window.append(value)
        if step % cfg.eval_every == 0 or step == cfg.total_steps:
            acc = do_eval(step)
            if cfg.stop_at_perfect and acc >= 1.0:
                record.status = "perfect"
                break
            if since_best >= cfg.early_stop_patience:
                record.status = "early_stopped"
                break
    params.load_state_dict(best_state)
    return record


__all__ = ["AdamState", "EvalPoint", "RunRecord", "TrainConfig", "adam_step",
           "clip_global_norm", "cosine_warmup_lr", "evaluate", "stream_seeds", "train_run"]

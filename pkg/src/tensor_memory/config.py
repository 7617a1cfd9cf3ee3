"""One declarative document describing a run: model, memory, toy and training.

Example (YAML or JSON)::

    seed: 0
    model:  {variant: tensor, d_model: 64, n_layers: 2}
    memory: {channels: 16, grid: [4, 4, 4], chunk_size: 1}
    toy:    {task: coord_binding, W: 20, sigma_noise: 0.1}
    train:  {total_steps: 2000, batch_size: 32}

``model.variant`` and ``toy.task`` are required.  Unknown keys, at any
level, are rejected with an error naming the key.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .backbone import BlockConfig
from .errors import ConfigError
from .memory import MemoryConfig
from .toys import ToySpec
from .trainer import TrainConfig

SECTIONS = {"model": BlockConfig, "memory": MemoryConfig, "toy": ToySpec, "train": TrainConfig}
TOP_LEVEL = {"seed", "name", "trace"} | set(SECTIONS)
REQUIRED = {"model": ("variant",), "toy": ("task",)}
# keys filled in from elsewhere in the document
_DERIVED = {"model": {"memory"}, "memory": {"d_model"}, "toy": {"seed", "batch_size"},
            "train": {"seed"}}


def _field_names(cls, section: str) -> set[str]:
    return {f.name for f in fields(cls)} - _DERIVED.get(section, set())


def _tuple_fields(section: str, values: dict) -> dict:
    out = dict(values)
    for key in ("grid", "speed"):
        if key in out and isinstance(out[key], list):
            out[key] = tuple(out[key])
    return out


@dataclass
class ExperimentConfig:
    model: BlockConfig
    memory: MemoryConfig
    toy: ToySpec
    train: TrainConfig
    seed: int = 0
    name: str = ""
    trace: bool = False
    raw: dict = field(default_factory=dict, repr=False)

    # -- construction ----------------------------------------------------------
    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a mapping")
        for key in doc:
            if key not in TOP_LEVEL:
                raise ConfigError(f"unknown config key {key!r}", key=key)
        seed = doc.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ConfigError("seed must be a non-negative integer", key="seed")
        sections = {}
        for section, klass in SECTIONS.items():
            values = doc.get(section) or {}
            if not isinstance(values, dict):
                raise ConfigError(f"section {section!r} must be a mapping", key=section)
            allowed = _field_names(klass, section)
            for key in values:
                if key not in allowed:
                    raise ConfigError(f"unknown config key {section}.{key}", key=f"{section}.{key}")
            for key in REQUIRED.get(section, ()):
                if key not in values:
                    raise ConfigError(f"missing required key {section}.{key}",
                                      key=f"{section}.{key}")
            sections[section] = _tuple_fields(section, values)
        try:
            train = TrainConfig(seed=seed, **sections["train"])
            model_kw = sections["model"]
            d_model = model_kw.get("d_model", BlockConfig.d_model)
            memory = MemoryConfig(d_model=d_model, **sections["memory"])
            toy = ToySpec(seed=seed, batch_size=train.batch_size, **sections["toy"])
            variant = model_kw.get("variant")
            model_kw.setdefault("frame_size", toy.frame_size)
            model = BlockConfig(memory=memory if variant == "tensor" else None, **model_kw)
        except ConfigError as exc:
            if exc.key and "." not in str(exc.key):
                owner = next((s for s, k in SECTIONS.items()
                              if exc.key in _field_names(k, s)), None)
                if owner:
                    exc.key = f"{owner}.{exc.key}"
            raise
        except TypeError as exc:
            raise ConfigError(f"bad config value: {exc}") from None
        return cls(model=model, memory=memory, toy=toy, train=train, seed=seed,
                   name=str(doc.get("name", "")), trace=bool(doc.get("trace", False)),
                   raw=json.loads(json.dumps(doc)))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise OSError(f"cannot read config {path}: {exc}") from exc
        try:
            doc = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML/JSON: {exc}") from None
        return cls.from_dict(doc or {})

    # -- views -------------------------------------------------------------------
    def to_dict(self) -> dict:
        """Fully resolved document (defaults filled in)."""
        model = self.model.to_dict()
        model.pop("memory")
        memory = self.memory.to_dict()
        memory.pop("d_model")
        toy = self.toy.relevant()
        for k in ("seed", "batch_size"):
            toy.pop(k)
        train = self.train.to_dict()
        train.pop("seed")
        return {"seed": self.seed, "name": self.name, "trace": self.trace, "model": model,
                "memory": memory, "toy": toy, "train": train}

    def config_hash(self, include_seed: bool = False) -> str:
        """Short digest of the resolved config; seed and name excluded by default."""
        d = self.to_dict()
        d.pop("name")
        d.pop("trace")
        if not include_seed:
            d.pop("seed")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_overrides(self, **sections) -> "ExperimentConfig":
        """A copy with per-section key overrides, e.g. ``toy={"W": 100}``."""
        doc = self.to_dict()
        for section, values in sections.items():
            if section in SECTIONS:
                doc[section] = {**doc[section], **values}
            else:
                doc[section] = values
        return ExperimentConfig.from_dict(doc)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return self.with_overrides(seed=seed)


__all__ = ["ExperimentConfig", "SECTIONS"]

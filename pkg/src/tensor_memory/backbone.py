"""Small pre-norm Transformer and the four toy-suite variants.

``base``       plain Transformer
``base_wide``  wider MLP, hidden size solved so parameters match ``tensor``
``slots``      learnable global tokens prepended to every sequence
``tensor``     one :class:`~tensor_memory.memory.TensorMemory` per block
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .autodiff import ops
from .autodiff.params import ParamStore, child_rng, xavier_uniform
from .autodiff.tensor import Tensor
from .errors import ConfigError, DimensionError
from .memory import MemoryConfig, TensorMemory

VARIANTS = ("base", "base_wide", "slots", "tensor")
MASK_NEG = -1e9


@dataclass
class BlockConfig:
    d_model: int = 64
    n_heads: int = 4
    mlp_mult: float = 4.0
    n_layers: int = 2
    variant: str = "base"
    n_slots: int = 8
    memory: MemoryConfig | None = None
    causal: bool = True
    # attention is bidirectional inside frames of this many tokens, causal across them
    frame_size: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}",
                              key="variant")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}",
                              key="n_heads")
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1", key="n_layers")
        if self.mlp_mult <= 0:
            raise ConfigError("mlp_mult must be positive", key="mlp_mult")
        if self.frame_size < 1:
            raise ConfigError("frame_size must be >= 1", key="frame_size")
        if self.variant == "slots" and self.n_slots < 1:
            raise ConfigError("slots variant needs n_slots >= 1", key="n_slots")
        if self.variant == "tensor":
            if self.memory is None:
                raise ConfigError("tensor variant needs a memory config", key="memory")
            if self.memory.d_model != self.d_model:
                self.memory = replace(self.memory, d_model=self.d_model)

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.mlp_mult * self.d_model))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["memory"] = self.memory.to_dict() if self.memory is not None else None
        return d


@dataclass(frozen=True)
class IOSpec:
    """What the model reads and predicts: token ids or features, and class count."""

    n_classes: int
    max_len: int
    vocab_size: int | None = None
    feature_dim: int | None = None

    def __post_init__(self):
        if (self.vocab_size is None) == (self.feature_dim is None):
            raise ConfigError("exactly one of vocab_size / feature_dim must be set")


# --------------------------------------------------------------------------
# parameter counting
# --------------------------------------------------------------------------
def memory_param_count(mem: MemoryConfig) -> int:
    d, C, K = mem.d_model, mem.channels, mem.chunk_size
    n = d * K * d + 3 * d + C * d + d + 1 + d * C + d + 1
    if mem.coord_heads == "separate":
        n += 3 * d
    if mem.phys_mode == "factorized":
        n += 3 * (2 * C * 3)
    n += 4 * C * 2 * C + 4 * C
    return n


def _block_param_count(d: int, hidden: int) -> int:
    return 2 * 2 * d + 4 * d * d + 3 * d + (hidden * d + hidden) + (d * hidden + d)


def param_count(cfg: BlockConfig, io: IOSpec) -> int:
    """Closed-form parameter count, equal to ``ModelVariant(cfg, io).n_params``."""
    d = cfg.d_model
    n = io.vocab_size * d if io.vocab_size is not None else io.feature_dim * d + d
    n += io.max_len * d
    n += cfg.n_layers * _block_param_count(d, cfg.mlp_hidden)
    n += 2 * d + io.n_classes * d + io.n_classes
    if cfg.variant == "slots":
        n += cfg.n_slots * d
    if cfg.variant == "tensor":
        n += cfg.n_layers * memory_param_count(cfg.memory)
    return n


def solve_wide_mlp(cfg: BlockConfig, io: IOSpec, memory: MemoryConfig) -> float:
    """``mlp_mult`` for base_wide so its parameter count matches the tensor variant."""
    tensor_cfg = replace(cfg, variant="tensor", memory=memory)
    base_cfg = replace(cfg, variant="base", memory=None)
    gap = param_count(tensor_cfg, io) - param_count(base_cfg, io)
    per_unit = cfg.n_layers * (2 * cfg.d_model + 1)
    extra = int(round(gap / per_unit))
    if extra < 1:
        raise ConfigError(f"cannot match parameters: gap of {gap} is below one hidden unit "
                          f"({per_unit} parameters)", key="mlp_mult")
    return (cfg.mlp_hidden + extra) / cfg.d_model


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------
class ModelVariant:
    """A Transformer variant with its own :class:`ParamStore`."""

    def __init__(self, cfg: BlockConfig, io: IOSpec, seed: int = 0, dtype=np.float64):
        self.cfg = cfg
        self.io = io
        self.seed = seed
        self.params = ParamStore(dtype=dtype)
        P = self.params
        d = cfg.d_model

        def lin(name, n_out, n_in, bias=True):
            P.add(name + ".W", xavier_uniform(child_rng(seed, name), (n_out, n_in), n_in, n_out))
            if bias:
                P.add(name + ".b", np.zeros(n_out))

        def table(name, shape):
            P.add(name, child_rng(seed, name).normal(0.0, 0.02, size=shape))

        if io.vocab_size is not None:
            table("embed.table", (io.vocab_size, d))
        else:
            lin("embed", d, io.feature_dim)
        table("pos", (io.max_len, d))
        if cfg.variant == "slots":
            table("slots", (cfg.n_slots, d))
        hidden = cfg.mlp_hidden
        self.memories: list[TensorMemory | None] = []
        for layer in range(cfg.n_layers):
            pre = f"blocks.{layer}."
            for ln in ("ln1", "ln2"):
                P.add(pre + ln + ".w", np.ones(d))
                P.add(pre + ln + ".b", np.zeros(d))
            for proj in ("q", "k", "v", "o"):
                # a key bias only shifts each softmax row, so it is left out
                lin(pre + "attn." + proj, d, d, bias=proj != "k")
            lin(pre + "mlp.fc1", hidden, d)
            lin(pre + "mlp.fc2", d, hidden)
            if cfg.variant == "tensor":
                self.memories.append(TensorMemory(cfg.memory, P, pre + "mem.",
                                                  seed=int(child_rng(seed, pre + "mem").integers(2**31))))
            else:
                self.memories.append(None)
        P.add("ln_f.w", np.ones(d))
        P.add("ln_f.b", np.zeros(d))
        lin("head", io.n_classes, d)
        self._mask_cache: dict[int, np.ndarray] = {}

    # -- bookkeeping ---------------------------------------------------------
    @property
    def n_params(self) -> int:
        return self.params.count()

    def gates(self) -> list[float]:
        return [m.gate_value() for m in self.memories if m is not None]

    def _attention_bias(self, n_tokens: int) -> np.ndarray:
        """Additive mask over the (slots + tokens) sequence."""
        if n_tokens in self._mask_cache:
            return self._mask_cache[n_tokens]
        S = self.cfg.n_slots if self.cfg.variant == "slots" else 0
        T = S + n_tokens
        allowed = np.ones((T, T), dtype=bool)
        if self.cfg.causal:
            frame = np.arange(n_tokens) // self.cfg.frame_size
            allowed[S:, S:] = frame[None, :] <= frame[:, None]
        bias = np.where(allowed, 0.0, MASK_NEG).astype(self.params.dtype)
        self._mask_cache[n_tokens] = bias
        return bias

    # -- forward ---------------------------------------------------------------
    def embed(self, tokens) -> Tensor:
        P = self.params
        tokens = np.asarray(tokens)
        if self.io.vocab_size is not None:
            if tokens.ndim != 2:
                raise DimensionError(f"expected (B, N) token ids, got shape {tokens.shape}")
            x = ops.embedding(P["embed.table"], tokens)
        else:
            if tokens.ndim != 3 or tokens.shape[-1] != self.io.feature_dim:
                raise DimensionError(
                    f"expected (B, N, {self.io.feature_dim}) features, got {tokens.shape}")
            x = ops.linear(Tensor(tokens.astype(P.dtype, copy=False)), P["embed.W"], P["embed.b"])
        N = tokens.shape[1]
        if N > self.io.max_len:
            raise DimensionError(f"sequence length {N} exceeds max_len {self.io.max_len}")
        return ops.add(x, P["pos"][:N])

    def attention(self, x: Tensor, layer: int, bias: np.ndarray) -> Tensor:
        P = self.params
        pre = f"blocks.{layer}.attn."
        B, T, d = x.shape
        h = self.cfg.n_heads
        dh = d // h

        def heads(name):
            y = ops.linear(x, P[pre + name + ".W"], P.get(pre + name + ".b"))
            return ops.transpose(ops.reshape(y, (B, T, h, dh)), (0, 2, 1, 3))

        q, k, v = heads("q"), heads("k"), heads("v")
        scores = ops.mul(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        attn = ops.softmax(ops.add(scores, bias), axis=-1)
        y = ops.reshape(ops.transpose(ops.matmul(attn, v), (0, 2, 1, 3)), (B, T, d))
        return ops.linear(y, P[pre + "o.W"], P[pre + "o.b"])

    def mlp(self, x: Tensor, layer: int) -> Tensor:
        P = self.params
        pre = f"blocks.{layer}.mlp."
        y = ops.gelu(ops.linear(x, P[pre + "fc1.W"], P[pre + "fc1.b"]))
        return ops.linear(y, P[pre + "fc2.W"], P[pre + "fc2.b"])

    def forward(self, tokens, *, training: bool = False, rng: np.random.Generator | None = None,
                trace: str | None = None, gamma_override: float | None = None):
        """Logits (B, N, n_classes) and, when ``trace`` is set, per-layer StepTraces."""
        P = self.params
        x = self.embed(tokens)
        B, N, d = x.shape
        S = 0
        if self.cfg.variant == "slots":
            S = self.cfg.n_slots
            slots = ops.add(ops.reshape(P["slots"], (1, S, d)), Tensor(np.zeros((B, 1, 1))))
            x = ops.concat([slots, x], axis=1)
        bias = self._attention_bias(N)
        traces = []
        for layer in range(self.cfg.n_layers):
            pre = f"blocks.{layer}."
            mem = self.memories[layer]
            x = ops.add(x, self.attention(
                ops.layer_norm(x, P[pre + "ln1.w"], P[pre + "ln1.b"]), layer, bias))
            if mem is not None and mem.cfg.placement == "after_attn":
                x = self._memory(mem, x, layer, training, rng, trace, traces)
            x = ops.add(x, self.mlp(ops.layer_norm(x, P[pre + "ln2.w"], P[pre + "ln2.b"]), layer))
            if mem is not None and mem.cfg.placement == "after_mlp":
                x = self._memory(mem, x, layer, training, rng, trace, traces)
        if S:
            x = x[:, S:]
        x = ops.layer_norm(x, P["ln_f.w"], P["ln_f.b"])
        logits = ops.linear(x, P["head.W"], P["head.b"])
        return (logits, traces) if trace else logits

    @staticmethod
    def _memory(mem, x, layer, training, rng, trace, traces):
        out, _, tr = mem.scan(x, training=training, rng=rng, trace=trace)
        for t in tr:
            t.layer = layer
        traces.extend(tr)
        return out

    __call__ = forward

    # -- losses and predictions ------------------------------------------------
    def loss(self, tokens, targets, answer_positions, *, training: bool = False,
             rng: np.random.Generator | None = None) -> Tensor:
        logits = self.forward(tokens, training=training, rng=rng)
        return ops.cross_entropy(select_answers(logits, answer_positions), targets)

    def predict(self, tokens, answer_positions) -> np.ndarray:
        from .autodiff.tensor import no_grad
        with no_grad():
            logits = self.forward(tokens)
        return select_answers(logits, answer_positions).data.argmax(axis=-1)


def select_answers(logits: Tensor, answer_positions) -> Tensor:
    """Logits at the answer positions.

    ``answer_positions`` is either an (A,) index array shared by the batch,
    giving (B, A, n_classes), or a (B, N) boolean mask, giving (M, n_classes).
    """
    pos = np.asarray(answer_positions)
    if pos.dtype == bool:
        return logits[np.nonzero(pos)]
    return logits[:, pos]


def build_variant(cfg: BlockConfig, io: IOSpec, seed: int, memory: MemoryConfig | None = None,
                  dtype=np.float64) -> ModelVariant:
    """Deterministically construct one variant.

    ``memory`` is the tensor variant's memory config; base_wide needs it to
    solve its MLP width and may pass it even though it builds no memory.
    """
    if cfg.variant == "base_wide":
        mem = memory or cfg.memory
        if mem is None:
            raise ConfigError("base_wide needs the tensor memory config to match parameters",
                              key="memory")
        mem = replace(mem, d_model=cfg.d_model)
        cfg = replace(cfg, mlp_mult=solve_wide_mlp(cfg, io, mem), memory=None)
    elif cfg.variant == "tensor" and cfg.memory is None and memory is not None:
        cfg = replace(cfg, memory=memory)
    elif cfg.variant in ("base", "slots"):
        cfg = replace(cfg, memory=None)
    return ModelVariant(cfg, io, seed=seed, dtype=dtype)


__all__ = ["BlockConfig", "IOSpec", "ModelVariant", "VARIANTS", "build_variant",
           "memory_param_count", "param_count", "select_answers", "solve_wide_mlp"]

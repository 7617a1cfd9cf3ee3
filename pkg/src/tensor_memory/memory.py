"""Fixed-size recurrent voxel memory scanned over chunks of tokens.

Per chunk the module reads the hidden volume at a predicted coordinate,
fuses the readout into the chunk through a gated residual, deposits a
write volume around a second coordinate, and advances a ConvLSTM state
whose gates come from a factorized depthwise-separable 3D operator.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import ops
from .autodiff.params import ParamStore, child_rng, xavier_uniform
from .autodiff.tensor import Tensor, record
from .errors import ConfigError, DimensionError
from .inspection import StepTrace

WRITE_MODES = ("gaussian", "hard_nearest")
COORD_HEADS = ("shared", "separate")
PHYS_MODES = ("factorized", "pointwise_only")
PLACEMENTS = ("after_attn", "after_mlp")

# above this many voxels the dense fused depthwise operator loses to three passes
FUSED_VOXEL_LIMIT = 125


@dataclass
class MemoryConfig:
    channels: int = 16
    grid: tuple[int, int, int] = (4, 4, 4)  # (D, H, W)
    chunk_size: int = 1
    d_model: int = 64
    sigma_scale: float = 0.5
    gamma_init: float = 0.0
    eps_mask: float = 1e-6
    sigma_floor: float = 1e-4
    write_mode: str = "gaussian"
    coord_heads: str = "shared"
    phys_mode: str = "factorized"
    dropout: float = 0.0
    placement: str = "after_attn"

    def __post_init__(self):
        self.grid = tuple(int(g) for g in self.grid)
        if len(self.grid) != 3 or min(self.grid) < 2:
            raise ConfigError(f"grid extents must be three values >= 2, got {self.grid}", key="grid")
        if self.channels < 1:
            raise ConfigError("channels must be >= 1", key="channels")
        if self.chunk_size < 1:
            raise ConfigError("chunk_size must be >= 1", key="chunk_size")
        if self.d_model < 1:
            raise ConfigError("d_model must be >= 1", key="d_model")
        for key in ("sigma_scale", "eps_mask", "sigma_floor"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key} must be positive", key=key)
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)", key="dropout")
        for key, allowed in (("write_mode", WRITE_MODES), ("coord_heads", COORD_HEADS),
                             ("phys_mode", PHYS_MODES), ("placement", PLACEMENTS)):
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}",
                                  key=key)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d


@dataclass
class MemoryState:
    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, batch: int, cfg: MemoryConfig, dtype=np.float64) -> "MemoryState":
        shape = (batch, cfg.channels, *cfg.grid)
        return cls(Tensor(np.zeros(shape, dtype=dtype)), Tensor(np.zeros(shape, dtype=dtype)))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.h.shape

    def element_count(self) -> int:
        return self.h.size + self.c.size


@dataclass
class WritePackage:
    mu_write: Tensor  # (B, 3)
    content: Tensor   # (B, C)
    sigma: Tensor     # (B, 1)


@dataclass
class CoordGrid:
    """Voxel-centre coordinates, corner aligned: index 0 -> -1, index n-1 -> +1.

    Channel 0 is x along W, channel 1 is y along H, channel 2 is z along D.
    """

    grid: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, extents: tuple[int, int, int], dtype=np.float64) -> "CoordGrid":
        D, H, W = extents
        z, y, x = np.meshgrid(np.linspace(-1.0, 1.0, D), np.linspace(-1.0, 1.0, H),
                              np.linspace(-1.0, 1.0, W), indexing="ij")
        return cls(np.stack([x, y, z])[None].astype(dtype))

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.grid.shape[2:]


def coord_to_index(mu: np.ndarray, extent: int) -> np.ndarray:
    """Map a coordinate in [-1, 1] to a fractional voxel index in [0, extent-1]."""
    return (mu + 1.0) * 0.5 * (extent - 1)


# --------------------------------------------------------------------------
# chunking and step inputs
# --------------------------------------------------------------------------
def chunk_tokens(x: Tensor, K: int) -> tuple[Tensor, np.ndarray]:
    """Group (B, N, d) tokens into (B, S, K, d) chunks, zero-padding the tail."""
    if K <= 0:
        raise ConfigError(f"chunk size must be positive, got {K}", key="chunk_size")
    B, N, d = x.shape
    if N < 1:
        raise DimensionError("need at least one token")
    S = math.ceil(N / K)
    pad = S * K - N
    if pad:
        x = ops.concat([x, Tensor(np.zeros((B, pad, d), dtype=x.dtype))], axis=1)
    mask = np.zeros((B, S * K), dtype=x.dtype)
    mask[:, :N] = 1.0
    return ops.reshape(x, (B, S, K, d)), mask.reshape(B, S, K)


def step_inputs(chunk: Tensor, W_wp: Tensor) -> tuple[Tensor, Tensor]:
    """Read query (first token) and write summary (projection of the flattened chunk).

    ``chunk`` is (B, K, d) with padded positions already zero.
    """
    B, K, d = chunk.shape
    x_read = chunk[:, 0, :]
    x_write = ops.linear(ops.reshape(chunk, (B, K * d)), W_wp)
    return x_read, x_write


def predict_coords(x_read: Tensor, x_write: Tensor, W_coord: Tensor,
                   W_coord_write: Tensor | None = None) -> tuple[Tensor, Tensor]:
    mu_read = ops.tanh(ops.linear(x_read, W_coord))
    mu_write = ops.tanh(ops.linear(x_write, W_coord if W_coord_write is None else W_coord_write))
    return mu_read, mu_write


# --------------------------------------------------------------------------
# read
# --------------------------------------------------------------------------
def _axis_weights(mu: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Linear-interpolation weights (B, n) along one axis and their d/dmu."""
    p = coord_to_index(mu, n)
    i0 = np.clip(np.floor(p), 0, n - 2).astype(np.intp)
    t = p - i0
    rows = np.arange(mu.shape[0])
    w = np.zeros((mu.shape[0], n), dtype=mu.dtype)
    w[rows, i0] = 1.0 - t
    w[rows, i0 + 1] = t
    dw = np.zeros_like(w)
    scale = 0.5 * (n - 1)
    dw[rows, i0] = -scale
    dw[rows, i0 + 1] = scale
    return w, dw


def trilinear_read(h: Tensor, mu: Tensor) -> Tensor:
    """Sample ``h`` (B, C, D, H, W) at one continuous point per batch row.

    ``mu`` is (B, 3) ordered (x, y, z) <-> (W, H, D).  Returns (B, C), the
    convex combination of the eight surrounding voxel features.
    """
    if h.ndim != 5 or mu.shape != (h.shape[0], 3):
        raise DimensionError(f"trilinear_read: h {h.shape}, mu {mu.shape}")
    B, C, D, H, W = h.shape
    md = mu.data
    wx, dwx = _axis_weights(md[:, 0], W)
    wy, dwy = _axis_weights(md[:, 1], H)
    wz, dwz = _axis_weights(md[:, 2], D)
    weights = (wz[:, :, None, None] * wy[:, None, :, None] * wx[:, None, None, :]).reshape(B, 1, -1)
    hf = h.data.reshape(B, C, -1)
    out = np.matmul(hf, weights.transpose(0, 2, 1))[:, :, 0]

    def adjoint(g):
        gh = (g[:, :, None] * weights).reshape(h.shape) if h.requires_grad else None
        gmu = None
        if mu.requires_grad:
            # contract sum_c g_c h_c against two axis weights and one derivative
            f = np.matmul(g[:, None, :], hf).reshape(B, D, H * W)
            f_hw = np.matmul(wz[:, None, :], f).reshape(B, H, W)
            gx = np.einsum("bw,bw->b", np.matmul(wy[:, None, :], f_hw)[:, 0], dwx)
            gy = np.einsum("bh,bh->b", np.matmul(f_hw, wx[:, :, None])[:, :, 0], dwy)
            yx = (wy[:, :, None] * wx[:, None, :]).reshape(B, H * W, 1)
            gz = np.einsum("bd,bd->b", np.matmul(f, yx)[:, :, 0], dwz)
            gmu = np.stack([gx, gy, gz], axis=1)
        return gh, gmu

    return record("trilinear_read", out, (h, mu), adjoint)


def fuse_readout(x_chunk: Tensor, r: Tensor, W_out: Tensor, b_out: Tensor, gamma: Tensor,
                 dropout_p: float = 0.0, rng: np.random.Generator | None = None,
                 training: bool = False) -> tuple[Tensor, Tensor]:
    """Project the read vector to token space and add it to every token of the chunk.

    Returns ``(fused_chunk, readout)``.
    """
    m = ops.linear(r, W_out, b_out)
    gated = ops.mul(ops.sigmoid(gamma), ops.dropout(m, dropout_p, rng, training))
    B, d = m.shape
    return ops.add(x_chunk, ops.reshape(gated, (B, 1, d))), m


# --------------------------------------------------------------------------
# write
# --------------------------------------------------------------------------
def spread(x_write: Tensor, W_sigma: Tensor, b_sigma: Tensor, cfg: MemoryConfig) -> Tensor:
    s = ops.softplus(ops.linear(x_write, W_sigma, b_sigma))
    return ops.mul(ops.add(s, cfg.sigma_floor), cfg.sigma_scale)


def gaussian_mask(mu: Tensor, sigma: Tensor, grid: CoordGrid, eps: float) -> Tensor:
    """exp(-|grid - mu|^2 / (2 sigma^2 + eps)) as (B, 1, D, H, W)."""
    B = mu.shape[0]
    if mu.shape != (B, 3) or sigma.shape != (B, 1):
        raise DimensionError(f"gaussian_mask: mu {mu.shape}, sigma {sigma.shape}")
    G = grid.grid.reshape(3, -1)                      # (3, V)
    diff = G[None, :, :] - mu.data[:, :, None]        # (B, 3, V)
    dist2 = (diff * diff).sum(axis=1)                 # (B, V)
    s = sigma.data
    den = 2.0 * s * s + eps                           # (B, 1)
    M = np.exp(-dist2 / den)
    shape = (B, 1, *grid.extents)

    def adjoint(g):
        gM = g.reshape(B, -1) * M
        gmu = (2.0 / den) * np.matmul(diff, gM[:, :, None])[:, :, 0] if mu.requires_grad else None
        gs = None
        if sigma.requires_grad:
            gs = (gM * dist2).sum(axis=1, keepdims=True) * 4.0 * s / (den * den)
        return gmu, gs

    return record("gaussian_mask", M.reshape(shape), (mu, sigma), adjoint)


def gaussian_write(x_write: Tensor, W_c: Tensor, W_sigma: Tensor, b_sigma: Tensor,
                   mu_write: Tensor, grid: CoordGrid, cfg: MemoryConfig
                   ) -> tuple[Tensor, WritePackage, Tensor]:
    """Soft deposit ``content ⊗ M``; returns (U, write package, mask)."""
    content = ops.linear(x_write, W_c)
    sigma = spread(x_write, W_sigma, b_sigma, cfg)
    M = gaussian_mask(mu_write, sigma, grid, cfg.eps_mask)
    B, C = content.shape
    U = ops.mul(ops.reshape(content, (B, C, 1, 1, 1)), M)
    return U, WritePackage(mu_write, content, sigma), M


def nearest_voxel(mu: np.ndarray, extents: tuple[int, int, int]) -> np.ndarray:
    """(B, 3) integer (d, h, w) index of the voxel centre nearest each coordinate.

    The grid is separable, so the Euclidean nearest centre is the per-axis
    nearest; exact midpoints resolve to the lower index.
    """
    D, H, W = extents
    out = np.empty((mu.shape[0], 3), dtype=np.intp)
    for col, (axis, n) in enumerate(((2, D), (1, H), (0, W))):
        p = coord_to_index(mu[:, axis], n)
        out[:, col] = np.clip(np.ceil(p - 0.5), 0, n - 1).astype(np.intp)
    return out


def hard_write(content: Tensor, mu_write: Tensor, grid: CoordGrid) -> tuple[Tensor, Tensor]:
    """Deposit ``content`` into the single nearest voxel; gradient reaches content only."""
    B, C = content.shape
    idx = nearest_voxel(mu_write.data, grid.extents)
    onehot = np.zeros((B, 1, *grid.extents), dtype=content.dtype)
    onehot[np.arange(B), 0, idx[:, 0], idx[:, 1], idx[:, 2]] = 1.0
    M = Tensor(onehot)
    return ops.mul(ops.reshape(content, (B, C, 1, 1, 1)), M), M


# --------------------------------------------------------------------------
# dynamics
# --------------------------------------------------------------------------
def phys_gates(U: Tensor, h: Tensor, kernels: tuple[Tensor, Tensor, Tensor] | None,
               W_pw: Tensor, b_pw: Tensor | None) -> Tensor:
    """Gate pre-activations (B, 4C, D, H, W) from ``[U; h]``.

    ``kernels`` holds the D-, H- and W-axis depthwise kernels applied in that
    order; ``None`` skips them (pointwise-only ablation).
    """
    if U.shape != h.shape:
        raise DimensionError(f"phys_gates: U {U.shape} vs h {h.shape}")
    z = ops.concat([U, h], axis=1)
    if kernels is not None:
        if int(np.prod(U.shape[2:])) <= FUSED_VOXEL_LIMIT:
            z = ops.factorized_depthwise3d(z, *kernels)
        else:
            for k in kernels:
                z = ops.depthwise_conv3d(z, k)
    return ops.pointwise_conv3d(z, W_pw, b_pw)


def convlstm_step(G: Tensor, state: MemoryState) -> MemoryState:
    """Voxel-wise LSTM update from gate pre-activations ``G`` split as (i, f, o, g).

    ``c' = f*c + i*g`` and ``h' = o*tanh(c')`` with sigmoid i, f, o and tanh g.
    """
    c = state.c
    C = c.shape[1]
    if G.shape[1] != 4 * C or G.shape[2:] != c.shape[2:] or G.shape[0] != c.shape[0]:
        raise DimensionError(f"convlstm_step: gates {G.shape} do not match state {c.shape}")
    Gd, cd = G.data, c.data
    sig = ops.sigmoid_np(Gd[:, : 3 * C])
    i, f, o = sig[:, :C], sig[:, C: 2 * C], sig[:, 2 * C:]
    g = np.tanh(Gd[:, 3 * C:])
    c_next = f * cd + i * g
    tc = np.tanh(c_next)
    h_next = o * tc
    packed = np.stack([h_next, c_next], axis=1)

    def adjoint(gp):
        gh, gc = gp[:, 0], gp[:, 1]
        gc_total = gc + gh * o * (1.0 - tc * tc)
        gG = np.empty_like(Gd)
        gG[:, :C] = gc_total * g * i * (1.0 - i)
        gG[:, C: 2 * C] = gc_total * cd * f * (1.0 - f)
        gG[:, 2 * C: 3 * C] = gh * tc * o * (1.0 - o)
        gG[:, 3 * C:] = gc_total * i * (1.0 - g * g)
        return gG, gc_total * f

    both = record("convlstm_step", packed, (G, c), adjoint)
    return MemoryState(both[:, 0], both[:, 1])


# --------------------------------------------------------------------------
# channel-major fast path
#
# Inside the scan the state is held as (C, B, V) with V = D*H*W flattened
# row-major.  The pointwise projection then is a single matrix product and
# the per-channel voxel operator a batched one.  These primitives compute
# exactly what the (B, C, D, H, W) reference primitives above compute.
# --------------------------------------------------------------------------
def to_channel_major(v: Tensor) -> Tensor:
    B, C = v.shape[:2]
    return ops.transpose(ops.reshape(v, (B, C, -1 if v.ndim > 2 else 1)), (1, 0, 2))


def from_channel_major(v: Tensor, extents: tuple[int, int, int]) -> Tensor:
    C, B, _ = v.shape
    return ops.reshape(ops.transpose(v, (1, 0, 2)), (B, C, *extents))


def trilinear_weights(mu: np.ndarray, extents: tuple[int, int, int]):
    """Dense (B, V) trilinear weights and the per-axis factors they came from."""
    D, H, W = extents
    B = mu.shape[0]
    wx, dwx = _axis_weights(mu[:, 0], W)
    wy, dwy = _axis_weights(mu[:, 1], H)
    wz, dwz = _axis_weights(mu[:, 2], D)
    weights = (wz[:, :, None, None] * wy[:, None, :, None] * wx[:, None, None, :]).reshape(B, -1)
    return weights, (wx, dwx, wy, dwy, wz, dwz)


def read_channel_major(h: Tensor, mu: Tensor, extents: tuple[int, int, int]) -> Tensor:
    """:func:`trilinear_read` for a (C, B, V) state; returns (B, C)."""
    C, B, V = h.shape
    D, H, W = extents
    if mu.shape != (B, 3) or V != D * H * W:
        raise DimensionError(f"read_channel_major: h {h.shape}, mu {mu.shape}, grid {extents}")
    weights, (wx, dwx, wy, dwy, wz, dwz) = trilinear_weights(mu.data, extents)
    hd = h.data
    out = (hd * weights[None]).sum(axis=2).T

    def adjoint(g):
        gt = g.T[:, :, None]                                          # (C, B, 1)
        gh = gt * weights[None] if h.requires_grad else None
        gmu = None
        if mu.requires_grad:
            f = (gt * hd).sum(axis=0).reshape(B, D, H * W)
            f_hw = np.matmul(wz[:, None, :], f).reshape(B, H, W)
            gx = np.einsum("bw,bw->b", np.matmul(wy[:, None, :], f_hw)[:, 0], dwx)
            gy = np.einsum("bh,bh->b", np.matmul(f_hw, wx[:, :, None])[:, :, 0], dwy)
            yx = (wy[:, :, None] * wx[:, None, :]).reshape(B, H * W, 1)
            gz = np.einsum("bd,bd->b", np.matmul(f, yx)[:, :, 0], dwz)
            gmu = np.stack([gx, gy, gz], axis=1)
        return gh, gmu

    return record("read_channel_major", out, (h, mu), adjoint)


def memory_cell(U: Tensor, h: Tensor, c: Tensor, A: Tensor | None, W_pw: Tensor,
                b_pw: Tensor) -> Tensor:
    """Phys gates plus ConvLSTM update on (C, B, V) tensors.

    ``A`` is the (2C, V, V) voxel operator from
    :func:`~tensor_memory.autodiff.ops.depthwise_operator`, or ``None`` for
    the pointwise-only ablation.  Returns the packed (2, C, B, V) pair
    ``(h', c')``.
    """
    C, B, V = c.shape
    if U.shape != c.shape or h.shape != c.shape or W_pw.shape != (4 * C, 2 * C):
        raise DimensionError(f"memory_cell: U {U.shape}, h {h.shape}, c {c.shape}, "
                             f"W_pw {W_pw.shape}")
    z = np.concatenate([U.data, h.data], axis=0)                      # (2C, B, V)
    Ad = None if A is None else A.data
    y = z if Ad is None else np.matmul(z, Ad.transpose(0, 2, 1))
    y2 = y.reshape(2 * C, B * V)
    Wd = W_pw.data
    G = Wd @ y2 + b_pw.data[:, None]                                  # (4C, B*V)
    sig = ops.sigmoid_np(G[: 3 * C])
    i, f, o = sig[:C], sig[C: 2 * C], sig[2 * C:]
    g = np.tanh(G[3 * C:])
    cd = c.data.reshape(C, B * V)
    c_next = f * cd + i * g
    tc = np.tanh(c_next)
    packed = np.stack([o * tc, c_next]).reshape(2, C, B, V)

    def adjoint(gp):
        gh = gp[0].reshape(C, B * V)
        gc = gp[1].reshape(C, B * V)
        gc_total = gc + gh * o * (1.0 - tc * tc)
        gG = np.empty_like(G)
        gG[:C] = gc_total * g * i * (1.0 - i)
        gG[C: 2 * C] = gc_total * cd * f * (1.0 - f)
        gG[2 * C: 3 * C] = gh * tc * o * (1.0 - o)
        gG[3 * C:] = gc_total * i * (1.0 - g * g)
        gW = gG @ y2.T if W_pw.requires_grad else None
        gb = gG.sum(axis=1) if b_pw.requires_grad else None
        gy = (Wd.T @ gG).reshape(2 * C, B, V)
        gA = None
        if Ad is None:
            gz = gy
        else:
            gz = np.matmul(gy, Ad)
            if A.requires_grad:
                gA = np.matmul(gy.transpose(0, 2, 1), z)
        grads = (gz[:C], gz[C:], (gc_total * f).reshape(C, B, V), gW, gb)
        return grads if A is None else grads + (gA,)

    inputs = (U, h, c, W_pw, b_pw) if A is None else (U, h, c, W_pw, b_pw, A)
    return record("memory_cell", packed, inputs, adjoint)


def _spatial_mix(z: Tensor, kernels, extents) -> Tensor:
    """Three depthwise passes on a (2C, B, V) tensor, for grids too large for ``A``."""
    y = from_channel_major(z, extents)
    for k in kernels:
        y = ops.depthwise_conv3d(y, k)
    return to_channel_major(y)


# --------------------------------------------------------------------------
# module
# --------------------------------------------------------------------------
class TensorMemory:
    """Parameters and scan loop for one memory module.

    Parameters live in a shared :class:`ParamStore` under ``prefix``.
    """

    def __init__(self, cfg: MemoryConfig, params: ParamStore, prefix: str, seed: int):
        self.cfg = cfg
        self.params = params
        self.prefix = prefix
        self.grid = CoordGrid.build(cfg.grid, dtype=params.dtype)
        d, C, K = cfg.d_model, cfg.channels, cfg.chunk_size

        def add(name, shape, fan_in, fan_out):
            rng = child_rng(seed, f"{prefix}{name}")
            return params.add(prefix + name, xavier_uniform(rng, shape, fan_in, fan_out))

        add("W_wp", (d, K * d), K * d, d)
        add("W_coord", (3, d), d, 3)
        if cfg.coord_heads == "separate":
            add("W_coord_write", (3, d), d, 3)
        add("W_c", (C, d), d, C)
        add("W_sigma", (1, d), d, 1)
        params.add(prefix + "b_sigma", np.ones(1))
        add("W_out", (d, C), C, d)
        params.add(prefix + "b_out", np.zeros(d))
        params.add(prefix + "gamma", np.full(1, cfg.gamma_init))
        if cfg.phys_mode == "factorized":
            for axis, shape in (("d", (2 * C, 3, 1, 1)), ("h", (2 * C, 1, 3, 1)),
                                ("w", (2 * C, 1, 1, 3))):
                add(f"dw_{axis}", shape, 3, 3)
        add("W_pw", (4 * C, 2 * C), 2 * C, 4 * C)
        params.add(prefix + "b_pw", np.zeros(4 * C))

    def p(self, name: str) -> Tensor:
        return self.params[self.prefix + name]

    def gate_value(self) -> float:
        return float(ops.sigmoid_np(self.p("gamma").data)[0])

    def parameter_count(self) -> int:
        return self.params.count(self.prefix)

    def kernels(self):
        if self.cfg.phys_mode != "factorized":
            return None
        return self.p("dw_d"), self.p("dw_h"), self.p("dw_w")

    def scan(self, x: Tensor, state: MemoryState | None = None, *, training: bool = False,
             rng: np.random.Generator | None = None, trace: str | None = None,
             ) -> tuple[Tensor, MemoryState, list[StepTrace]]:
        """Run the memory over all chunks of ``x`` (B, N, d).

        Everything that depends only on the tokens (coordinates, content,
        spreads, write volumes) is computed for all chunks at once; only the
        read and the state update run step by step.  Returns the fused tokens,
        the final state and, when ``trace`` is ``"basic"`` (coordinates,
        spreads, gate, norm volume) or ``"full"`` (also reads, content, masks
        and write volumes), one :class:`StepTrace` per chunk.
        """
        cfg = self.cfg
        B, N, d = x.shape
        if d != cfg.d_model:
            raise DimensionError(f"token dim {d} != memory d_model {cfg.d_model}")
        if state is None:
            state = MemoryState.zeros(B, cfg, dtype=x.dtype)
        K, C = cfg.chunk_size, cfg.channels
        ext = self.grid.extents
        V = int(np.prod(ext))
        x_grp, _ = chunk_tokens(x, K)
        S = x_grp.shape[1]

        # token-only quantities for every chunk: (B, S, .)
        x_read = x_grp[:, :, 0, :]
        x_write = ops.linear(ops.reshape(x_grp, (B, S, K * d)), self.p("W_wp"))
        W_coord_write = self.p("W_coord_write") if cfg.coord_heads == "separate" else None
        mu_read, mu_write = predict_coords(x_read, x_write, self.p("W_coord"), W_coord_write)
        content = ops.linear(x_write, self.p("W_c"))                            # (B, S, C)
        sigma = spread(x_write, self.p("W_sigma"), self.p("b_sigma"), cfg)      # (B, S, 1)
        flat_mu = ops.reshape(mu_write, (B * S, 3))
        if cfg.write_mode == "gaussian":
            M = gaussian_mask(flat_mu, ops.reshape(sigma, (B * S, 1)), self.grid, cfg.eps_mask)
        else:
            idx = nearest_voxel(flat_mu.data, ext)
            onehot = np.zeros((B * S, 1, *ext), dtype=x.dtype)
            onehot[np.arange(B * S), 0, idx[:, 0], idx[:, 1], idx[:, 2]] = 1.0
            M = Tensor(onehot)
        # U[s, c, b, v] = content[b, s, c] * M[b, s, v]
        U_all = ops.mul(ops.reshape(ops.transpose(content, (1, 2, 0)), (S, C, B, 1)),
                        ops.reshape(ops.transpose(ops.reshape(M, (B, S, V)), (1, 0, 2)),
                                    (S, 1, B, V)))

        kernels = self.kernels()
        A = None
        if kernels is not None and V <= FUSED_VOXEL_LIMIT:
            A = ops.depthwise_operator(*kernels, ext)
        W_pw, b_pw = self.p("W_pw"), self.p("b_pw")
        h = to_channel_major(state.h)
        c = to_channel_major(state.c)
        reads = []
        traces: list[StepTrace] = []
        gate = self.gate_value()
        for t in range(S):
            mu_t = mu_read[:, t]
            r = read_channel_major(h, mu_t, ext)
            reads.append(r)
            U = U_all[t]
            if kernels is not None and A is None:
                mixed = _spatial_mix(ops.concat([U, h], axis=0), kernels, ext)
                packed = memory_cell(mixed[:C], mixed[C:], c, None, W_pw, b_pw)
            else:
                packed = memory_cell(U, h, c, A, W_pw, b_pw)
            h, c = packed[0], packed[1]
            if trace:
                hd = h.data
                full = trace == "full"
                traces.append(StepTrace(
                    step=t,
                    mu_read=mu_t.data.copy(),
                    mu_write=mu_write.data[:, t].copy(),
                    sigma=sigma.data[:, t].copy(),
                    gate=np.array([gate]),
                    hnorm_volume=np.sqrt((hd * hd).sum(axis=0)).reshape(B, *ext),
                    mask_volume=M.data.reshape(B, S, 1, *ext)[:, t].copy() if full else None,
                    read=r.data.copy() if full else None,
                    content=content.data[:, t].copy() if full else None,
                    write_volume=(U.data.transpose(1, 0, 2).reshape(B, C, *ext).copy()
                                  if full else None),
                ))
        r_all = ops.stack(reads, axis=1)                                          # (B, S, C)
        m = ops.linear(r_all, self.p("W_out"), self.p("b_out"))
        gated = ops.mul(ops.sigmoid(self.p("gamma")), ops.dropout(m, cfg.dropout, rng, training))
        out = ops.add(x_grp, ops.reshape(gated, (B, S, 1, d)))
        out = ops.reshape(out, (B, S * K, d))
        if S * K != N:
            out = out[:, :N]
        final = MemoryState(from_channel_major(h, ext), from_channel_major(c, ext))
        return out, final, traces

    def scan_reference(self, x: Tensor, state: MemoryState | None = None, *,
                       training: bool = False, rng: np.random.Generator | None = None,
                       trace: str | None = None,
                       ) -> tuple[Tensor, MemoryState, list[StepTrace]]:
        """Chunk-by-chunk scan built from the (B, C, D, H, W) primitives.

        Slower than :meth:`scan` but written directly from the step
        equations; kept as the oracle the fast path is tested against.
        """
        cfg = self.cfg
        B, N, d = x.shape
        if d != cfg.d_model:
            raise DimensionError(f"token dim {d} != memory d_model {cfg.d_model}")
        if state is None:
            state = MemoryState.zeros(B, cfg, dtype=x.dtype)
        K = cfg.chunk_size
        x_grp, _ = chunk_tokens(x, K)
        S = x_grp.shape[1]
        W_coord_write = self.p("W_coord_write") if cfg.coord_heads == "separate" else None
        kernels = self.kernels()
        gate = self.gate_value()
        fused_chunks: list[Tensor] = []
        traces: list[StepTrace] = []
        for t in range(S):
            chunk = x_grp[:, t]
            x_read, x_write = step_inputs(chunk, self.p("W_wp"))
            mu_read, mu_write = predict_coords(x_read, x_write, self.p("W_coord"), W_coord_write)
            r = trilinear_read(state.h, mu_read)
            fused, _ = fuse_readout(chunk, r, self.p("W_out"), self.p("b_out"), self.p("gamma"),
                                    cfg.dropout, rng, training)
            fused_chunks.append(fused)
            if cfg.write_mode == "gaussian":
                U, pkg, M = gaussian_write(x_write, self.p("W_c"), self.p("W_sigma"),
                                           self.p("b_sigma"), mu_write, self.grid, cfg)
            else:
                content = ops.linear(x_write, self.p("W_c"))
                U, M = hard_write(content, mu_write, self.grid)
                pkg = WritePackage(mu_write, content,
                                   spread(x_write, self.p("W_sigma"), self.p("b_sigma"), cfg))
            G = phys_gates(U, state.h, kernels, self.p("W_pw"), self.p("b_pw"))
            state = convlstm_step(G, state)
            if trace:
                traces.append(_make_trace(t, mu_read, pkg, gate, state, r, M, U, trace == "full"))
        out = ops.concat(fused_chunks, axis=1) if S > 1 else fused_chunks[0]
        if S * K != N:
            out = out[:, :N]
        return out, state, traces


def _make_trace(t, mu_read, pkg: WritePackage, gate, state, r, M, U, full) -> StepTrace:
    h = state.h.data
    return StepTrace(
        step=t,
        mu_read=mu_read.data.copy(),
        mu_write=pkg.mu_write.data.copy(),
        sigma=pkg.sigma.data.copy(),
        gate=np.array([gate]),
        hnorm_volume=np.sqrt((h * h).sum(axis=1)),
        mask_volume=M.data.copy() if full else None,
        read=r.data.copy() if full else None,
        content=pkg.content.data.copy() if full else None,
        write_volume=U.data.copy() if full else None,
    )

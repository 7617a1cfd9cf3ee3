"""Seeded generators for the four diagnostic toys.

Every batch is a pure function of ``(spec, batch_index)``: the generator
draws from a child stream named after the task and the batch index, so
batches can be produced in any order and from any thread.

Token layouts (continuous features unless noted):

occlusion
    F frames of ``1 + P*P`` tokens.  Each frame opens with the occluder
    token ``[is_occ_token, has_occluder, r_lo, r_hi, c_lo, c_hi]`` and then
    lists the patches row-major as ``[ball, dx, dy, occluder, row(P), col(P)]``
    where ``dx, dy`` is the ball's offset inside its cell.  The answer is read
    at the last token.
map_building
    T observation tokens ``[bits(4), row(8), col(8), obs=1, query=0]`` then
    one query token naming a cell with ``query=1``.
coord_binding
    W write tokens ``[xyz, onehot(V), write=1, query=0]`` then Q queries
    ``[xyz, zeros(V), 0, 1]``.
no_harm
    integer ids in ``[0, V)``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import container
from .autodiff.params import child_rng
from .errors import ConfigError

TASKS = ("occlusion", "map_building", "coord_binding", "no_harm")
BATCH_MAGIC = b"TMTOYBAT"
BATCH_VERSION = 1
_MAX_TRIES = 2000


@dataclass(frozen=True)
class ToySpec:
    """One toy configuration.  Only the fields of ``task`` are consulted."""

    task: str
    batch_size: int = 64
    seed: int = 0
    # occlusion
    L: int = 4
    frames: int = 12
    patch_grid: int = 4
    speed: tuple[float, float] = (0.03, 0.10)
    # map building
    T: int = 32
    map_size: int = 8
    # coordinate binding
    W: int = 20
    sigma_noise: float = 0.1
    queries: int = 8
    # no-harm
    seq_len: int = 32
    shift: int = 1
    # value classes (binding) or vocabulary (no-harm)
    V: int = 16

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}", key="task")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", key="batch_size")
        if self.task == "occlusion" and not 0 <= self.L <= self.frames - 2:
            raise ConfigError(f"L must lie in [0, frames-2={self.frames - 2}], got {self.L}",
                              key="L")
        if self.task == "map_building" and self.T < 1:
            raise ConfigError(f"T must be >= 1, got {self.T}", key="T")
        if self.task == "coord_binding":
            if self.W < 1:
                raise ConfigError(f"W must be >= 1, got {self.W}", key="W")
            if self.sigma_noise < 0:
                raise ConfigError("sigma_noise must be >= 0", key="sigma_noise")
            if self.queries < 1:
                raise ConfigError("queries must be >= 1", key="queries")
        if self.task == "no_harm":
            if self.seq_len < 2:
                raise ConfigError(f"seq_len must be >= 2, got {self.seq_len}", key="seq_len")
            if not 0 <= self.shift < self.seq_len:
                raise ConfigError("shift must lie in [0, seq_len)", key="shift")
        if self.V < 2:
            raise ConfigError("V must be >= 2", key="V")

    @property
    def n_classes(self) -> int:
        return {"occlusion": 4, "map_building": 2}.get(self.task, self.V)

    @property
    def seq_len_total(self) -> int:
        return {
            "occlusion": self.frames * (1 + self.patch_grid ** 2),
            "map_building": self.T + 1,
            "coord_binding": self.W + self.queries,
            "no_harm": self.seq_len,
        }[self.task]

    @property
    def feature_dim(self) -> int | None:
        return {
            "occlusion": 6 + 2 * self.patch_grid,
            "map_building": 4 + 2 * self.map_size + 2,
            "coord_binding": 3 + self.V + 2,
            "no_harm": None,
        }[self.task]

    @property
    def frame_size(self) -> int:
        """Tokens sharing one frame; attention is bidirectional inside it."""
        return 1 + self.patch_grid ** 2 if self.task == "occlusion" else 1

    def sweep_value(self):
        return {"occlusion": self.L, "map_building": self.T,
                "coord_binding": (self.W, self.sigma_noise), "no_harm": self.seq_len}[self.task]

    def relevant(self) -> dict:
        """The fields that affect this task's batches."""
        keys = {"occlusion": ("L", "frames", "patch_grid", "speed"),
                "map_building": ("T", "map_size"),
                "coord_binding": ("W", "sigma_noise", "queries", "V"),
                "no_harm": ("seq_len", "shift", "V")}[self.task]
        d = {"task": self.task, "batch_size": self.batch_size, "seed": self.seed}
        d.update({k: getattr(self, k) for k in keys})
        if "speed" in d:
            d["speed"] = list(d["speed"])
        return d

    def to_dict(self) -> dict:
        d = asdict(self)
        d["speed"] = list(self.speed)
        return d

    def with_(self, **changes) -> "ToySpec":
        return replace(self, **changes)


@dataclass
class ToyBatch:
    tokens: np.ndarray
    targets: np.ndarray
    answer_positions: np.ndarray
    n_classes: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.targets.min(initial=0) < 0 or self.targets.max(initial=0) >= self.n_classes:
            raise ValueError("targets outside [0, n_classes)")
        N = self.tokens.shape[1]
        if self.answer_positions.min(initial=0) < 0 or self.answer_positions.max(initial=0) >= N:
            raise ValueError("answer_positions outside the sequence")

    @property
    def batch_size(self) -> int:
        return self.tokens.shape[0]

    def dense_targets(self) -> np.ndarray:
        """(B, N) labels with -1 wherever no loss applies."""
        dense = np.full(self.tokens.shape[:2], -1, dtype=np.int64)
        dense[:, self.answer_positions] = self.targets
        return dense


def _rng(spec: ToySpec, batch_index: int) -> np.random.Generator:
    return child_rng(spec.seed, f"{spec.task}/batch/{int(batch_index)}")


# --------------------------------------------------------------------------
# occlusion
# --------------------------------------------------------------------------
def fold_unit(u: np.ndarray) -> np.ndarray:
    """Reflect an unbounded coordinate back into [0, 1] (walls at 0 and 1)."""
    m = np.mod(u, 2.0)
    return np.where(m > 1.0, 2.0 - m, m)


def quadrant(pos: np.ndarray) -> np.ndarray:
    """``2*(y > 0.5) + (x > 0.5)`` for positions (..., 2) ordered (x, y)."""
    return 2 * (pos[..., 1] > 0.5).astype(np.int64) + (pos[..., 0] > 0.5).astype(np.int64)


def _cells(pos: np.ndarray, P: int) -> tuple[np.ndarray, np.ndarray]:
    col = np.minimum((pos[..., 0] * P).astype(np.int64), P - 1)
    row = np.minimum((pos[..., 1] * P).astype(np.int64), P - 1)
    return row, col


def occlusion_window(spec: ToySpec) -> tuple[int, int]:
    """Frames [start, stop) in which the ball is always hidden."""
    F, L = spec.frames, spec.L
    return F - 1 - L, F - 1


def gen_occlusion(L: int, spec: ToySpec, batch_index: int = 0) -> ToyBatch:
    """Bouncing ball hidden for ``L`` frames before the final one.

    The occluder is the smallest cell rectangle covering the ball during the
    hidden window and in the final frame, so the final frame is occluded
    whenever ``L > 0``.  Outside the window the ball is also hidden while it
    sits under the occluder.  Episodes are redrawn until the (up to) three
    frames just before the window show the ball, which is what a physics
    oracle needs to recover the velocity.
    """
    spec = spec.with_(L=L) if spec.L != L else spec
    rng = _rng(spec, batch_index)
    B, F, P = spec.batch_size, spec.frames, spec.patch_grid
    start, stop = occlusion_window(spec)
    need = min(3, start)
    t = np.arange(F)

    pos = np.empty((B, F, 2))
    box = np.zeros((B, 4), dtype=np.int64)     # r_lo, r_hi, c_lo, c_hi (inclusive)
    has_occ = np.zeros(B, dtype=bool)
    visible = np.ones((B, F), dtype=bool)
    todo = np.arange(B)
    for _ in range(_MAX_TRIES):
        n = todo.size
        p0 = rng.uniform(0.0, 1.0, size=(n, 2))
        angle = rng.uniform(0.0, 2 * np.pi, size=n)
        speed = rng.uniform(*spec.speed, size=n)
        vel = speed[:, None] * np.stack([np.cos(angle), np.sin(angle)], axis=1)
        traj = fold_unit(p0[:, None, :] + vel[:, None, :] * t[None, :, None])
        row, col = _cells(traj, P)
        vis = np.ones((n, F), dtype=bool)
        bx = np.zeros((n, 4), dtype=np.int64)
        if L > 0:
            hidden = slice(start, F)
            bx = np.stack([row[:, hidden].min(1), row[:, hidden].max(1),
                           col[:, hidden].min(1), col[:, hidden].max(1)], axis=1)
            under = ((row >= bx[:, :1]) & (row <= bx[:, 1:2])
                     & (col >= bx[:, 2:3]) & (col <= bx[:, 3:4]))
            vis = ~under
            vis[:, start:] = False
        ok = vis[:, start - need:start].all(axis=1) if need else np.ones(n, dtype=bool)
        idx = todo[ok]
        pos[idx], box[idx], visible[idx] = traj[ok], bx[ok], vis[ok]
        has_occ[idx] = L > 0
        todo = todo[~ok]
        if todo.size == 0:
            break
    else:
        raise ConfigError("could not draw occlusion episodes with enough visible frames", key="L")

    row, col = _cells(pos, P)
    feat = np.zeros((B, F, 1 + P * P, 6 + 2 * P))
    # occluder token
    feat[:, :, 0, 0] = 1.0
    feat[:, :, 0, 1] = has_occ[:, None]
    feat[:, :, 0, 2:6] = (box / max(P - 1, 1) * has_occ[:, None])[:, None, :]
    # patch tokens
    r_idx, c_idx = np.divmod(np.arange(P * P), P)
    patches = feat[:, :, 1:]
    for k in range(P * P):
        patches[:, :, k, 6 + r_idx[k]] = 1.0
        patches[:, :, k, 6 + P + c_idx[k]] = 1.0
    in_box = ((r_idx[None, :] >= box[:, :1]) & (r_idx[None, :] <= box[:, 1:2])
              & (c_idx[None, :] >= box[:, 2:3]) & (c_idx[None, :] <= box[:, 3:4])
              & has_occ[:, None])
    patches[..., 3] = in_box[:, None, :]
    b_i, f_i = np.nonzero(visible)
    k_i = row[b_i, f_i] * P + col[b_i, f_i]
    patches[b_i, f_i, k_i, 0] = 1.0
    patches[b_i, f_i, k_i, 1] = pos[b_i, f_i, 0] * P - col[b_i, f_i]
    patches[b_i, f_i, k_i, 2] = pos[b_i, f_i, 1] * P - row[b_i, f_i]
    tokens = feat.reshape(B, F * (1 + P * P), -1)
    targets = quadrant(pos[:, -1])[:, None]
    meta = {"positions": pos, "visible": visible, "window": (start, stop), "occluder": box,
            "has_occluder": has_occ}
    return ToyBatch(tokens, targets, np.array([tokens.shape[1] - 1]), 4, meta)


# --------------------------------------------------------------------------
# map building
# --------------------------------------------------------------------------
_MOVES = np.array([[-1, 0], [1, 0], [0, -1], [0, 1]])


def gen_map(T: int, spec: ToySpec, batch_index: int = 0) -> ToyBatch:
    """2x2 patches of a hidden binary grid along a wraparound random walk.

    The walk starts uniformly and moves one cell up, down, left or right per
    step.  The query names a cell drawn uniformly from the observed ones.
    """
    spec = spec.with_(T=T) if spec.T != T else spec
    rng = _rng(spec, batch_index)
    B, G = spec.batch_size, spec.map_size
    grid = rng.integers(0, 2, size=(B, G, G))
    start = rng.integers(0, G, size=(B, 1, 2))
    steps = _MOVES[rng.integers(0, 4, size=(B, T - 1))]
    walk = np.concatenate([start, start + np.cumsum(steps, axis=1)], axis=1) % G  # (B,T,2)

    offsets = np.array([[0, 0], [0, 1], [1, 0], [1, 1]])
    cells = (walk[:, :, None, :] + offsets[None, None]) % G                  # (B,T,4,2)
    b = np.arange(B)[:, None, None]
    bits = grid[b, cells[..., 0], cells[..., 1]]                              # (B,T,4)

    seen = np.zeros((B, G * G), dtype=bool)
    flat = cells[..., 0] * G + cells[..., 1]
    seen[np.repeat(np.arange(B), T * 4), flat.reshape(-1)] = True
    # uniform choice among observed cells
    scores = np.where(seen, rng.random((B, G * G)), -1.0)
    q = scores.argmax(axis=1)
    q_row, q_col = np.divmod(q, G)

    D = 4 + 2 * G + 2
    tokens = np.zeros((B, T + 1, D))
    tokens[:, :T, :4] = bits
    bb, tt = np.meshgrid(np.arange(B), np.arange(T), indexing="ij")
    tokens[bb, tt, 4 + walk[..., 0]] = 1.0
    tokens[bb, tt, 4 + G + walk[..., 1]] = 1.0
    tokens[:, :T, -2] = 1.0
    tokens[np.arange(B), T, 4 + q_row] = 1.0
    tokens[np.arange(B), T, 4 + G + q_col] = 1.0
    tokens[:, T, -1] = 1.0
    targets = grid[np.arange(B), q_row, q_col][:, None].astype(np.int64)
    meta = {"grid": grid, "walk": walk, "query": np.stack([q_row, q_col], axis=1),
            "coverage": seen.mean(axis=1)}
    return ToyBatch(tokens, targets, np.array([T]), 2, meta)


# --------------------------------------------------------------------------
# coordinate binding
# --------------------------------------------------------------------------
def _separated_points(rng, B: int, W: int, min_dist: float) -> np.ndarray:
    pts = np.empty((B, W, 3))
    for k in range(W):
        todo = np.arange(B)
        for _ in range(_MAX_TRIES):
            cand = rng.uniform(-1.0, 1.0, size=(todo.size, 3))
            if k and min_dist > 0:
                d = np.linalg.norm(pts[todo, :k] - cand[:, None, :], axis=-1).min(axis=1)
                ok = d >= min_dist
            else:
                ok = np.ones(todo.size, dtype=bool)
            pts[todo[ok], k] = cand[ok]
            todo = todo[~ok]
            if todo.size == 0:
                break
        else:
            raise ConfigError(
                f"cannot place {W} points {min_dist:.3g} apart in [-1,1]^3; "
                "reduce W or sigma_noise", key="W")
    return pts


def _sorted_distances(q: np.ndarray, pts: np.ndarray) -> np.ndarray:
    return np.sort(np.linalg.norm(pts - q[:, None, :], axis=-1), axis=1)


def gen_binding(W: int, sigma_noise: float, spec: ToySpec, batch_index: int = 0) -> ToyBatch:
    """W writes of value classes at 3D coordinates, then Q noisy queries.

    Each query perturbs a randomly chosen write coordinate and is redrawn
    until the nearest and second-nearest writes differ in distance by at
    least ``0.5 * sigma_noise``.  The label is the nearest write's value.
    """
    if (W, sigma_noise) != (spec.W, spec.sigma_noise):
        spec = spec.with_(W=W, sigma_noise=sigma_noise)
    rng = _rng(spec, batch_index)
    B, Q, V = spec.batch_size, spec.queries, spec.V
    pts = _separated_points(rng, B, W, 2.5 * sigma_noise)
    values = rng.integers(0, V, size=(B, W))

    queries = np.empty((B, Q, 3))
    targets = np.empty((B, Q), dtype=np.int64)
    for j in range(Q):
        todo = np.arange(B)
        for _ in range(_MAX_TRIES):
            src = rng.integers(0, W, size=todo.size)
            q = np.clip(pts[todo, src] + rng.normal(0.0, 1.0, size=(todo.size, 3)) * sigma_noise,
                        -1.0, 1.0)
            d = np.linalg.norm(pts[todo] - q[:, None, :], axis=-1)
            if W > 1:
                two = np.sort(d, axis=1)[:, :2]
                ok = two[:, 1] - two[:, 0] >= 0.5 * sigma_noise
            else:
                ok = np.ones(todo.size, dtype=bool)
            hit = todo[ok]
            queries[hit, j] = q[ok]
            targets[hit, j] = values[hit, d[ok].argmin(axis=1)]
            todo = todo[~ok]
            if todo.size == 0:
                break
        else:
            raise ConfigError("cannot draw unambiguous queries; reduce sigma_noise",
                              key="sigma_noise")

    D = 3 + V + 2
    tokens = np.zeros((B, W + Q, D))
    tokens[:, :W, :3] = pts
    bb, ww = np.meshgrid(np.arange(B), np.arange(W), indexing="ij")
    tokens[bb, ww, 3 + values] = 1.0
    tokens[:, :W, -2] = 1.0
    tokens[:, W:, :3] = queries
    tokens[:, W:, -1] = 1.0
    meta = {"write_coords": pts, "values": values, "query_coords": queries}
    return ToyBatch(tokens, targets, np.arange(W, W + Q), V, meta)


# --------------------------------------------------------------------------
# no-harm
# --------------------------------------------------------------------------
def gen_noharm(seq_len: int, spec: ToySpec, batch_index: int = 0) -> ToyBatch:
    """Random ids; the label at position i is the id at i - shift."""
    spec = spec.with_(seq_len=seq_len) if spec.seq_len != seq_len else spec
    rng = _rng(spec, batch_index)
    s = spec.shift
    ids = rng.integers(0, spec.V, size=(spec.batch_size, seq_len))
    targets = ids[:, : seq_len - s]
    return ToyBatch(ids, targets.astype(np.int64), np.arange(s, seq_len), spec.V,
                    {"shift": s})


def generate(spec: ToySpec, batch_index: int = 0) -> ToyBatch:
    """Batch ``batch_index`` of ``spec``'s stream."""
    if spec.task == "occlusion":
        return gen_occlusion(spec.L, spec, batch_index)
    if spec.task == "map_building":
        return gen_map(spec.T, spec, batch_index)
    if spec.task == "coord_binding":
        return gen_binding(spec.W, spec.sigma_noise, spec, batch_index)
    return gen_noharm(spec.seq_len, spec, batch_index)


# --------------------------------------------------------------------------
# batch dumps
# --------------------------------------------------------------------------
def dump_batch(batch: ToyBatch, spec: ToySpec, batch_index: int, path) -> None:
    """Write a batch to the binary container for cross-implementation checks."""
    arrays = {"tokens": batch.tokens, "targets": batch.targets,
              "answer_positions": batch.answer_positions}
    meta = {"spec": spec.relevant(), "batch_index": int(batch_index),
            "n_classes": batch.n_classes,
            "shapes": {k: list(v.shape) for k, v in arrays.items()}}
    container.write(path, BATCH_MAGIC, BATCH_VERSION, meta, arrays)


def load_batch(path) -> tuple[ToyBatch, dict]:
    meta, arrays = container.read(path, BATCH_MAGIC, BATCH_VERSION)
    batch = ToyBatch(arrays["tokens"], arrays["targets"], arrays["answer_positions"],
                     meta["n_classes"], {})
    return batch, meta


__all__ = ["BATCH_MAGIC", "TASKS", "ToyBatch", "ToySpec", "dump_batch", "fold_unit",
           "gen_binding", "gen_map", "gen_noharm", "gen_occlusion", "generate", "load_batch",
           "occlusion_window", "quadrant"]

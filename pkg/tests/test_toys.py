import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tensor_memory.errors import ConfigError, SnapshotFormatError
from tensor_memory.toys import (ToySpec, dump_batch, fold_unit, generate, load_batch,
                                occlusion_window, quadrant)


def decode_ball(frame_tokens, P):
    """(x, y) of the ball from one frame's patch tokens, or None when hidden."""
    patches = frame_tokens[1:]
    hits = np.nonzero(patches[:, 0] > 0.5)[0]
    if hits.size == 0:
        return None
    k = hits[0]
    row, col = divmod(int(k), P)
    return np.array([(col + patches[k, 1]) / P, (row + patches[k, 2]) / P])


def unfold_velocity(p0, p1, p2):
    """Per-axis velocity consistent with three folded positions one frame apart."""
    v = np.empty(2)
    for a in range(2):
        cands = [p1[a] - p0[a], -p1[a] - p0[a], 2.0 - p1[a] - p0[a]]
        errs = [abs(fold_unit(np.array(p0[a] + c))[()] - p1[a])
                + abs(fold_unit(np.array(p0[a] + 2 * c))[()] - p2[a]) for c in cands]
        v[a] = cands[int(np.argmin(errs))]
    return v


def physics_oracle(batch, spec):
    """Predict the final quadrant from the three frames just before the hidden window."""
    P, F = spec.patch_grid, spec.frames
    frames = batch.tokens.reshape(batch.batch_size, F, 1 + P * P, -1)
    start, _ = occlusion_window(spec)
    preds = []
    for b in range(batch.batch_size):
        a = start - 3
        p = [decode_ball(frames[b, a + i], P) for i in range(3)]
        v = unfold_velocity(*p)
        final = fold_unit(p[0] + v * (F - 1 - a))
        preds.append(int(quadrant(final)))
    return np.array(preds)


class TestSpec:
    def test_unknown_task(self):
        with pytest.raises(ConfigError):
            ToySpec(task="maze")

    def test_layout(self):
        occ = ToySpec(task="occlusion")
        assert occ.frame_size == 17 and occ.seq_len_total == 12 * 17 and occ.n_classes == 4
        assert ToySpec(task="coord_binding").feature_dim == 3 + 16 + 2
        assert ToySpec(task="no_harm").feature_dim is None


class TestDeterminism:
    @pytest.mark.parametrize("task", ["occlusion", "map_building", "coord_binding", "no_harm"])
    def test_same_index_same_batch(self, task):
        spec = ToySpec(task=task, batch_size=8, seed=5)
        a, b = generate(spec, 3), generate(spec, 3)
        assert a.tokens.tobytes() == b.tokens.tobytes()
        assert a.targets.tobytes() == b.targets.tobytes()
        c = generate(spec, 4)
        assert a.tokens.tobytes() != c.tokens.tobytes()

    @pytest.mark.parametrize("task", ["occlusion", "map_building", "coord_binding", "no_harm"])
    def test_targets_and_positions_valid(self, task):
        batch = generate(ToySpec(task=task, batch_size=16), 0)
        assert batch.targets.min() >= 0 and batch.targets.max() < batch.n_classes
        pos = batch.answer_positions
        assert pos.min() >= 0 and pos.max() < batch.tokens.shape[1]
        dense = batch.dense_targets()
        assert (dense >= 0).sum() == batch.targets.size

    def test_dump_round_trip(self, tmp_path):
        spec = ToySpec(task="coord_binding", batch_size=4)
        batch = generate(spec, 2)
        dump_batch(batch, spec, 2, tmp_path / "b.bin")
        back, meta = load_batch(tmp_path / "b.bin")
        assert back.tokens.tobytes() == batch.tokens.tobytes()
        assert meta["batch_index"] == 2

    def test_dump_wrong_magic(self, tmp_path):
        path = tmp_path / "b.bin"
        path.write_bytes(b"NOTMAGIC" + b"\0" * 64)
        with pytest.raises(SnapshotFormatError):
            load_batch(path)


class TestBalance:
    def test_no_harm_uniform(self):
        spec = ToySpec(task="no_harm", batch_size=320, seq_len=32)
        labels = np.concatenate([generate(spec, i).targets.ravel() for i in range(1)])
        assert labels.size >= 9920
        freq = np.bincount(labels, minlength=16) / labels.size
        assert np.all(np.abs(freq - 1 / 16) < 0.02)

    def test_map_uniform(self):
        spec = ToySpec(task="map_building", batch_size=1000)
        labels = np.concatenate([generate(spec, i).targets.ravel() for i in range(10)])
        freq = np.bincount(labels, minlength=2) / labels.size
        assert np.all(np.abs(freq - 0.5) < 0.02)


class TestOcclusion:
    def test_quadrant_convention(self):
        assert quadrant(np.array([0.9, 0.9])) == 3
        assert quadrant(np.array([0.9, 0.1])) == 1
        assert quadrant(np.array([0.1, 0.9])) == 2

    @given(st.floats(-5, 5))
    def test_fold_stays_in_unit(self, u):
        assert 0.0 <= fold_unit(np.array(u)) <= 1.0

    def test_no_occlusion_last_frame_oracle(self):
        spec = ToySpec(task="occlusion", L=0, batch_size=64)
        batch = generate(spec, 0)
        P = spec.patch_grid
        last = batch.tokens.reshape(64, spec.frames, 1 + P * P, -1)[:, -1]
        preds = np.array([quadrant(decode_ball(f, P)) for f in last])
        assert np.array_equal(preds, batch.targets[:, 0])

    @pytest.mark.parametrize("L", [1, 2, 4])
    def test_physics_oracle_solves(self, L):
        spec = ToySpec(task="occlusion", L=L, batch_size=100)
        for i in range(3):
            batch = generate(spec, i)
            assert np.array_equal(physics_oracle(batch, spec), batch.targets[:, 0])

    @pytest.mark.parametrize("L", [4, 8])
    def test_ball_hidden_in_window_and_final_frame(self, L):
        spec = ToySpec(task="occlusion", L=L, batch_size=32)
        batch = generate(spec, 0)
        start, _ = occlusion_window(spec)
        P = spec.patch_grid
        frames = batch.tokens.reshape(32, spec.frames, 1 + P * P, -1)
        assert np.all(frames[:, start:, 1:, 0] == 0)
        assert not batch.metadata["visible"][:, start:].any()


class TestMap:
    def test_perfect_memory_oracle(self):
        spec = ToySpec(task="map_building", T=32, batch_size=64)
        batch = generate(spec, 0)
        G = spec.map_size
        tok = batch.tokens
        for b in range(64):
            known = {}
            for t in range(spec.T):
                r = int(np.argmax(tok[b, t, 4:4 + G]))
                c = int(np.argmax(tok[b, t, 4 + G:4 + 2 * G]))
                for k, (dr, dc) in enumerate([(0, 0), (0, 1), (1, 0), (1, 1)]):
                    known[((r + dr) % G, (c + dc) % G)] = int(tok[b, t, k])
            q = (int(np.argmax(tok[b, -1, 4:4 + G])), int(np.argmax(tok[b, -1, 4 + G:4 + 2 * G])))
            assert known[q] == batch.targets[b, 0]

    def test_long_horizon_covers_more(self):
        short = generate(ToySpec(task="map_building", T=8, batch_size=64), 0)
        long = generate(ToySpec(task="map_building", T=128, batch_size=64), 0)
        assert long.metadata["coverage"].mean() > short.metadata["coverage"].mean()


class TestBinding:
    @pytest.mark.parametrize("W,sigma", [(5, 0.05), (20, 0.1), (100, 0.05)])
    def test_unambiguous_queries(self, W, sigma):
        spec = ToySpec(task="coord_binding", W=W, sigma_noise=sigma, batch_size=16)
        batch = generate(spec, 0)
        pts, q = batch.metadata["write_coords"], batch.metadata["query_coords"]
        d = np.sort(np.linalg.norm(pts[:, None] - q[:, :, None], axis=-1), axis=-1)
        assert np.all(d[..., 1] - d[..., 0] >= 0.5 * sigma - 1e-12)
        nearest = np.linalg.norm(pts[:, None] - q[:, :, None], axis=-1).argmin(axis=-1)
        vals = np.take_along_axis(batch.metadata["values"], nearest, axis=1)
        assert np.array_equal(vals, batch.targets)

    def test_single_write(self):
        batch = generate(ToySpec(task="coord_binding", W=1, batch_size=8), 0)
        assert np.all(batch.targets == batch.metadata["values"][:, :1])

    def test_chance_level(self):
        assert ToySpec(task="coord_binding").n_classes == 16


class TestNoHarm:
    def test_shift_targets(self):
        batch = generate(ToySpec(task="no_harm", batch_size=4, seq_len=10), 0)
        assert np.array_equal(batch.targets, batch.tokens[:, :9])
        assert batch.answer_positions.tolist() == list(range(1, 10))

    def test_zero_shift_is_identity(self):
        batch = generate(ToySpec(task="no_harm", batch_size=4, seq_len=10, shift=0), 0)
        assert np.array_equal(batch.targets, batch.tokens)

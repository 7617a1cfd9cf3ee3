import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from conftest import primitive_grad_error
from tensor_memory.autodiff import (Graph, ParamStore, Tensor, finite_checks, grad_check,
                                    grad_check_report, no_grad, ops)
from tensor_memory.errors import DimensionError, NumericError, UnsupportedKernelError

GRAD_TOL = 1e-5


# --------------------------------------------------------------------------
# naive oracles
# --------------------------------------------------------------------------
def naive_matmul(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


def naive_depthwise(x, kernel):
    B, C, D, H, W = x.shape
    kd, kh, kw = kernel.shape[1:]
    out = np.zeros_like(x)
    for b in range(B):
        for c in range(C):
            for d in range(D):
                for h in range(H):
                    for w in range(W):
                        acc = 0.0
                        for i in range(kd):
                            for j in range(kh):
                                for k in range(kw):
                                    dd = d + i - kd // 2
                                    hh = h + j - kh // 2
                                    ww = w + k - kw // 2
                                    if 0 <= dd < D and 0 <= hh < H and 0 <= ww < W:
                                        acc += kernel[c, i, j, k] * x[b, c, dd, hh, ww]
                        out[b, c, d, h, w] = acc
    return out


def naive_pointwise(x, w, bias):
    B, Cin, D, H, W = x.shape
    out = np.zeros((B, w.shape[0], D, H, W))
    for b in range(B):
        for o in range(w.shape[0]):
            for i in range(Cin):
                out[b, o] += w[o, i] * x[b, i]
            out[b, o] += bias[o]
    return out


KERNEL_SHAPES = [(3, 1, 1), (1, 3, 1), (1, 1, 3)]


class TestMatmul:
    def test_identity_times_vector(self):
        v = np.array([1.0, -2.0, 3.5])
        assert np.array_equal(ops.matmul(np.eye(3), v).data, v)

    def test_identity_right(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(ops.matmul(a, np.eye(2)).data, a)

    def test_triple_loop_oracle(self, rng):
        a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 2))
        np.testing.assert_allclose(ops.matmul(a, b).data, naive_matmul(a, b), atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ops.matmul(np.ones((2, 3)), np.ones((2, 3)))


class TestElementwise:
    def test_sigmoid_zero(self):
        assert ops.sigmoid(np.array(0.0)).data == 0.5

    def test_softplus_zero(self):
        assert ops.softplus(np.array(0.0)).data == pytest.approx(math.log(2.0), abs=1e-15)

    def test_tanh_gradient_at_zero(self):
        x = Tensor(np.array([0.0]), requires_grad=True)
        ops.sum(ops.tanh(x)).backward()
        assert x.grad[0] == pytest.approx(1.0, abs=1e-15)
        fd = (math.tanh(1e-6) - math.tanh(-1e-6)) / 2e-6
        assert x.grad[0] == pytest.approx(fd, rel=1e-9)

    def test_dispatch_unknown(self):
        with pytest.raises(ValueError):
            ops.elementwise("cosh", np.ones(2))

    def test_softplus_is_stable_for_large_inputs(self):
        out = ops.softplus(np.array([-800.0, 800.0])).data
        assert out[0] == pytest.approx(0.0, abs=1e-300)
        assert out[1] == 800.0

    @given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=4),
                      elements=st.floats(-5, 5)),
           st.sampled_from(["add", "sub", "mul"]))
    def test_broadcast_matches_materialized(self, a, op):
        b = np.linspace(-1.0, 1.0, a.shape[-1])
        fn = getattr(ops, op)
        got = fn(a, b).data
        wide = np.broadcast_to(b, a.shape).copy()
        assert np.array_equal(got, fn(a, wide).data)
        assert np.array_equal(got, {"add": np.add, "sub": np.subtract, "mul": np.multiply}[op](a, b))

    def test_broadcast_mismatch(self):
        with pytest.raises(DimensionError):
            ops.add(np.ones((2, 3)), np.ones(4))


def _rand(rng, shape, lo=None):
    x = rng.normal(size=shape)
    return np.abs(x) + 0.5 if lo == "pos" else x


UNARY = ["tanh", "sigmoid", "softplus", "gelu", "exp", "relu", "square", "neg"]
POSITIVE = ["log", "sqrt"]
SHAPES = [(3,), (2, 4), (2, 3, 2)]


class TestPrimitiveGradients:
    """Reverse mode vs central differences on three shapes per primitive."""

    @pytest.mark.parametrize("shape", SHAPES)
    @pytest.mark.parametrize("name", UNARY + POSITIVE)
    def test_unary(self, name, shape, rng):
        x = _rand(rng, shape, "pos" if name in POSITIVE else None)
        if name == "relu":
            x = np.where(np.abs(x) < 0.1, 0.3, x)   # stay off the kink
        report = primitive_grad_error(getattr(ops, name), [x])
        assert report.max_rel_error < GRAD_TOL

    @pytest.mark.parametrize("shapes", [((3,), (3,)), ((2, 4), (4,)), ((2, 3, 2), (3, 1))])
    @pytest.mark.parametrize("name", ["add", "sub", "mul", "div"])
    def test_binary_broadcast(self, name, shapes, rng):
        a = _rand(rng, shapes[0])
        b = _rand(rng, shapes[1], "pos" if name == "div" else None)
        assert primitive_grad_error(getattr(ops, name), [a, b]).max_rel_error < GRAD_TOL

    @pytest.mark.parametrize("shapes", [((3, 4), (4, 2)), ((2, 3, 4), (4, 5)), ((2, 2, 3), (2, 3, 2))])
    def test_matmul(self, shapes, rng):
        arrays = [rng.normal(size=s) for s in shapes]
        assert primitive_grad_error(ops.matmul, arrays).max_rel_error < GRAD_TOL

    @pytest.mark.parametrize("shape", [(2, 3), (3, 4), (2, 2, 5)])
    def test_linear(self, shape, rng):
        x, w, b = rng.normal(size=shape), rng.normal(size=(3, shape[-1])), rng.normal(size=3)
        assert primitive_grad_error(ops.linear, [x, w, b]).max_rel_error < GRAD_TOL

    @pytest.mark.parametrize("shape,axis", [((3,), None), ((2, 4), 1), ((2, 3, 2), (0, 2))])
    def test_reductions(self, shape, axis, rng):
        x = rng.normal(size=shape)
        for fn in (ops.sum, ops.mean):
            report = primitive_grad_error(lambda t: fn(t, axis=axis), [x])
            assert report.max_rel_error < GRAD_TOL

    @pytest.mark.parametrize("shape", [(4,), (2, 5), (2, 3, 4)])
    def test_softmax_family(self, shape, rng):
        x = rng.normal(size=shape)
        for fn in (ops.softmax, ops.log_softmax):
            assert primitive_grad_error(fn, [x]).max_rel_error < GRAD_TOL

    @pytest.mark.parametrize("shape", [(1, 4), (3, 5), (2, 3, 6)])
    def test_layer_norm(self, shape, rng):
        d = shape[-1]
        arrays = [rng.normal(size=shape), 1 + 0.1 * rng.normal(size=d), rng.normal(size=d)]
        assert primitive_grad_error(ops.layer_norm, arrays).max_rel_error < GRAD_TOL

    @pytest.mark.parametrize("shape", [(4, 3), (2, 3, 5), (1, 6, 2)])
    def test_cross_entropy(self, shape, rng):
        logits = rng.normal(size=shape)
        targets = rng.integers(0, shape[-1], size=shape[:-1])
        fn = lambda z: ops.cross_entropy(z, targets)  # noqa: E731
        assert primitive_grad_error(fn, [logits]).max_rel_error < GRAD_TOL

    @pytest.mark.parametrize("ids_shape", [(3,), (2, 4), (2, 2, 3)])
    def test_embedding(self, ids_shape, rng):
        table = rng.normal(size=(5, 3))
        ids = rng.integers(0, 5, size=ids_shape)
        report = primitive_grad_error(lambda t: ops.embedding(t, ids), [table])
        assert report.max_rel_error < GRAD_TOL

    @pytest.mark.parametrize("shape", [(3, 4), (2, 3, 4), (4, 2, 2)])
    def test_structural(self, shape, rng):
        x, y = rng.normal(size=shape), rng.normal(size=shape)
        cases = [
            lambda a: ops.reshape(a, (-1,)),
            lambda a: ops.transpose(a),
            lambda a: a[1:, ...],
            lambda a: a[np.array([0, 0, 1])],
        ]
        for fn in cases:
            assert primitive_grad_error(fn, [x]).max_rel_error < GRAD_TOL
        for fn in (lambda a, b: ops.concat([a, b], axis=0), lambda a, b: ops.stack([a, b], 1)):
            assert primitive_grad_error(fn, [x, y]).max_rel_error < GRAD_TOL

    @pytest.mark.parametrize("shape", [(1, 2, 3, 3, 3), (2, 1, 4, 3, 2), (1, 3, 2, 4, 4)])
    @pytest.mark.parametrize("kshape", KERNEL_SHAPES)
    def test_depthwise_conv3d(self, shape, kshape, rng):
        x, k = rng.normal(size=shape), rng.normal(size=(shape[1], *kshape))
        assert primitive_grad_error(ops.depthwise_conv3d, [x, k]).max_rel_error < GRAD_TOL

    @pytest.mark.parametrize("shape,cout", [((1, 2, 3, 3, 3), 3), ((2, 3, 2, 2, 4), 1),
                                            ((1, 4, 2, 3, 2), 4)])
    def test_pointwise_conv3d(self, shape, cout, rng):
        x, w, b = rng.normal(size=shape), rng.normal(size=(cout, shape[1])), rng.normal(size=cout)
        assert primitive_grad_error(ops.pointwise_conv3d, [x, w, b]).max_rel_error < GRAD_TOL

    @pytest.mark.parametrize("shape", [(1, 2, 3, 3, 3), (2, 1, 4, 3, 2), (1, 2, 2, 2, 2)])
    def test_factorized_depthwise3d(self, shape, rng):
        C = shape[1]
        arrays = [rng.normal(size=shape)] + [rng.normal(size=(C, *k)) for k in KERNEL_SHAPES]
        assert primitive_grad_error(ops.factorized_depthwise3d, arrays).max_rel_error < GRAD_TOL

    @pytest.mark.parametrize("extents", [(2, 2, 2), (3, 2, 4), (3, 3, 3)])
    def test_depthwise_operator(self, extents, rng):
        arrays = [rng.normal(size=(2, *k)) for k in KERNEL_SHAPES]
        fn = lambda a, b, c: ops.depthwise_operator(a, b, c, extents)  # noqa: E731
        assert primitive_grad_error(fn, arrays).max_rel_error < GRAD_TOL


class TestConvolutions:
    @pytest.mark.parametrize("kshape", KERNEL_SHAPES)
    def test_delta_kernel_is_identity(self, kshape, rng):
        x = rng.normal(size=(2, 3, 4, 4, 4))
        k = np.zeros((3, *kshape))
        k.reshape(3, 3)[:, 1] = 1.0
        assert np.array_equal(ops.depthwise_conv3d(x, k).data, x)

    def test_constant_input_sums_with_zero_padding(self):
        x = np.full((1, 1, 4, 4, 4), 2.5)
        out = ops.depthwise_conv3d(x, np.ones((1, 1, 1, 3))).data[0, 0]
        assert np.all(out[:, :, 1:-1] == 7.5)
        assert np.all(out[:, :, [0, -1]] == 5.0)

    def test_naive_oracle_cases(self, rng):
        for case in range(120):
            shape = (int(rng.integers(1, 3)), int(rng.integers(1, 5)),
                     *(int(v) for v in rng.integers(2, 5, size=3)))
            kshape = KERNEL_SHAPES[case % 3]
            x, k = rng.normal(size=shape), rng.normal(size=(shape[1], *kshape))
            np.testing.assert_allclose(ops.depthwise_conv3d(x, k).data, naive_depthwise(x, k),
                                       rtol=0, atol=1e-12)

    def test_factorized_equals_three_passes(self, rng):
        for _ in range(20):
            x = rng.normal(size=(2, 3, *rng.integers(2, 5, size=3)))
            ks = [rng.normal(size=(3, *s)) for s in KERNEL_SHAPES]
            chained = x
            for k in ks:
                chained = naive_depthwise(chained, k)
            np.testing.assert_allclose(ops.factorized_depthwise3d(x, *ks).data, chained,
                                       rtol=0, atol=1e-12)

    def test_operator_matches_factorized(self, rng):
        x = rng.normal(size=(2, 3, 3, 4, 2))
        ks = [rng.normal(size=(3, *s)) for s in KERNEL_SHAPES]
        A = ops.depthwise_operator(*ks, (3, 4, 2)).data
        via_a = np.einsum("cuv,bcv->bcu", A, x.reshape(2, 3, -1)).reshape(x.shape)
        np.testing.assert_allclose(via_a, ops.factorized_depthwise3d(x, *ks).data, atol=1e-12)

    def test_pointwise_identity_and_sum(self, rng):
        x = rng.normal(size=(2, 3, 2, 3, 4))
        assert np.array_equal(ops.pointwise_conv3d(x, np.eye(3)).data, x)
        y = rng.normal(size=(1, 2, 3, 3, 3))
        np.testing.assert_allclose(ops.pointwise_conv3d(y, np.ones((1, 2))).data[:, 0],
                                   y.sum(axis=1), atol=1e-15)

    def test_pointwise_oracle_cases(self, rng):
        for _ in range(120):
            B, Cin, Cout = (int(v) for v in rng.integers(1, 5, size=3))
            x = rng.normal(size=(B, Cin, *rng.integers(1, 5, size=3)))
            w, b = rng.normal(size=(Cout, Cin)), rng.normal(size=Cout)
            got = ops.pointwise_conv3d(x, w, b).data
            np.testing.assert_allclose(got, naive_pointwise(x, w, b), rtol=0, atol=1e-12)
            mm = (w @ x.reshape(B, Cin, -1)).reshape(got.shape) + b[None, :, None, None, None]
            np.testing.assert_allclose(got, mm, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("kshape", [(3, 3, 1), (1, 1, 1), (5, 1, 1), (1, 2, 1)])
    def test_non_axis_aligned_kernel_rejected(self, kshape):
        with pytest.raises(UnsupportedKernelError):
            ops.depthwise_conv3d(np.ones((1, 1, 3, 3, 3)), np.ones((1, *kshape)))

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            ops.depthwise_conv3d(np.ones((1, 2, 3, 3, 3)), np.ones((3, 3, 1, 1)))
        with pytest.raises(DimensionError):
            ops.pointwise_conv3d(np.ones((1, 2, 3, 3, 3)), np.ones((3, 4)))


class TestGraph:
    def _graph(self, rng):
        a = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=3), requires_grad=True)
        h = ops.tanh(ops.add(ops.matmul(a, b), b))
        return a, b, ops.sum(ops.mul(h, h))

    def test_topological_order(self, rng):
        *_, loss = self._graph(rng)
        graph = Graph.from_output(loss)
        position = {id(out): i for i, (_, out) in enumerate(graph.entries)}
        for i, (node, _) in enumerate(graph.entries):
            for inp in node.inputs:
                if inp.node is not None:
                    assert position[id(inp)] < i
        assert len({id(out) for _, out in graph.entries}) == len(graph)

    def test_backward_purity(self, rng):
        a, b, loss = self._graph(rng)
        graph = Graph.from_output(loss)
        before = [out.data.copy() for _, out in graph.entries]
        loss.backward()
        for snap, (_, out) in zip(before, graph.entries):
            assert np.array_equal(snap, out.data)

    def test_grad_shape_matches_data(self, rng):
        a, b, loss = self._graph(rng)
        loss.backward()
        assert a.grad.shape == a.shape and b.grad.shape == b.shape

    def test_shared_input_accumulates(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        ops.sum(ops.add(ops.mul(x, x), x)).backward()
        assert x.grad[0] == 7.0

    def test_non_finite_is_an_error(self):
        with np.errstate(divide="ignore"), pytest.raises(NumericError):
            ops.log(np.array([0.0]))
        with np.errstate(divide="ignore"), finite_checks(False):
            assert np.isneginf(ops.log(np.array([0.0])).data[0])

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with no_grad():
            y = ops.mul(x, 2.0)
        assert y.node is None and not y.requires_grad

    def test_backward_needs_scalar(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with pytest.raises(DimensionError):
            ops.mul(x, 2.0).backward()


class TestGradCheck:
    def test_quadratic(self):
        params = ParamStore()
        params.add("theta", np.array([3.0]))
        report = grad_check_report(lambda p: ops.sum(ops.square(p["theta"])), params)
        assert report.max_rel_error < 1e-9

    def test_constant(self):
        params = ParamStore()
        params.add("theta", np.array([3.0]))
        assert grad_check(lambda p: ops.sum(ops.mul(p["theta"], 0.0)), params) == 0.0

    def test_wrong_adjoint_detected(self, monkeypatch):
        from tensor_memory.autodiff import tensor as tensor_mod

        def bad_tanh(a):
            y = np.tanh(a.data)
            return tensor_mod.record("tanh", y, (a,), lambda g: (g * (1.0 - y),))

        monkeypatch.setattr(ops, "tanh", bad_tanh)
        params = ParamStore()
        params.add("w", np.array([0.3, -0.7]))
        report = grad_check_report(lambda p: ops.sum(ops.tanh(p["w"])), params)
        assert report.max_rel_error > 1e-2 and report.worst_param == "w"

    def test_eps_range(self):
        params = ParamStore()
        params.add("w", np.ones(1))
        with pytest.raises(ValueError):
            grad_check(lambda p: ops.sum(p["w"]), params, eps=1e-2)


class TestParamStore:
    def test_unique_names(self):
        p = ParamStore()
        p.add("w", np.ones(2))
        with pytest.raises(Exception):
            p.add("w", np.ones(2))

    def test_count_and_state_round_trip(self):
        p = ParamStore()
        p.add("a.w", np.ones((2, 3)))
        p.add("b", np.zeros(4))
        assert p.count() == 10 and p.count("a.") == 6
        state = p.state_dict()
        p["b"].data += 1
        p.load_state_dict(state)
        assert np.array_equal(p["b"].data, np.zeros(4))

"""Differentiable primitives.

Each function computes its forward value with ``numpy`` and registers an
adjoint closure through :func:`record`.  Adjoints never write into forward
arrays, so running backward leaves every forward value untouched.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from ..errors import DimensionError, UnsupportedKernelError
from .tensor import Scatter, Tensor, record

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _wrap(b, a)
    b = _wrap(b)
    return _wrap(a, b), b


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# --------------------------------------------------------------------------
# binary arithmetic
# --------------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return record("add", a.data + b.data, (a, b),
                  lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return record("sub", a.data - b.data, (a, b),
                  lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def adjoint(g):
        return (unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return record("mul", ad * bd, (a, b), adjoint)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def adjoint(g):
        return (unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return record("div", out, (a, b), adjoint)


def neg(a) -> Tensor:
    a = _wrap(a)
    return record("neg", -a.data, (a,), lambda g: (-g,))


# --------------------------------------------------------------------------
# unary elementwise
# --------------------------------------------------------------------------
def square(a) -> Tensor:
    a = _wrap(a)
    ad = a.data
    return record("square", ad * ad, (a,), lambda g: (2.0 * ad * g,))


def sqrt(a) -> Tensor:
    a = _wrap(a)
    out = np.sqrt(a.data)
    return record("sqrt", out, (a,), lambda g: (0.5 * g / out,))


def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)
    return record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _wrap(a)
    ad = a.data
    return record("log", np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)
    return record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    # tanh form saturates cleanly at both ends without overflow
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus_np(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    out = sigmoid_np(a.data)
    return record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    a = _wrap(a)
    ad = a.data
    return record("softplus", softplus_np(ad), (a,), lambda g: (g * sigmoid_np(ad),))


def relu(a) -> Tensor:
    a = _wrap(a)
    ad = a.data
    return record("relu", np.maximum(ad, 0.0), (a,), lambda g: (g * (ad > 0),))


def gelu(a) -> Tensor:
    """Tanh-approximated GELU."""
    a = _wrap(a)
    x = a.data
    x2 = x * x
    inner = _SQRT_2_OVER_PI * x * (1.0 + 0.044715 * x2)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def adjoint(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return record("gelu", out, (a,), adjoint)


ELEMENTWISE = {
    "add": add, "mul": mul, "tanh": tanh, "sigmoid": sigmoid, "softplus": softplus,
    "exp": exp, "neg": neg, "square": square,
}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch one of the named elementwise primitives."""
    try:
        fn = ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}; expected one of {sorted(ELEMENTWISE)}")
    return fn(*args)


# --------------------------------------------------------------------------
# linear algebra and reductions
# --------------------------------------------------------------------------
def matmul(a, b) -> Tensor:
    """``numpy.matmul`` semantics; 1-D operands are promoted and squeezed."""
    a, b = _pair(a, b)
    if a.ndim == 0 or b.ndim == 0:
        raise DimensionError("matmul does not accept scalars")
    if a.ndim == 1:
        return reshape(matmul(reshape(a, (1, a.shape[0])), b), _drop_axis(b.shape, -2))
    if b.ndim == 1:
        return reshape(matmul(a, reshape(b, (b.shape[0], 1))), a.shape[:-1])
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul: {exc}") from None
    ad, bd = a.data, b.data

    def adjoint(g):
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return record("matmul", out, (a, b), adjoint)


def _drop_axis(shape, axis):
    shape = list(shape)
    del shape[axis]
    return tuple(shape)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as (out, in)."""
    y = matmul(x, transpose(weight, None))
    return y if bias is None else add(y, bias)


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = _wrap(a)
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def adjoint(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return record("sum", np.asarray(out), (a,), adjoint)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# --------------------------------------------------------------------------
# shape manipulation
# --------------------------------------------------------------------------
def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: {exc}") from None
    return record("reshape", out, (a,), lambda g: (g.reshape(src),))


def transpose(a, axes=None) -> Tensor:
    a = _wrap(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return record("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis
               for i in items)


def getitem(a, index) -> Tensor:
    a = _wrap(a)
    if isinstance(index, Tensor):
        index = index.data
    basic = _is_basic_index(index)
    return record("getitem", a.data[index], (a,), lambda g: (Scatter(index, g, basic),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def adjoint(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record("concat", out, tensors, adjoint)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"stack: {exc}") from None

    def adjoint(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return record("stack", out, tensors, adjoint)


# --------------------------------------------------------------------------
# normalisation, attention helpers, losses
# --------------------------------------------------------------------------
def softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def adjoint(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record("softmax", out, (a,), adjoint)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def adjoint(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return record("log_softmax", out, (a,), adjoint)


def layer_norm(x, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    x = _wrap(x)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    w, b = weight.data, bias.data
    n = xd.shape[-1]

    def adjoint(g):
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (g * xhat).reshape(-1, n).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, n).sum(axis=0)
        if x.requires_grad:
            gh = g * w
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gw, gb

    return record("layer_norm", xhat * w + b, (x, weight, bias), adjoint)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; repeated ids accumulate gradient."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise DimensionError("embedding ids must be integers")
    flat_ids = ids.reshape(-1)
    d = table.shape[-1]
    return record("embedding", table.data[ids], (table,),
                  lambda g: (Scatter(flat_ids, g.reshape(-1, d), basic=False),))


def dropout(a, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    a = _wrap(a)
    if not training or p <= 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs a generator")
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return record("dropout", a.data * keep, (a,), lambda g: (g * keep,))


def cross_entropy(logits, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` over all leading axes."""
    logits = _wrap(logits)
    targets = np.asarray(targets)
    n_cls = logits.shape[-1]
    flat = logits.data.reshape(-1, n_cls)
    t = targets.reshape(-1)
    if flat.shape[0] != t.shape[0]:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    if t.size and (t.min() < 0 or t.max() >= n_cls):
        raise DimensionError("cross_entropy: target outside [0, n_classes)")
    z = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(t.shape[0])
    loss = (lse - z[rows, t]).mean()

    def adjoint(g):
        p = np.exp(z - lse[:, None])
        p[rows, t] -= 1.0
        return ((g / t.shape[0]) * p.reshape(logits.shape),)

    return record("cross_entropy", np.asarray(loss), (logits,), adjoint)


# --------------------------------------------------------------------------
# 3D convolutions
# --------------------------------------------------------------------------
def _axis_of(kernel_shape) -> int:
    spatial = tuple(kernel_shape[1:])
    if len(spatial) != 3 or sorted(spatial) != [1, 1, 3]:
        raise UnsupportedKernelError(
            f"depthwise kernel must be axis-aligned with extent 3, got spatial shape {spatial}")
    return 2 + spatial.index(3)


def _shift_coefficients(spatial: tuple[int, int, int], axis: int, k: np.ndarray):
    """Flat-index stride of ``axis`` plus per-tap coefficients with boundary masks.

    Along the flattened voxel index, the neighbour at ``i-1`` along ``axis``
    sits ``stride`` positions back; the mask zeroes taps that would cross a
    face (zero same-padding).
    """
    strides = (spatial[1] * spatial[2], spatial[2], 1)
    stride = strides[axis - 2]
    pos = np.indices(spatial)[axis - 2].reshape(-1)
    n = spatial[axis - 2]
    lower = (pos[stride:] >= 1).astype(k.dtype)       # dest has a predecessor
    upper = (pos[:-stride] <= n - 2).astype(k.dtype)  # dest has a successor
    c0 = k[:, 0, None] * lower[None, :]
    c2 = k[:, 2, None] * upper[None, :]
    return stride, c0, k[:, 1, None], c2, lower, upper


def depthwise_conv3d(x, kernel) -> Tensor:
    """Per-channel 3-tap convolution along one spatial axis, zero same-padding.

    ``kernel`` has shape (C, kd, kh, kw) with exactly one extent equal to 3.
    Cross-correlation: ``out[i] = k[0] x[i-1] + k[1] x[i] + k[2] x[i+1]``.
    """
    x, kernel = _pair(x, kernel)
    if x.ndim != 5:
        raise DimensionError(f"depthwise_conv3d expects B×C×D×H×W input, got {x.shape}")
    if kernel.ndim != 4:
        raise DimensionError(f"depthwise kernel must be C×kd×kh×kw, got {kernel.shape}")
    axis = _axis_of(kernel.shape)
    B, C = x.shape[:2]
    spatial = x.shape[2:]
    if kernel.shape[0] != C:
        raise DimensionError(f"kernel has {kernel.shape[0]} channels, input has {C}")
    k = kernel.data.reshape(C, 3)
    s, c0, c1, c2, lower, upper = _shift_coefficients(spatial, axis, k)
    xf = x.data.reshape(B, C, -1)

    out = xf * c1
    out[:, :, s:] += c0 * xf[:, :, :-s]
    out[:, :, :-s] += c2 * xf[:, :, s:]

    def adjoint(g):
        gf = g.reshape(B, C, -1)
        gx = gk = None
        if x.requires_grad:
            gx = gf * c1
            gx[:, :, :-s] += c0 * gf[:, :, s:]
            gx[:, :, s:] += c2 * gf[:, :, :-s]
            gx = gx.reshape(x.shape)
        if kernel.requires_grad:
            gk = np.stack([
                (gf[:, :, s:] * xf[:, :, :-s]).sum(axis=0) @ lower,
                (gf * xf).sum(axis=(0, 2)),
                (gf[:, :, :-s] * xf[:, :, s:]).sum(axis=0) @ upper,
            ], axis=1).reshape(kernel.shape)
        return gx, gk

    return record("depthwise_conv3d", out.reshape(x.shape), (x, kernel), adjoint)


def pointwise_conv3d(x, w, bias=None) -> Tensor:
    """1×1×1 convolution: a channel-mixing matmul at every voxel.

    ``w`` has shape (Cout, Cin); optional ``bias`` has shape (Cout,).
    """
    x, w = _pair(x, w)
    if x.ndim != 5 or w.ndim != 2:
        raise DimensionError(f"pointwise_conv3d: bad ranks x{x.shape}, w{w.shape}")
    B, Cin = x.shape[:2]
    spatial = x.shape[2:]
    Cout = w.shape[0]
    if w.shape[1] != Cin:
        raise DimensionError(f"pointwise_conv3d: weight expects {w.shape[1]} channels, got {Cin}")
    xf = x.data.reshape(B, Cin, -1)
    wd = w.data
    out = np.matmul(wd, xf)
    inputs = [x, w]
    if bias is not None:
        bias = _wrap(bias, x)
        if bias.shape != (Cout,):
            raise DimensionError(f"pointwise_conv3d: bias shape {bias.shape} != ({Cout},)")
        out += bias.data[None, :, None]
        inputs.append(bias)

    def adjoint(g):
        gf = g.reshape(B, Cout, -1)
        gx = np.matmul(wd.T, gf).reshape(x.shape) if x.requires_grad else None
        gw = np.matmul(gf, xf.transpose(0, 2, 1)).sum(axis=0) if w.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(gf.sum(axis=(0, 2)) if bias.requires_grad else None)
        return tuple(grads)

    return record("pointwise_conv3d", out.reshape(B, Cout, *spatial), inputs, adjoint)


def _banded(taps: np.ndarray, n: int) -> np.ndarray:
    """(C, n, n) matrices applying a 3-tap zero-padded correlation along one axis."""
    C = taps.shape[0]
    T = np.zeros((C, n, n), dtype=taps.dtype)
    idx = np.arange(n)
    T[:, idx, idx] = taps[:, 1, None]
    T[:, idx[1:], idx[:-1]] = taps[:, 0, None]
    T[:, idx[:-1], idx[1:]] = taps[:, 2, None]
    return T


def _band_grad(gT: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`_banded`: fold (C, n, n) matrix gradients back to taps."""
    C, n, _ = gT.shape
    idx = np.arange(n)
    return np.stack([gT[:, idx[1:], idx[:-1]].sum(axis=1),
                     gT[:, idx, idx].sum(axis=1),
                     gT[:, idx[:-1], idx[1:]].sum(axis=1)], axis=1)


def _kron_operator(Td: np.ndarray, Th: np.ndarray, Tw: np.ndarray) -> np.ndarray:
    """A[c, (i,k,m), (j,l,n)] = Td[c,i,j] Th[c,k,l] Tw[c,m,n] as (C, V, V)."""
    C, D, H, W = Td.shape[0], Td.shape[1], Th.shape[1], Tw.shape[1]
    V = D * H * W
    return (Td[:, :, None, None, :, None, None] * Th[:, None, :, None, None, :, None]
            * Tw[:, None, None, :, None, None, :]).reshape(C, V, V)


def _contract(gA: np.ndarray, first: np.ndarray, second: np.ndarray) -> np.ndarray:
    # sum over the two trailing axis pairs, leaving the (C, n, n) factor gradient
    C, n1, m1, n2, m2, n3, m3 = gA.shape
    t = np.matmul(gA.reshape(C, -1, n3 * m3), second.reshape(C, n3 * m3, 1))
    t = np.matmul(t.reshape(C, -1, n2 * m2), first.reshape(C, n2 * m2, 1))
    return t.reshape(C, n1, m1)


def _kron_factor_grads(gA: np.ndarray, Td, Th, Tw) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of the three banded factors from a (C, V, V) operator gradient."""
    C, D, H, W = Td.shape[0], Td.shape[1], Th.shape[1], Tw.shape[1]
    gA = gA.reshape(C, D, H, W, D, H, W)
    # regroup as (c, i, j, k, l, m, n) so each factor pair is adjacent
    gA = np.ascontiguousarray(gA.transpose(0, 1, 4, 2, 5, 3, 6))
    gTd = _contract(gA, Th, Tw)
    gTh = _contract(np.ascontiguousarray(gA.transpose(0, 3, 4, 1, 2, 5, 6)), Td, Tw)
    gTw = _contract(np.ascontiguousarray(gA.transpose(0, 5, 6, 1, 2, 3, 4)), Td, Th)
    return gTd, gTh, gTw


def _check_factor_kernels(kernels) -> None:
    for k, axis in zip(kernels, (2, 3, 4)):
        if k.ndim != 4 or _axis_of(k.shape) != axis:
            raise UnsupportedKernelError(f"kernel {k.shape} does not act on axis {axis}")


def depthwise_operator(k_d, k_h, k_w, extents: tuple[int, int, int]) -> Tensor:
    """The D-, H- then W-axis depthwise convolutions as one (C, V, V) matrix per channel.

    Applying ``A[c]`` to a channel's flattened volume equals the three
    chained :func:`depthwise_conv3d` passes.  Gradients flow back to the taps.
    """
    kernels = [_wrap(k) for k in (k_d, k_h, k_w)]
    _check_factor_kernels(kernels)
    C = kernels[0].shape[0]
    Ts = [_banded(k.data.reshape(C, 3), n) for k, n in zip(kernels, extents)]
    A = _kron_operator(*Ts)

    def adjoint(gA):
        return tuple(_band_grad(gT).reshape(k.shape) if k.requires_grad else None
                     for k, gT in zip(kernels, _kron_factor_grads(gA, *Ts)))

    return record("depthwise_operator", A, kernels, adjoint)


def factorized_depthwise3d(x, k_d, k_h, k_w) -> Tensor:
    """D-, then H-, then W-axis depthwise convolutions fused into one operator.

    Numerically the composition ``depthwise_conv3d`` ×3, but applied as one
    per-channel (V×V) voxel-mixing matrix ``T_d ⊗ T_h ⊗ T_w``; worthwhile
    only while the voxel count V stays small.
    """
    x = _wrap(x)
    kernels = [_wrap(k, x) for k in (k_d, k_h, k_w)]
    _check_factor_kernels(kernels)
    B, C, D, H, W = x.shape
    V = D * H * W
    Ts = [_banded(k.data.reshape(C, 3), n) for k, n in zip(kernels, (D, H, W))]
    A = _kron_operator(*Ts)
    xt = np.ascontiguousarray(x.data.reshape(B, C, V).transpose(1, 0, 2))   # (C, B, V)
    out = np.ascontiguousarray(np.matmul(xt, A.transpose(0, 2, 1)).transpose(1, 0, 2))

    def adjoint(g):
        gt = np.ascontiguousarray(g.reshape(B, C, V).transpose(1, 0, 2))    # (C, B, V)
        gx = None
        if x.requires_grad:
            gx = np.ascontiguousarray(np.matmul(gt, A).transpose(1, 0, 2)).reshape(x.shape)
        grads = [gx, None, None, None]
        if any(k.requires_grad for k in kernels):
            gA = np.matmul(gt.transpose(0, 2, 1), xt)
            for slot, (k, gT) in enumerate(zip(kernels, _kron_factor_grads(gA, *Ts)), start=1):
                if k.requires_grad:
                    grads[slot] = _band_grad(gT).reshape(k.shape)
        return tuple(grads)

    return record("factorized_depthwise3d", out.reshape(x.shape), (x, *kernels), adjoint)

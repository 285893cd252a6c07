"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation the model pipeline needs is implemented here as an explicit
forward rule plus a backward closure. The computation graph is a per-forward
tape: each result tensor remembers its parents and how to push gradients to
them; `backward` walks the tape once in reverse topological order and then
frees it.

All buffers are contiguous row-major float64. Broadcasting is supported on
the elementwise binary ops (the pipeline needs scalar blends, channel biases
and spatial gates); everything else demands exact shapes.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

_grad_enabled = True


class no_grad:
    """Context manager that disables tape recording (evaluation mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, exc_type, exc, tb):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """n-d float64 array with an optional gradient slot and tape hooks."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    # Operator sugar for the common elementwise ops.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float64))


def _wrap(out_data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(out_data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not align") from None


# ---------------------------------------------------------------------------
# elementwise / binary
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out_data = a.data + b.data

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _wrap(out_data, (a, b), backward_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out_data = a.data - b.data

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _wrap(out_data, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out_data = a.data * b.data

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _wrap(out_data, (a, b), backward_fn)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python constant (no gradient path through `c`)."""
    c = float(c)
    out_data = x.data * c

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g * c)

    return _wrap(out_data, (x,), backward_fn)


def sigmoid(x: Tensor) -> Tensor:
    # Stable in both tails: never exponentiates a large positive argument.
    d = x.data
    out_data = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                        np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g * out_data * (1.0 - out_data))

    return _wrap(out_data, (x,), backward_fn)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-CDF form: x * Phi(x)."""
    d = x.data
    phi_cdf = 0.5 * (1.0 + erf(d * _INV_SQRT2))
    out_data = d * phi_cdf

    def backward_fn(g):
        if x.requires_grad:
            pdf = np.exp(-0.5 * d * d) * _INV_SQRT2PI
            x._accumulate(g * (phi_cdf + d * pdf))

    return _wrap(out_data, (x,), backward_fn)


# ---------------------------------------------------------------------------
# matrix products
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    out_data = a.data @ b.data

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _wrap(out_data, (a, b), backward_fn)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul; leading dims must match exactly."""
    if a.data.ndim < 3 or a.data.ndim != b.data.ndim \
            or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"bmm: shapes {a.shape} and {b.shape} do not align")
    out_data = a.data @ b.data

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.swapaxes(-1, -2))
        if b.requires_grad:
            b._accumulate(a.data.swapaxes(-1, -2) @ g)

    return _wrap(out_data, (a, b), backward_fn)


# ---------------------------------------------------------------------------
# convolutions (3x3, padding 1, cross-correlation)
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, stride: int, ho: int, wo: int) -> np.ndarray:
    """(B, C, Hp, Wp) padded input -> (B, C, 9, ho, wo) patch stack."""
    b, c = xp.shape[:2]
    cols = np.empty((b, c, 9, ho, wo), dtype=np.float64)
    for ki in range(3):
        for kj in range(3):
            cols[:, :, ki * 3 + kj] = xp[:, :, ki:ki + stride * (ho - 1) + 1:stride,
                                         kj:kj + stride * (wo - 1) + 1:stride]
    return cols


def _col2im(gcols: np.ndarray, xp_shape, stride: int):
    """Scatter (B, C, 9, ho, wo) patch gradients back onto padded input."""
    gxp = np.zeros(xp_shape, dtype=np.float64)
    ho, wo = gcols.shape[-2:]
    for ki in range(3):
        for kj in range(3):
            gxp[:, :, ki:ki + stride * (ho - 1) + 1:stride,
                kj:kj + stride * (wo - 1) + 1:stride] += gcols[:, :, ki * 3 + kj]
    return gxp


def conv3x3(x: Tensor, kernel: Tensor, stride: int = 1) -> Tensor:
    """2-d cross-correlation, kernel (Cout, Cin, 3, 3), padding fixed to 1."""
    if x.data.ndim != 4 or kernel.data.ndim != 4 or kernel.shape[2:] != (3, 3) \
            or x.shape[1] != kernel.shape[1]:
        raise DimensionError(f"conv3x3: input {x.shape} incompatible with kernel {kernel.shape}")
    if stride < 1:
        raise ContractError(f"conv3x3: stride must be positive, got {stride}")
    bsz, cin, h, w = x.shape
    cout = kernel.shape[0]
    ho = (h + 2 - 3) // stride + 1
    wo = (w + 2 - 3) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = _im2col(xp, stride, ho, wo)                       # (B, Cin, 9, ho, wo)
    cols2 = cols.reshape(bsz, cin * 9, ho * wo)
    kmat = kernel.data.reshape(cout, cin * 9)
    out_data = (kmat @ cols2).reshape(bsz, cout, ho, wo)

    def backward_fn(g):
        g2 = g.reshape(bsz, cout, ho * wo)
        if kernel.requires_grad:
            gk = np.einsum("bop,bqp->oq", g2, cols2, optimize=True)
            kernel._accumulate(gk.reshape(kernel.shape))
        if x.requires_grad:
            gcols = (kmat.T @ g2).reshape(bsz, cin, 9, ho, wo)
            gxp = _col2im(gcols, xp.shape, stride)
            x._accumulate(gxp[:, :, 1:-1, 1:-1])

    return _wrap(out_data, (x, kernel), backward_fn)


def depthwise_conv3x3(x: Tensor, kernel: Tensor) -> Tensor:
    """Per-channel 3x3 cross-correlation, kernel (C, 3, 3), stride 1, padding 1."""
    if x.data.ndim != 4 or kernel.data.ndim != 3 or kernel.shape[1:] != (3, 3) \
            or kernel.shape[0] != x.shape[1]:
        raise DimensionError(
            f"depthwise_conv3x3: input {x.shape} incompatible with kernel {kernel.shape}")
    bsz, c, h, w = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = _im2col(xp, 1, h, w)                              # (B, C, 9, H, W)
    k9 = kernel.data.reshape(c, 9)
    out_data = np.einsum("bcphw,cp->bchw", cols, k9, optimize=True)

    def backward_fn(g):
        if kernel.requires_grad:
            gk = np.einsum("bcphw,bchw->cp", cols, g, optimize=True)
            kernel._accumulate(gk.reshape(kernel.shape))
        if x.requires_grad:
            gcols = np.einsum("cp,bchw->bcphw", k9, g, optimize=True)
            gxp = _col2im(gcols, xp.shape, 1)
            x._accumulate(gxp[:, :, 1:-1, 1:-1])

    return _wrap(out_data, (x, kernel), backward_fn)


# ---------------------------------------------------------------------------
# normalization / softmax
# ---------------------------------------------------------------------------

def softmax_lastdim(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        if x.requires_grad:
            dot = (g * out_data).sum(axis=-1, keepdims=True)
            x._accumulate(out_data * (g - dot))

    return _wrap(out_data, (x,), backward_fn)


def log_softmax_lastdim(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out_data = shifted - lse

    def backward_fn(g):
        if x.requires_grad:
            soft = np.exp(out_data)
            x._accumulate(g - soft * g.sum(axis=-1, keepdims=True))

    return _wrap(out_data, (x,), backward_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last dimension to zero mean / unit variance, then affine."""
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise DimensionError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} must be ({c},)")
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out_data = xhat * gain.data + bias.data

    def backward_fn(g):
        lead = tuple(range(g.ndim - 1))
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=lead))
        if gain.requires_grad:
            gain._accumulate((g * xhat).sum(axis=lead))
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(inv_std * (dxhat - m1 - xhat * m2))

    return _wrap(out_data, (x, gain, bias), backward_fn)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")
    out_data = x.data.reshape(shape)

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g.reshape(x.shape))

    return _wrap(out_data, (x,), backward_fn)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise DimensionError(f"transpose: axes {axes} invalid for shape {x.shape}")
    out_data = np.ascontiguousarray(x.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g.transpose(inverse))

    return _wrap(out_data, (x,), backward_fn)


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat: need at least one tensor")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _wrap(out_data, tuple(tensors), backward_fn)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out_data = np.ascontiguousarray(x.data[idx])

    def backward_fn(g):
        if x.requires_grad:
            gx = np.zeros(x.shape, dtype=np.float64)
            gx[idx] = g
            x._accumulate(gx)

    return _wrap(out_data, (x,), backward_fn)


def take_axis(x: Tensor, indices, axis: int) -> Tensor:
    """Gather along `axis` with a 1-d integer index list (repeats allowed)."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.ndim != 1:
        raise ContractError(f"take_axis: indices must be 1-d, got shape {indices.shape}")
    out_data = np.take(x.data, indices, axis=axis)

    def backward_fn(g):
        if x.requires_grad:
            gx = np.zeros(x.shape, dtype=np.float64)
            np.add.at(np.moveaxis(gx, axis, 0), indices, np.moveaxis(g, axis, 0))
            x._accumulate(gx)

    return _wrap(out_data, (x,), backward_fn)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    out_data = np.asarray(x.data.sum())

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(np.broadcast_to(g, x.shape).copy())

    return _wrap(out_data, (x,), backward_fn)


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.size)


def sum_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if x.requires_grad:
            ge = g if keepdims else np.expand_dims(g, axis)
            x._accumulate(np.broadcast_to(ge, x.shape).copy())

    return _wrap(out_data, (x,), backward_fn)


def mean_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    return scale(sum_axis(x, axis, keepdims), 1.0 / x.shape[axis])


def global_avg_pool_spatial(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, C) arithmetic mean over the spatial plane."""
    if x.data.ndim != 4:
        raise DimensionError(f"global_avg_pool_spatial: need 4-d input, got {x.shape}")
    h, w = x.shape[2], x.shape[3]
    out_data = x.data.mean(axis=(2, 3))

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy())

    return _wrap(out_data, (x,), backward_fn)


def l2_norm_lastdim(x: Tensor) -> Tensor:
    """Euclidean norm of each trailing slice; subgradient 0 at the origin."""
    sq = (x.data * x.data).sum(axis=-1)
    out_data = np.sqrt(sq)

    def backward_fn(g):
        if x.requires_grad:
            denom = np.where(out_data > 0.0, out_data, 1.0)
            x._accumulate((g / denom)[..., None] * x.data)

    return _wrap(out_data, (x,), backward_fn)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor):
    """Populate .grad for every requires_grad tensor reachable from `loss`.

    The tape is released afterwards; gradients accumulate additively across
    repeated calls until zero_grad.
    """
    if loss.shape != ():
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    # Iterative post-order DFS builds the topological order.
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    loss._accumulate(np.ones((), dtype=np.float64))
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)
    for node in order:
        node._parents = ()
        node._backward = None

"""Minimal reverse-mode autodiff over numpy arrays.

Just enough differentiable ops for the bi-temporal detection pipeline:
convolutions, pointwise arithmetic, matrix products, row softmax, nearest
upsampling, gathers, and the fused loss primitives.  Tensors are
channels-first for images (C, H, W).  Every op validates that its output is
finite; NaN/Inf anywhere is treated as an error state, not a value.

Gradient checking is done against central finite differences (`grad_check`),
which is the independent oracle for every analytic backward rule here.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .errors import ConfigError, NumericError

# Toggled by no_grad(); when False, ops build no graph.
_grad_enabled = True

# Every op output is scanned for NaN/Inf. Cheap at desk scale and it turns
# silent numeric corruption into a hard error close to its source.
strict_finite = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr: np.ndarray) -> None:
    if strict_finite and not np.isfinite(arr).all():
        raise NumericError("non-finite value produced by a tensor op")


class Tensor:
    """A numpy array plus an optional gradient accumulator.

    Immutable after construction except for `grad`, which is accumulated
    during a single backward pass.
    """

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float64)
        _check_finite(self.data)
        self.requires_grad = requires_grad
        self.grad = None
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Reverse-mode sweep from this (scalar) tensor."""
        if self.data.size != 1:
            raise ConfigError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return divide(self, other)

    def __neg__(self):
        return neg(self)


def _as_const(x, like: Tensor) -> Tensor:
    """Wrap scalars / numpy arrays as constant tensors."""
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=like.data.dtype)
    return Tensor(arr)


def _make(data: np.ndarray, parents: tuple, backward) -> Tensor:
    _check_finite(data)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _binary_shape_check(a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise ConfigError(f"shape mismatch: {a.data.shape} vs {b.data.shape}")


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    # Scalars broadcast forward; fold the gradient back down.
    if g.shape == tuple(shape):
        return g
    return np.sum(g).reshape(shape) if shape == () else g.sum(axis=0)


def add(a: Tensor, b) -> Tensor:
    b = _as_const(b, a)
    _binary_shape_check(a, b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_reduce_to(g, a.data.shape))
        if b.requires_grad:
            b._accum(_reduce_to(g, b.data.shape))

    return _make(out_data, (a, b), backward)


def subtract(a: Tensor, b) -> Tensor:
    b = _as_const(b, a)
    _binary_shape_check(a, b)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_reduce_to(g, a.data.shape))
        if b.requires_grad:
            b._accum(-_reduce_to(g, b.data.shape))

    return _make(out_data, (a, b), backward)


def multiply(a: Tensor, b) -> Tensor:
    b = _as_const(b, a)
    _binary_shape_check(a, b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_reduce_to(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_reduce_to(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward)


def divide(a: Tensor, b) -> Tensor:
    b = _as_const(b, a)
    _binary_shape_check(a, b)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_reduce_to(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_reduce_to(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out_data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accum(-g)

    return _make(-a.data, (a,), backward)


def maximum(a: Tensor, b) -> Tensor:
    """Elementwise max; on ties the gradient goes to the first argument."""
    b = _as_const(b, a)
    _binary_shape_check(a, b)
    take_a = a.data >= b.data
    out_data = np.where(take_a, a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._accum(_reduce_to(g * take_a, a.data.shape))
        if b.requires_grad:
            b._accum(_reduce_to(g * ~take_a, b.data.shape))

    return _make(out_data, (a, b), backward)


def minimum(a: Tensor, b) -> Tensor:
    b = _as_const(b, a)
    _binary_shape_check(a, b)
    take_a = a.data <= b.data
    out_data = np.where(take_a, a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._accum(_reduce_to(g * take_a, a.data.shape))
        if b.requires_grad:
            b._accum(_reduce_to(g * ~take_a, b.data.shape))

    return _make(out_data, (a, b), backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accum(g * out_data)

    return _make(out_data, (a,), backward)


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a._accum(g / a.data)

    return _make(out_data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    out_data = _sigmoid_np(a.data)

    def backward(g):
        if a.requires_grad:
            a._accum(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward)


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x) — the single smooth nonlinearity used everywhere."""
    s = _sigmoid_np(a.data)
    out_data = a.data * s

    def backward(g):
        if a.requires_grad:
            a._accum(g * (s + a.data * s * (1.0 - s)))

    return _make(out_data, (a,), backward)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # Split by sign to avoid overflow in exp.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# -- shape ops ----------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def backward(g):
        if a.requires_grad:
            a._accum(g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), backward)


def transpose2d(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ConfigError("transpose2d expects a 2-D tensor")

    def backward(g):
        if a.requires_grad:
            a._accum(np.ascontiguousarray(g.T))

    return _make(np.ascontiguousarray(a.data.T), (a,), backward)


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ConfigError("concat of zero tensors")
    sizes = [p.data.shape[axis] for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                p._accum(g[tuple(idx)])

    return _make(out_data, tuple(parts), backward)


def upsample2x(a: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsample of a (C, H, W) map."""
    if a.data.ndim != 3:
        raise ConfigError("upsample2x expects (C, H, W)")
    out_data = a.data.repeat(2, axis=1).repeat(2, axis=2)

    def backward(g):
        if a.requires_grad:
            c, h, w = a.data.shape
            a._accum(g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)))

    return _make(out_data, (a,), backward)


def gather_cells(a: Tensor, flat_idx: np.ndarray) -> Tensor:
    """Pick spatial positions from a (C, H, W) map; returns (C, n)."""
    if a.data.ndim != 3:
        raise ConfigError("gather_cells expects (C, H, W)")
    c = a.data.shape[0]
    flat = a.data.reshape(c, -1)
    idx = np.asarray(flat_idx, dtype=np.int64)
    out_data = np.ascontiguousarray(flat[:, idx])

    def backward(g):
        if a.requires_grad:
            gf = np.zeros_like(flat)
            np.add.at(gf, (slice(None), idx), g)
            a._accum(gf.reshape(a.data.shape))

    return _make(out_data, (a,), backward)


def take_row(a: Tensor, i: int) -> Tensor:
    """Row i of a 2-D tensor as a 1-D tensor."""
    if a.data.ndim != 2:
        raise ConfigError("take_row expects a 2-D tensor")

    def backward(g):
        if a.requires_grad:
            gm = np.zeros_like(a.data)
            gm[i] = g
            a._accum(gm)

    return _make(a.data[i].copy(), (a,), backward)


# -- reductions ---------------------------------------------------------------


def tsum(a: Tensor) -> Tensor:
    out_data = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def backward(g):
        if a.requires_grad:
            a._accum(np.broadcast_to(g, a.data.shape).copy())

    return _make(out_data, (a,), backward)


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    out_data = np.asarray(a.data.mean(), dtype=a.data.dtype)

    def backward(g):
        if a.requires_grad:
            a._accum(np.broadcast_to(g / n, a.data.shape).copy())

    return _make(out_data, (a,), backward)


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ConfigError("matmul expects 2-D tensors")
    if a.data.shape[1] != b.data.shape[0]:
        raise ConfigError(
            f"matmul inner extents disagree: {a.data.shape} x {b.data.shape}"
        )
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    return _make(out_data, (a, b), backward)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax of an (N, M) tensor, stabilized by row-max shift."""
    if a.data.ndim != 2:
        raise ConfigError("softmax_rows expects an (N, M) tensor")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (g * out_data).sum(axis=1, keepdims=True)
            a._accum(out_data * (g - dot))

    return _make(out_data, (a,), backward)


# -- convolution --------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation of (C_in, H, W) with (C_out, C_in, k, k) weights.

    im2col + one GEMM; the backward pass reuses the column buffer.
    """
    if x.data.ndim != 3 or weight.data.ndim != 4:
        raise ConfigError("conv2d expects x (C,H,W) and weight (Co,Ci,k,k)")
    c_in, h, w = x.data.shape
    c_out, c_in_w, k, k2 = weight.data.shape
    if k != k2:
        raise ConfigError("conv2d kernels must be square")
    if c_in_w != c_in:
        raise ConfigError(f"conv2d channel mismatch: input {c_in}, kernel {c_in_w}")
    if bias.data.shape != (c_out,):
        raise ConfigError("conv2d bias must be (C_out,)")
    if stride < 1 or padding < 0:
        raise ConfigError("conv2d needs stride >= 1 and padding >= 0")
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (w + 2 * padding - k) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ConfigError("conv2d output would be empty")

    if padding:
        xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data

    if k == 1 and stride == 1:
        cols = xp.reshape(c_in, h_out * w_out)
    else:
        cols = np.empty((c_in, k, k, h_out, w_out), dtype=x.data.dtype)
        for ki in range(k):
            for kj in range(k):
                cols[:, ki, kj] = xp[:, ki:ki + stride * h_out:stride,
                                     kj:kj + stride * w_out:stride]
        cols = cols.reshape(c_in * k * k, h_out * w_out)

    w_mat = weight.data.reshape(c_out, c_in * k * k)
    out_data = (w_mat @ cols + bias.data[:, None]).reshape(c_out, h_out, w_out)

    def backward(g):
        g_mat = g.reshape(c_out, h_out * w_out)
        if bias.requires_grad:
            bias._accum(g_mat.sum(axis=1))
        if weight.requires_grad:
            weight._accum((g_mat @ cols.T).reshape(weight.data.shape))
        if x.requires_grad:
            d_cols = (w_mat.T @ g_mat).reshape(c_in, k, k, h_out, w_out)
            dxp = np.zeros_like(xp)
            for ki in range(k):
                for kj in range(k):
                    dxp[:, ki:ki + stride * h_out:stride,
                        kj:kj + stride * w_out:stride] += d_cols[:, ki, kj]
            if padding:
                dxp = dxp[:, padding:padding + h, padding:padding + w]
            x._accum(dxp)

    return _make(out_data, (x, weight, bias), backward)


# -- fused loss primitives ------------------------------------------------------


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-element binary cross entropy against constant targets.

    Numerically stable form: max(z,0) - z*t + log1p(exp(-|z|)).
    """
    t = np.asarray(targets, dtype=logits.data.dtype)
    if t.shape != logits.data.shape:
        raise ConfigError("bce_with_logits target shape mismatch")
    z = logits.data
    out_data = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))

    def backward(g):
        if logits.requires_grad:
            logits._accum(g * (_sigmoid_np(z) - t))

    return _make(out_data, (logits,), backward)


def cross_entropy_rows(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Softmax cross entropy per row of (N, K) logits; labels are ints."""
    if logits.data.ndim != 2:
        raise ConfigError("cross_entropy_rows expects (N, K) logits")
    lab = np.asarray(labels, dtype=np.int64)
    n, k = logits.data.shape
    if lab.shape != (n,):
        raise ConfigError("labels must be (N,)")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    sm = e / e.sum(axis=1, keepdims=True)
    out_data = np.log(e.sum(axis=1)) - z[np.arange(n), lab]

    def backward(g):
        if logits.requires_grad:
            grad = sm.copy()
            grad[np.arange(n), lab] -= 1.0
            logits._accum(grad * g[:, None])

    return _make(out_data, (logits,), backward)


def quantize_ste(x: Tensor) -> Tensor:
    """Fake int8 quantization with a straight-through gradient.

    Forward matches the wire quantizer exactly (symmetric, per-map scale);
    backward passes the gradient unchanged so the codec trains on what the
    on-board side will actually receive.
    """
    from .codec import quantize  # local import: codec owns the wire quantizer

    payload, scale = quantize(x.data)
    out_data = (payload.astype(x.data.dtype) * x.data.dtype.type(scale))

    def backward(g):
        if x.requires_grad:
            x._accum(g)

    return _make(out_data, (x,), backward)


# -- gradient oracle ------------------------------------------------------------


def grad_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` maps a Tensor to a scalar Tensor.  The relative error per coordinate
    is |analytic - central| / max(1e-12, |central|); float64 inputs expected.
    """
    x.requires_grad = True
    x.zero_grad()
    y = f(x)
    y.backward()
    if x.grad is None:
        raise NumericError("no gradient reached the checked tensor")
    analytic = x.grad.copy()

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = float(f(Tensor(x.data.copy())).data)
        flat[i] = orig - eps
        f_minus = float(f(Tensor(x.data.copy())).data)
        flat[i] = orig
        numeric[i] = (f_plus - f_minus) / (2.0 * eps)
    if not np.isfinite(numeric).all():
        raise NumericError("non-finite finite-difference estimate")

    numeric = numeric.reshape(x.data.shape)
    denom = np.maximum(1e-12, np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))

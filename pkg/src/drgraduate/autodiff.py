"""Small dense-tensor engine with reverse-mode differentiation.

Only the operations needed by the grading network are provided: 2-D
convolution, batch normalization, max pooling, dense layers, per-sample
max reduction and a handful of elementwise functions.  Every forward op
checks its output for NaN/Inf and raises :class:`NonFiniteError`.
"""
from __future__ import annotations

import contextlib
import hashlib
from typing import Callable, Sequence

import numpy as np

from . import _kernels

_DTYPE = np.float64


_kink_log: list | None = None


@contextlib.contextmanager
def kink_trace():
    """Record the branch pattern of every non-smooth op evaluated inside the block.

    Yields a list of digests (ReLU masks, pooling and max selections, clamp
    masks).  Two evaluations with equal lists took the same smooth branch,
    which is what a finite-difference gradient check needs.
    """
    global _kink_log
    prev, _kink_log = _kink_log, []
    try:
        yield _kink_log
    finally:
        _kink_log = prev


def _log_kink(op: str, pattern: np.ndarray):
    if _kink_log is not None:
        _kink_log.append((op, hashlib.blake2b(np.ascontiguousarray(pattern).tobytes(), digest_size=16).digest()))


class NonFiniteError(FloatingPointError):
    """Raised when a forward op produces NaN or Inf."""


class ShapeError(ValueError):
    pass


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def compute_dtype(dtype):
    """Temporarily switch the dtype used for new tensors (float64 or float32)."""
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float64, np.float32):
        raise ValueError(f"unsupported dtype {dtype}")
    prev, _DTYPE = _DTYPE, dtype
    try:
        yield
    finally:
        _DTYPE = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "argmax", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable | None = None, op: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self.op = op
        self.argmax = None  # set by reduce_max

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        """Populate ``grad`` of every tensor in the graph that requires it."""
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        order = _topological(self)
        for node in order:
            if node._parents:
                node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents and node is not self:
                    node.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, idx):
        return index(self, idx)


def _topological(root: Tensor) -> list:
    # iterative DFS; deep nets would overflow the recursion limit
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and (p.requires_grad or p._parents):
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not _kernels.all_finite(arr.reshape(-1)):
        raise NonFiniteError(f"{op} produced non-finite values")
    return arr


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    _check_finite(data, op)
    tracked = tuple(p for p in parents if p.requires_grad or p._parents)
    if not tracked:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward, op=op)


def _needs(t: Tensor) -> bool:
    return t.requires_grad or bool(t._parents)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if _needs(a):
            a._accumulate(_unbroadcast(g, a.shape))
        if _needs(b):
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if _needs(a):
            a._accumulate(_unbroadcast(g, a.shape))
        if _needs(b):
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if _needs(a):
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if _needs(b):
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        if _needs(a):
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if _needs(b):
            b._accumulate(_unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), backward, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent

    def backward(g):
        a._accumulate(g * exponent * a.data ** (exponent - 1))

    return _make(out, (a,), backward, f"pow{exponent}")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out)

    return _make(out, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(g / a.data)

    return _make(np.log(a.data), (a,), backward, "log")


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); gradient is zero where the floor is active."""
    mask = a.data >= floor
    _log_kink("clamp_min", mask)

    def backward(g):
        a._accumulate(g * mask)

    return _make(np.where(mask, a.data, floor).astype(a.data.dtype), (a,), backward, "clamp_min")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    _log_kink("relu", mask)

    def backward(g):
        a._accumulate(g * mask)

    return _make(a.data * mask, (a,), backward, "relu")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0.0, x).astype(x.dtype)

    def backward(g):
        # logistic sigmoid, written to avoid overflow for large |x|
        sig = np.exp(-np.logaddexp(0.0, -x))
        a._accumulate(g * sig)

    return _make(out, (a,), backward, "softplus")


# ---------------------------------------------------------------------------
# shape / reductions
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape

    def backward(g):
        a._accumulate(g.reshape(src))

    return _make(a.data.reshape(shape), (a,), backward, "reshape")


def flatten(a: Tensor) -> Tensor:
    """Collapse every axis but the first."""
    return reshape(a, (a.shape[0], -1))


def index(a: Tensor, idx) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accumulate(full)

    return _make(np.array(a.data[idx]), (a,), backward, "index")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, src))

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reduce_max(a: Tensor) -> Tensor:
    """Per-sample maximum over all non-batch axes: [B, ...] -> [B].

    The argmax (lowest flat index on ties) is recorded and the backward pass
    routes the whole gradient to it.
    """
    b = a.shape[0]
    flat = a.data.reshape(b, -1)
    arg = np.argmax(flat, axis=1)
    out = flat[np.arange(b), arg]
    _log_kink("reduce_max", arg)

    def backward(g):
        full = np.zeros_like(flat)
        full[np.arange(b), arg] = g
        a._accumulate(full.reshape(a.shape))

    t = _make(out.copy(), (a,), backward, "reduce_max")
    t.argmax = arg
    return t


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    shifted = np.exp(a.data - m)
    s = shifted.sum(axis=axis, keepdims=True)
    out = (m + np.log(s)).squeeze(axis)
    soft = shifted / s

    def backward(g):
        a._accumulate(np.expand_dims(g, axis) * soft)

    return _make(out, (a,), backward, "logsumexp")


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x[B, in] @ weight[in, out] + bias[out]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"dense: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        if _needs(x):
            x._accumulate(g @ weight.data.T)
        if _needs(weight):
            weight._accumulate(x.data.T @ g)
        if bias is not None and _needs(bias):
            bias._accumulate(g.sum(axis=0))

    return _make(out, parents, backward, "dense")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)

    def backward(g):
        a._accumulate(g.transpose(inv))

    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), backward, "transpose")


def _to_last(x: Tensor) -> Tensor:
    return transpose(x, (0, 2, 3, 1))


def _to_first(x: Tensor) -> Tensor:
    return transpose(x, (0, 3, 1, 2))


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, channels_last: bool = False) -> Tensor:
    """Cross-correlation of x with kernel[K, C, kh, kw].

    ``x`` is [B, C, H, W] by default, or [B, H, W, C] with
    ``channels_last=True`` (the layout the backbone runs in, since it keeps
    the im2col copies contiguous).  Zero padding is applied symmetrically.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    if not channels_last:
        if x.shape[1] != kernel.shape[1]:
            raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
        return _to_first(conv2d(_to_last(x), kernel, bias, stride, padding, channels_last=True))
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
    B, H, W, C = x.shape
    K, Ck, kh, kw = kernel.shape
    if C != Ck:
        raise ShapeError(f"conv2d: input {x.shape} (channels last) incompatible with kernel {kernel.shape}")
    if kh > H + 2 * padding or kw > W + 2 * padding:
        raise ShapeError(f"conv2d: kernel {kernel.shape} larger than padded input {x.shape}")
    if bias is not None and bias.shape != (K,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match kernel {kernel.shape}")

    if padding:
        xp = np.zeros((B, H + 2 * padding, W + 2 * padding, C), dtype=x.data.dtype)
        xp[:, padding:padding + H, padding:padding + W] = x.data
    else:
        xp = x.data
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    # cols[b*Ho*Wo + i*Wo + j, (u*kw + v)*C + c] = xp[b, i*stride + u, j*stride + v, c]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    cols = np.ascontiguousarray(win[:, :Ho, :Wo].transpose(0, 1, 2, 4, 5, 3)).reshape(B * Ho * Wo, kh * kw * C)
    wmat = np.ascontiguousarray(kernel.data.transpose(2, 3, 1, 0)).reshape(kh * kw * C, K)
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        gm = g.reshape(B * Ho * Wo, K)
        if _needs(kernel):
            kernel._accumulate((cols.T @ gm).reshape(kh, kw, C, K).transpose(3, 2, 0, 1))
        if bias is not None and _needs(bias):
            bias._accumulate(gm.sum(axis=0))
        if _needs(x):
            dxp = _kernels.col2im(gm @ wmat.T, B, xp.shape[1], xp.shape[2], C, kh, kw, stride, Ho, Wo)
            x._accumulate(dxp[:, padding:padding + H, padding:padding + W] if padding else dxp)

    return _make(out.reshape(B, Ho, Wo, K), parents, backward, "conv2d")


def maxpool2d(x: Tensor, size: int = 2, channels_last: bool = False) -> Tensor:
    """Non-overlapping ``size`` x ``size`` max pooling.

    Trailing rows/columns that do not fill a window are dropped.  Ties go to
    the first window position in row-major order.
    """
    if not channels_last:
        return _to_first(maxpool2d(_to_last(x), size, channels_last=True))
    B, H, W, C = x.shape
    Ho, Wo = H // size, W // size
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"maxpool2d: input {x.shape} smaller than window {size}")
    out, arg = _kernels.maxpool_forward(np.ascontiguousarray(x.data), size)
    _log_kink("maxpool2d", arg)

    def backward(g):
        x._accumulate(_kernels.maxpool_backward(np.ascontiguousarray(g), arg, size, H, W))

    return _make(out, (x,), backward, "maxpool2d")


BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool, eps: float = BN_EPS,
                momentum: float = BN_MOMENTUM, channels_last: bool = False) -> Tensor:
    """Per-channel normalization.

    In training mode batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place (the running variance takes the
    unbiased estimate).  Eval mode normalizes with the running statistics.
    """
    if not channels_last:
        return _to_first(batchnorm2d(_to_last(x), gamma, beta, running_mean, running_var,
                                     training, eps, momentum, channels_last=True))
    C = x.shape[-1]
    if x.ndim != 4 or gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batchnorm2d: input {x.shape} vs gamma {gamma.shape} / beta {beta.shape}")
    dtype = x.data.dtype
    x2 = np.ascontiguousarray(x.data).reshape(-1, C)
    n = x2.shape[0]
    if training:
        if n == 0:
            raise ShapeError("batchnorm2d: empty batch in training mode")
        mu, var = _kernels.channel_moments(x2)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        mu, var = running_mean.astype(np.float64), running_var.astype(np.float64)
    inv = 1.0 / np.sqrt(var + eps)
    mu_t, inv_t = mu.astype(dtype), inv.astype(dtype)
    out = _kernels.bn_apply(x2, mu_t, inv_t, gamma.data, beta.data)

    def backward(g):
        # normalized input is recomputed from x2 rather than stored
        g2 = np.ascontiguousarray(g).reshape(-1, C)
        gsum, gxsum = _kernels.bn_grad_sums(g2, x2, mu_t, inv_t)
        if _needs(gamma):
            gamma._accumulate(gxsum.astype(dtype))
        if _needs(beta):
            beta._accumulate(gsum.astype(dtype))
        if _needs(x):
            scale = (gamma.data * inv).astype(dtype)
            if training:
                gx = _kernels.bn_input_grad(g2, x2, mu_t, inv_t, scale,
                                            (gsum / n).astype(dtype), (gxsum / n).astype(dtype))
            else:
                gx = g2 * scale
            x._accumulate(gx.reshape(x.shape))

    return _make(out.reshape(x.shape), (x, gamma, beta), backward, "batchnorm2d")

"""Dense tensors with tape-based reverse-mode differentiation.

Values are float32 by default; float64 inputs stay float64 so the gradient
checker can run the whole graph in double precision. Every operation records
its inputs and a backward closure on the output node; ``Tensor.backward``
replays the tape in reverse topological order, accumulating into ``.grad``.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy import special as _special


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericError(FloatingPointError):
    """Raised when a computation produces non-finite values."""


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad,
                      name=self.name)

    # -- autodiff core -------------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Backpropagate from this node; ``self`` must be scalar unless a seed
        gradient of matching shape is given. Gradients accumulate (+=) into
        ``.grad`` of every reachable node with ``requires_grad``."""
        if seed is None:
            if self.size != 1:
                raise ShapeError("backward() without seed requires a scalar")
            seed = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.asarray(seed, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0)) if not isinstance(other, Tensor) \
            else add(self, neg(other))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, scalar: float):
        return mul(self, 1.0 / scalar)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape if len(shape) != 1 or isinstance(shape[0], int)
                       else shape[0])

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if any(p.requires_grad or p._backward is not None for p in parents):
        out.requires_grad = False
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape).astype(a.dtype))
        b._accumulate(_unbroadcast(g, b.shape).astype(b.dtype))

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape).astype(a.dtype))
        b._accumulate(_unbroadcast(g * a.data, b.shape).astype(b.dtype))

    return _make(data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(-g)

    return _make(-a.data, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching semantics (leading axes broadcast)."""
    a, b = _wrap(a), _wrap(b)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        ga = g @ b.data.swapaxes(-1, -2)
        gb = a.data.swapaxes(-1, -2) @ g
        a._accumulate(_unbroadcast(ga, a.shape).astype(a.dtype))
        b._accumulate(_unbroadcast(gb, b.shape).astype(b.dtype))

    return _make(data, (a, b), backward)


# -- shape manipulation ------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = a.data.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return _make(data, (a,), backward)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = a.data.transpose(axes)

    def backward(g):
        a._accumulate(g.transpose(inv))

    return _make(data, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t._accumulate(piece)

    return _make(data, tuple(tensors), backward)


def index_rows(a: Tensor, idx) -> Tensor:
    """Gather ``a[idx]`` along the first axis (used for embedding lookup)."""
    idx = np.asarray(idx)
    data = a.data[idx]

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        a._accumulate(ga)

    return _make(data, (a,), backward)


# -- reductions ---------------------------------------------------------------

def reduce_sum(a: Tensor, axis=None) -> Tensor:
    data = a.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).astype(a.dtype))
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.shape))

    return _make(data, (a,), backward)


def reduce_mean(a: Tensor, axis=None) -> Tensor:
    if axis is None:
        n = a.size
    else:
        n = a.shape[axis] if isinstance(axis, int) else \
            int(np.prod([a.shape[i] for i in axis]))
    return mul(reduce_sum(a, axis), 1.0 / n)


def spatial_mean(grid: Tensor) -> Tensor:
    """Mean over the leading two (spatial) axes of an h x w x c tensor."""
    if grid.ndim != 3:
        raise ShapeError(f"spatial_mean expects h x w x c, got {grid.shape}")
    return reduce_mean(reshape(grid, (grid.shape[0] * grid.shape[1],
                                      grid.shape[2])), axis=0)


# -- activations ---------------------------------------------------------------

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

ACTIVATIONS = ("gelu", "tanh", "sigmoid", "hsigmoid", "relu")


def activation(a: Tensor, kind: str) -> Tensor:
    if kind == "gelu":
        return gelu(a)
    if kind == "tanh":
        return tanh(a)
    if kind == "sigmoid":
        return sigmoid(a)
    if kind == "hsigmoid":
        return hsigmoid(a)
    if kind == "relu":
        return relu(a)
    raise ValueError(f"unsupported activation kind: {kind!r}")


def gelu(a: Tensor) -> Tensor:
    # Exact Gaussian-CDF form: x * Phi(x), not the tanh approximation.
    x = a.data
    phi = 0.5 * (1.0 + _special.erf(x * _INV_SQRT2))
    data = (x * phi).astype(a.dtype)

    def backward(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        a._accumulate((g * (phi + x * pdf)).astype(a.dtype))

    return _make(data, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def backward(g):
        a._accumulate(g * (1.0 - data * data))

    return _make(data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    data = _special.expit(a.data)

    def backward(g):
        a._accumulate(g * data * (1.0 - data))

    return _make(data, (a,), backward)


def hsigmoid(a: Tensor) -> Tensor:
    # clip((x + 3) / 6, 0, 1), piecewise-linear sigmoid surrogate.
    x = a.data
    data = np.clip((x + 3.0) / 6.0, 0.0, 1.0).astype(a.dtype)

    def backward(g):
        inside = ((x > -3.0) & (x < 3.0)).astype(a.dtype)
        a._accumulate(g * inside / 6.0)

    return _make(data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def backward(g):
        a._accumulate(g * (a.data > 0.0).astype(a.dtype))

    return _make(data, (a,), backward)


# -- normalization and softmax -------------------------------------------------

def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = (xhat * gain.data + bias.data).astype(a.dtype)
    n = x.shape[-1]

    def backward(g):
        gx = g * gain.data
        gain._accumulate(_unbroadcast(g * xhat, gain.shape).astype(gain.dtype))
        bias._accumulate(_unbroadcast(g, bias.shape).astype(bias.dtype))
        s1 = gx.sum(axis=-1, keepdims=True)
        s2 = (gx * xhat).sum(axis=-1, keepdims=True)
        a._accumulate((inv * (gx - s1 / n - xhat * s2 / n)).astype(a.dtype))

    return _make(data, (a, gain, bias), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        a._accumulate(data * (g - dot))

    return _make(data, (a,), backward)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row softmax."""
    targets = np.asarray(targets, dtype=np.int64)
    x = logits.data
    if x.ndim != 2 or targets.ndim != 1 or targets.shape[0] != x.shape[0]:
        raise ShapeError(f"cross_entropy expects (S, m) logits and S targets, "
                         f"got {x.shape} and {targets.shape}")
    with np.errstate(invalid="ignore", over="ignore"):
        m = x.max(axis=-1, keepdims=True)
        lse = m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))
        nll = lse[:, 0] - x[np.arange(x.shape[0]), targets]
    data = np.asarray(nll.mean(), dtype=x.dtype)
    if not np.isfinite(data):
        raise NumericError("cross_entropy produced a non-finite loss")

    def backward(g):
        p = np.exp(x - lse)
        p[np.arange(x.shape[0]), targets] -= 1.0
        logits._accumulate((g * p / x.shape[0]).astype(x.dtype))

    return _make(data, (logits,), backward)


# -- convolution and resampling -------------------------------------------------

def conv2d(a: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution over an h x w x c_in input with a k x k x c_in x c_out
    kernel (cross-correlation, as is conventional)."""
    x, w = a.data, kernel.data
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeError(f"conv2d expects h x w x c and k x k x c_in x c_out, "
                         f"got {x.shape} and {w.shape}")
    h, ww, cin = x.shape
    k, k2, kcin, cout = w.shape
    if k != k2:
        raise ShapeError(f"kernel must be square, got {w.shape}")
    if kcin != cin:
        raise ShapeError(f"channel mismatch: input has {cin}, kernel expects {kcin}")
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    if k > h + 2 * padding or k > ww + 2 * padding:
        raise ShapeError(f"kernel size {k} exceeds padded input {h}x{ww}+2*{padding}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (ww + 2 * padding - k) // stride + 1
    xp = np.pad(x, ((padding, padding), (padding, padding), (0, 0))) \
        if padding else x
    cols = np.empty((ho, wo, k, k, cin), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j, :] = xp[i:i + ho * stride:stride,
                                     j:j + wo * stride:stride, :]
    data = np.tensordot(cols, w, axes=([2, 3, 4], [0, 1, 2]))

    def backward(g):
        gw = np.tensordot(cols, g, axes=([0, 1], [0, 1]))
        kernel._accumulate(gw.astype(w.dtype))
        gcols = np.tensordot(g, w, axes=([2], [3]))  # (ho, wo, k, k, cin)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[i:i + ho * stride:stride,
                    j:j + wo * stride:stride, :] += gcols[:, :, i, j, :]
        if padding:
            gxp = gxp[padding:padding + h, padding:padding + ww, :]
        a._accumulate(gxp)

    return _make(data, (a, kernel), backward)


def _bilinear_axis(src: int, dst: int):
    """Index pairs and weights for align-corners-false resampling of one axis."""
    pos = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    lo = np.floor(pos).astype(np.int64)
    frac = pos - lo
    lo_c = np.clip(lo, 0, src - 1)
    hi_c = np.clip(lo + 1, 0, src - 1)
    return lo_c, hi_c, frac


def interpolate_bilinear(a: Tensor, target_h: int, target_w: int) -> Tensor:
    """Bilinear resize of an h x w x c tensor (align_corners=False). Exact
    identity when the target equals the source size."""
    x = a.data
    if x.ndim != 3:
        raise ShapeError(f"interpolate_bilinear expects h x w x c, got {x.shape}")
    h, w, _ = x.shape
    if (target_h, target_w) == (h, w):
        def backward_id(g):
            a._accumulate(g)
        return _make(x.copy(), (a,), backward_id)
    ylo, yhi, fy = _bilinear_axis(h, target_h)
    xlo, xhi, fx = _bilinear_axis(w, target_w)
    fy = fy[:, None, None].astype(x.dtype)
    fx = fx[None, :, None].astype(x.dtype)
    data = ((x[ylo][:, xlo] * (1 - fy) + x[yhi][:, xlo] * fy) * (1 - fx)
            + (x[ylo][:, xhi] * (1 - fy) + x[yhi][:, xhi] * fy) * fx)

    def backward(g):
        gx = np.zeros_like(x)
        g0 = g * (1 - fx)
        g1 = g * fx
        for rows, wy in ((ylo, 1 - fy), (yhi, fy)):
            np.add.at(gx, (rows[:, None], xlo[None, :]), g0 * wy)
            np.add.at(gx, (rows[:, None], xhi[None, :]), g1 * wy)
        a._accumulate(gx)

    return _make(data, (a,), backward)


def assert_finite(t: Tensor, context: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite values in {context}")
    return t

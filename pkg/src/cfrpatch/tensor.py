"""Small reverse-mode autodiff engine over float64 numpy arrays.

Graphs are built define-by-run: every op returns a new :class:`Tensor` that
remembers its parents and a closure mapping the output gradient to parent
gradients. :meth:`Tensor.backward` sorts the graph topologically (the tape)
and walks it once in reverse.

Spatial ops accept a single image ``[C, H, W]`` or a batch ``[N, C, H, W]``.
"""

from __future__ import annotations

import logging
from typing import Callable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(RuntimeError):
    """Raised when an operation's precondition is violated."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` over the axes that broadcasting expanded to reach ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """An n-dimensional float64 array that participates in a gradient tape.

    Args:
        data: Array-like values; always stored as a C-contiguous float64 array.
        requires_grad: Whether gradients should flow to this tensor.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data: ArrayLike, requires_grad: bool = False,
                 _parents: tuple = (), _backward: Optional[Callable] = None,
                 op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- graph ----------------------------------------------------------
    def topo_order(self) -> list:
        """Return the tape: every node reachable from ``self``, parents first."""
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def backward(self) -> None:
        """Populate ``.grad`` on every gradient-carrying ancestor of this scalar.

        Gradients are recomputed from zero on each call, so two ``backward``
        calls on different roots of a shared graph do not mix.
        """
        if self.data.size != 1:
            raise ContractError(f"backward needs a scalar root, got shape {self.shape}")
        order = self.topo_order()
        for node in order:
            node.grad = np.zeros_like(node.data) if node.requires_grad else None
        if not self.requires_grad:
            return
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad += g

    # -- arithmetic -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return index_select(self, index)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, backward: Callable, op: str) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=requires, _parents=parents if requires else (),
                  _backward=backward if requires else None, op=op)


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data ** 2), b.shape))

    return _make(a.data / b.data, (a, b), backward, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    def backward(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _make(a.data ** exponent, (a,), backward, "pow")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def backward(g):
        return (g * 0.5 / out,)

    return _make(out, (a,), backward, "sqrt")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def maximum(a: Tensor, floor: float) -> Tensor:
    """Elementwise ``max(a, floor)`` against a constant; gradient passes where ``a > floor``."""
    keep = a.data > floor
    return _make(np.where(keep, a.data, floor), (a,), lambda g: (g * keep,), "maximum")


def relu(x: Tensor) -> Tensor:
    """Elementwise ``max(0, x)``; the subgradient at 0 is taken as 0."""
    keep = x.data > 0
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "relu")


# -- reductions and shape -----------------------------------------------

def tsum(a: Tensor, axis=None) -> Tensor:
    out = a.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def flatten(x: Tensor, batched: bool) -> Tensor:
    return reshape(x, (x.shape[0], -1) if batched else (-1,))


def index_select(a: Tensor, index) -> Tensor:
    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(a.data[index], (a,), backward, "index")


# -- layers ---------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``W x + b`` for ``x`` of shape ``[n]`` or ``[B, n]``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias {bias.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T + bias.data

    def backward(g):
        if x.ndim == 1:
            gw = np.outer(g, x.data)
            gb = g
        else:
            gw = g.T @ x.data
            gb = g.sum(axis=0)
        return g @ weight.data, gw, gb

    return _make(out, (x, weight, bias), backward, "linear")


def _as_batch(x: Tensor) -> tuple:
    if x.ndim == 3:
        return x.data[None], False
    if x.ndim == 4:
        return x.data, True
    raise DimensionError(f"expected [C,H,W] or [N,C,H,W], got {x.shape}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    Output spatial size is ``floor((H + 2*pad - kh) / stride) + 1``.
    """
    if stride < 1 or pad < 0:
        raise ValueError("conv2d: stride must be positive and pad non-negative")
    data, batched = _as_batch(x)
    n, cin, h, w = data.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise DimensionError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    if bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise DimensionError("conv2d: kernel larger than padded input")
    padded = np.pad(data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else data
    # windows: [n, cin, oh, ow, kh, kw]
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = windows.shape[2], windows.shape[3]
    out = np.einsum("ncijkl,ockl->noij", windows, weight.data, optimize=True)
    out += bias.data[None, :, None, None]

    def backward(g):
        gb4 = g if batched else g[None]
        gx = gw = gbias = None
        if weight.requires_grad:
            gw = np.einsum("noij,ncijkl->ockl", gb4, windows, optimize=True)
        if bias.requires_grad:
            gbias = gb4.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gpad = np.zeros_like(padded)
            # [n, cin, oh, ow, kh, kw] contribution of each output cell
            contrib = np.einsum("noij,ockl->ncijkl", gb4, weight.data, optimize=True)
            for i in range(kh):
                for j in range(kw):
                    gpad[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += contrib[..., i, j]
            gx = gpad[:, :, pad:pad + h, pad:pad + w] if pad else gpad
            if not batched:
                gx = gx[0]
        return gx, gw, gbias

    return _make(out if batched else out[0], (x, weight, bias), backward, "conv2d")


def maxpool2d(x: Tensor, k: int, stride: Optional[int] = None) -> Tensor:
    """Window-wise maximum. Ties route gradient to the first row-major argmax."""
    stride = k if stride is None else stride
    data, batched = _as_batch(x)
    n, c, h, w = data.shape
    if k > h or k > w:
        raise DimensionError(f"maxpool2d: window {k} larger than input {h}x{w}")
    windows = sliding_window_view(data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = windows.shape[2], windows.shape[3]
    flat = windows.reshape(n, c, oh, ow, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb4 = g if batched else g[None]
        gx = np.zeros_like(data)
        ni, ci, ii, jj = np.indices((n, c, oh, ow))
        rows = ii * stride + arg // k
        cols = jj * stride + arg % k
        np.add.at(gx, (ni, ci, rows, cols), gb4)
        return (gx if batched else gx[0],)

    return _make(out if batched else out[0], (x,), backward, "maxpool2d")


def softmax(z: Tensor) -> Tensor:
    """Softmax along the last axis, computed after subtracting the max."""
    shifted = z.data - z.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (z,), backward, "softmax")


def log_softmax(z: Tensor) -> Tensor:
    shifted = z.data - z.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _make(out, (z,), backward, "log_softmax")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean ``-log softmax(z)[y]`` over a batch, or the single value for ``[C]`` logits."""
    logp = log_softmax(logits)
    if logits.ndim == 1:
        return -logp[int(labels)]
    labels = np.asarray(labels, dtype=int)
    picked = logp[(np.arange(len(labels)), labels)]
    return -mean(picked)


def l2_norm(x: Tensor) -> Tensor:
    return sqrt(tsum(x * x))


# -- gradient checking ----------------------------------------------------

def numerical_grad(f: Callable[[Tensor], Tensor], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(x)).item()
        flat[i] = orig - h
        fm = f(Tensor(x)).item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def analytic_grad(f: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    t = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    out = f(t)
    out.backward()
    return t.grad


def grad_check(f: Callable[[Tensor], Tensor], x: ArrayLike, h: float = 1e-5) -> float:
    """Max over elements of ``|analytic - numeric| / max(1, |analytic|)``."""
    x = np.asarray(x, dtype=np.float64)
    a = analytic_grad(f, x)
    n = numerical_grad(f, x, h)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(1.0, np.abs(a))))


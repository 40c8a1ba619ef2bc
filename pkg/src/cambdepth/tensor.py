"""Dense tensors with reverse-mode automatic differentiation.

Feature maps are channel-last, ``(H, W, C)`` or batched ``(N, H, W, C)``.
Only the operations needed by the network and the loss are provided.  A
tensor produced from at least one ``requires_grad`` input remembers its
parents and a closure mapping the output gradient to input gradients;
:func:`backward` linearises that graph into a :class:`Tape` and walks it in
reverse.
"""

from __future__ import annotations

from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DomainError, ParameterError, ShapeError

__all__ = [
    "Tensor", "Tape", "as_tensor", "backward",
    "add", "sub", "broadcast_mul", "div", "neg", "power", "log", "absolute",
    "sigmoid", "relu", "clip", "tsum", "mean", "reshape", "concat",
    "upsample_nearest", "avgpool2", "window_mean", "conv2d", "dense",
    "pap_global", "pap_channel",
]


class Tensor:
    """An n-dimensional array node in the autodiff graph.

    Tensors are treated as immutable once built; operations always return
    new tensors.  Identity (not value) is used for hashing so tensors can key
    gradient maps.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 _parents: Tuple["Tensor", ...] = (), _backward: Optional[Callable] = None,
                 op: str = "leaf"):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if any(n < 1 for n in arr.shape):
            raise ShapeError(f"tensor extents must all be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.op = op
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> Tuple[int, ...]:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return broadcast_mul(self, other)

    def __rmul__(self, other):
        return broadcast_mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return _getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable, op: str) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=grad_fn, op=op)
    return Tensor(data, op=op)


def _binary_operands(a, b) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# tape and reverse pass


class Tape:
    """Topologically ordered record of the nodes that produced a tensor."""

    def __init__(self, nodes: Sequence[Tensor]):
        self.nodes = list(nodes)

    @classmethod
    def record(cls, output: Tensor) -> "Tape":
        order = []
        seen = set()
        stack = [(output, False)]
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
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(output: Tensor, tape: Optional[Tape] = None) -> Dict[Tensor, np.ndarray]:
    """Accumulate d(output)/d(leaf) for every ``requires_grad`` leaf.

    Returns a map from leaf tensor to gradient array; each leaf's ``.grad``
    is set as well.
    """
    if output.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    if tape is None:
        tape = Tape.record(output)
    grads: Dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    leaves: Dict[Tensor, np.ndarray] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g
                leaves[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _broadcast_shape(a, b, "add")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), grad_fn, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _broadcast_shape(a, b, "sub")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), grad_fn, "sub")


def broadcast_mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _broadcast_shape(a, b, "broadcast_mul")

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), grad_fn, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def grad_fn(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make(out, (a, b), grad_fn, "div")


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


def power(x: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    out = x.data ** exponent

    def grad_fn(g):
        return (g * exponent * x.data ** (exponent - 1.0),)

    return _make(out, (x,), grad_fn, "pow")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError("log of a non-positive value")
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def absolute(x: Tensor) -> Tensor:
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, clipped so every output is strictly inside (0, 1)."""
    fi = np.finfo(x.dtype)
    with np.errstate(over="ignore", under="ignore"):
        out = 1.0 / (1.0 + np.exp(-x.data))
    out = np.clip(out, fi.tiny, 1.0 - fi.epsneg).astype(x.dtype, copy=False)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0).astype(x.dtype, copy=False), (x,),
                 lambda g: (g * mask,), "relu")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    # gradient passes on the closed interval so clip(1, 0, 1) stays differentiable
    mask = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * mask,), "clip")


# ---------------------------------------------------------------------------
# reductions and shape plumbing


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), grad_fn, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axes, keepdims) / count


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def _getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]

    def grad_fn(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out), (x,), grad_fn, "getitem")


def concat(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    ax = axis % a.ndim
    if a.ndim != b.ndim or any(a.shape[i] != b.shape[i] for i in range(a.ndim) if i != ax):
        raise ShapeError(f"concat: shapes {a.shape} and {b.shape} disagree off axis {axis}")
    split = a.shape[ax]

    def grad_fn(g):
        return np.take(g, range(split), axis=ax), np.take(g, range(split, g.shape[ax]), axis=ax)

    return _make(np.concatenate([a.data, b.data], axis=ax), (a, b), grad_fn, "concat")


def _feature_map(x: Tensor, op: str) -> None:
    if x.ndim not in (3, 4):
        raise ShapeError(f"{op}: expected (H, W, C) or (N, H, W, C), got {x.shape}")


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    _feature_map(x, "upsample_nearest")
    out = np.repeat(np.repeat(x.data, factor, axis=-3), factor, axis=-2)

    def grad_fn(g):
        *lead, h, w, c = x.shape
        return (g.reshape(*lead, h, factor, w, factor, c).sum(axis=(-4, -2)),)

    return _make(out, (x,), grad_fn, "upsample")


def avgpool2(x: Tensor) -> Tensor:
    _feature_map(x, "avgpool2")
    *lead, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2 needs even H and W, got {h}x{w}")
    out = x.data.reshape(*lead, h // 2, 2, w // 2, 2, c).mean(axis=(-4, -2))

    def grad_fn(g):
        g4 = np.repeat(np.repeat(g, 2, axis=-3), 2, axis=-2)
        return (g4 * 0.25,)

    return _make(out, (x,), grad_fn, "avgpool2")


def window_mean(x: Tensor, b: int) -> Tensor:
    """Mean of every b x b window over the last two axes, stride 1, no padding."""
    h, w = x.shape[-2:]
    if b < 1 or b > min(h, w):
        raise ShapeError(f"window size {b} does not fit a {h}x{w} map")
    out = sliding_window_view(x.data, (b, b), axis=(-2, -1)).mean(axis=(-2, -1))
    oh, ow = out.shape[-2:]

    def grad_fn(g):
        full = np.zeros_like(x.data)
        gs = g / (b * b)
        for i in range(b):
            for j in range(b):
                full[..., i:i + oh, j:j + ow] += gs
        return (full,)

    return _make(out, (x,), grad_fn, "window_mean")


# ---------------------------------------------------------------------------
# layers


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``x`` is (H, W, Cin) or (N, H, W, Cin); ``kernel`` is (k, k, Cin, Cout).
    """
    _feature_map(x, "conv2d")
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise ShapeError(f"conv2d kernel must be (k, k, Cin, Cout), got {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ParameterError("conv2d needs stride >= 1 and padding >= 0")
    k, _, cin, cout = kernel.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"conv2d: input has {x.shape[-1]} channels, kernel expects {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    n, h, w, _ = xd.shape
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {h}x{w}")
    xp = np.pad(xd, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else xd
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    # (n, ho, wo, cin, k, k) -> rows of (k, k, cin) patches matching the kernel layout
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, k * k * cin)
    kmat = kernel.data.reshape(k * k * cin, cout)
    out = cols @ kmat
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, ho, wo, cout)
    if not batched:
        out = out[0]

    def grad_fn(g):
        g2 = g.reshape(n * ho * wo, cout)
        gk = (cols.T @ g2).reshape(kernel.shape) if kernel.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ kmat.T).reshape(n, ho, wo, k, k, cin)
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
            gx = dxp[:, padding:padding + h, padding:padding + w, :]
            if not batched:
                gx = gx[0]
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, parents, grad_fn, "conv2d")


def dense(x: Tensor, weights: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Fully connected layer over the last axis: out = x @ weights + bias."""
    if weights.ndim != 2 or x.shape[-1] != weights.shape[0]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weights {weights.shape}")
    if bias is not None and bias.shape != (weights.shape[1],):
        raise ShapeError(f"dense: bias shape {bias.shape} != ({weights.shape[1]},)")
    out = x.data @ weights.data
    if bias is not None:
        out = out + bias.data

    def grad_fn(g):
        gx = g @ weights.data.T
        x2 = x.data.reshape(-1, x.shape[-1])
        gw = x2.T @ g.reshape(-1, weights.shape[1])
        gb = g.reshape(-1, weights.shape[1]).sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, weights) if bias is None else (x, weights, bias)
    return _make(out, parents, grad_fn, "dense")


# ---------------------------------------------------------------------------
# power-average pooling


def _power_pool(x: Tensor, p: float, axes: Tuple[int, ...], op: str) -> Tensor:
    p = float(p)
    if not p >= 1.0:
        raise ParameterError(f"{op}: p must be >= 1, got {p}")
    neg_idx = np.argwhere(x.data < 0)
    if len(neg_idx):
        idx = tuple(int(i) for i in neg_idx[0])
        raise DomainError(f"{op}: negative input {x.data[idx]!r} at index {idx}")
    if p == 1.0:
        out = x.data.sum(axis=axes, keepdims=True)
    else:
        # factor out the max so x**p cannot overflow for large p
        peak = x.data.max(axis=axes, keepdims=True)
        scale = np.where(peak > 0, peak, 1.0)
        out = peak * ((x.data / scale) ** p).sum(axis=axes, keepdims=True) ** (1.0 / p)

    def grad_fn(g):
        if p == 1.0:
            return (np.broadcast_to(g, x.shape).copy(),)
        safe = np.where(out > 0, out, 1.0)
        local = np.where(out > 0, (x.data / safe) ** (p - 1.0), 0.0)
        return (g * local,)

    return _make(out.astype(x.dtype, copy=False), (x,), grad_fn, op)


def pap_global(x: Tensor, p: float) -> Tensor:
    """Global power-average pooling: (sum over H, W of x**p)**(1/p) per channel."""
    _feature_map(x, "pap_global")
    return _power_pool(x, p, (x.ndim - 3, x.ndim - 2), "pap_global")


def pap_channel(x: Tensor, p: float) -> Tensor:
    """Power-average pooling along the channel axis, keeping it as extent 1."""
    _feature_map(x, "pap_channel")
    return _power_pool(x, p, (x.ndim - 1,), "pap_channel")

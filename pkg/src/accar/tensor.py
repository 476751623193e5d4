"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation creates a new :class:`Tensor` whose ``_parents``
point at its inputs and whose ``_backward`` closure maps the upstream gradient
to one gradient per parent. Node ids grow monotonically, so sorting the nodes
reachable from a loss by id gives a valid topological order; that sorted list
is the :class:`Tape`.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_ids = itertools.count()

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class GraphError(RuntimeError):
    """Raised on misuse of the computation graph (double backward, non-scalar loss)."""


class ShapeError(ValueError):
    """Raised when operand shapes are structurally incompatible."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._consumed = False
        self.name = name

    @classmethod
    def _op(cls, data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn) -> Tensor:
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.node_id = next(_ids)
        out._consumed = False
        out.name = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic ---------------------------------------------------------
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

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Topologically ordered record of the operations that produced ``output``."""

    def __init__(self, output: Tensor):
        seen: dict[int, Tensor] = {}
        stack = [output]
        while stack:
            node = stack.pop()
            if node.node_id in seen:
                continue
            if node._consumed:
                raise GraphError("this graph has already been consumed by a backward pass")
            seen[node.node_id] = node
            stack.extend(node._parents)
        self.output = output
        self.nodes = [seen[k] for k in sorted(seen)]

    def backward(self) -> None:
        out = self.output
        if out.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {out.shape}")
        if out._consumed:
            raise GraphError("this graph has already been consumed by a backward pass")
        grads: dict[int, np.ndarray] = {out.node_id: np.ones_like(out.data)}
        for node in reversed(self.nodes):
            g = grads.pop(node.node_id, None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.node_id in grads:
                    grads[parent.node_id] = grads[parent.node_id] + pg
                else:
                    grads[parent.node_id] = pg
        for node in self.nodes:
            if node._backward is not None:
                node._consumed = True
                # drop saved context so the graph can be collected
                node._backward = None
                node._parents = ()
        out._consumed = True


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("this graph has already been consumed by a backward pass")
    if not loss.requires_grad:
        loss._consumed = True
        return
    Tape(loss).backward()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return Tensor._op(ad * bd, (a, b),
                      lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return Tensor._op(out, (a, b),
                      lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def power(x: Tensor, exponent: float) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return Tensor._op(xd ** exponent, (x,), lambda g: (g * exponent * xd ** (exponent - 1),))


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return Tensor._op(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return Tensor._op(np.log(xd), (x,), lambda g: (g / xd,))


def sqrt(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return Tensor._op(out, (x,), lambda g: (g * 0.5 / out,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    """max(x, slope*x); the derivative at exactly 0 is ``slope``."""
    if slope < 0:
        raise ValueError("slope must be non-negative")
    x = as_tensor(x)
    factor = np.where(x.data > 0, 1.0, slope)
    return Tensor._op(x.data * factor, (x,), lambda g: (g * factor,))


def detach(x: Tensor) -> Tensor:
    """Same values, cut from the graph."""
    x = as_tensor(x)
    return Tensor(x.data.copy())


# shape ---------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return Tensor._op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def getitem(x: Tensor, index) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    idx = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (slice, int, type(Ellipsis), type(None))) for i in idx)

    def bw(g):
        full = np.zeros(shape)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor._op(x.data[index], (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return Tensor._op(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                      lambda g: tuple(np.split(g, splits, axis=axis)))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack two C×H×W feature maps along the channel axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 3 or b.ndim != 3 or a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    return concat([a, b], axis=0)


# reductions ----------------------------------------------------------------

def reduce_sum(x: Tensor, axis=None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    out = x.data.sum(axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._op(np.asarray(out, dtype=np.float64), (x,), bw)


def reduce_mean(x: Tensor, axis=None) -> Tensor:
    x = as_tensor(x)
    if x.size == 0:
        raise ShapeError("mean of an empty tensor")
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return reduce_sum(x, axis) * (1.0 / n)


# layers --------------------------------------------------------------------

def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    # (C, ho, wo, k, k) -> (C, k, k, ho, wo) -> (C*k*k, ho*wo)
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(-1, ho * wo)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a C_in×H×W map with a C_out×C_in×k×k kernel (zero padding)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects C×H×W input and 4-d weight, got {x.shape}, {weight.shape}")
    c_out, c_in, k, k2 = weight.shape
    if k != k2:
        raise ShapeError("only square kernels are supported")
    if x.shape[0] != c_in:
        raise ShapeError(f"input has {x.shape[0]} channels, weight expects {c_in}")
    _, h, w = x.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    if k == 1 and stride == 1:
        cols = xp.reshape(c_in, -1)
    else:
        cols = _im2col(xp, k, stride, ho, wo)
    wmat = weight.data.reshape(c_out, -1)
    out = wmat @ cols
    parents: list[Tensor] = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data[:, None]
        parents.append(bias)
    out = out.reshape(c_out, ho, wo)
    xp_shape = xp.shape

    def bw(g):
        g2 = g.reshape(c_out, -1)
        gw = (g2 @ cols.T).reshape(weight.shape)
        gcols = wmat.T @ g2
        if k == 1 and stride == 1:
            gxp = gcols.reshape(xp_shape)
        else:
            gcols = gcols.reshape(c_in, k, k, ho, wo)
            gxp = np.zeros(xp_shape)
            for i in range(k):
                for j in range(k):
                    gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
        gx = gxp[:, padding:padding + h, padding:padding + w] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=1))
        return grads

    return Tensor._op(out, parents, bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """W·x + b for a flat input vector."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 1 or weight.ndim != 2 or weight.shape[1] != x.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = wd @ xd
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def bw(g):
        grads = [wd.T @ g, np.outer(g, xd)]
        if bias is not None:
            grads.append(g)
        return grads

    return Tensor._op(out, parents, bw)


def instance_normalize(x: Tensor, eps: float = 1e-5) -> tuple[Tensor, Tensor, Tensor]:
    """Per-channel standardisation of a C×H×W map.

    Returns ``(normalized, mu, sigma)`` where ``sigma`` is the population std
    (no eps) and ``normalized = (x - mu) / sqrt(sigma**2 + eps)``.
    """
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"instance_normalize expects C×H×W, got {x.shape}")
    c = x.shape[0]
    n = x.shape[1] * x.shape[2]
    flat = x.data.reshape(c, n)
    mu = flat.mean(axis=1)
    centered = flat - mu[:, None]
    var = (centered * centered).mean(axis=1)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv[:, None]

    def bw(g):
        g = g.reshape(c, n)
        gx = inv[:, None] / n * (n * g - g.sum(axis=1, keepdims=True)
                                 - xhat * (g * xhat).sum(axis=1, keepdims=True))
        return (gx.reshape(x.shape),)

    normalized = Tensor._op(xhat.reshape(x.shape), (x,), bw)
    mean = reduce_mean(reshape(x, (c, n)), axis=1)
    sigma = sqrt(reduce_mean(power(reshape(x, (c, n)) - reshape(mean, (c, 1)), 2), axis=1))
    return normalized, mean, sigma


def _bilinear_matrix(n: int) -> np.ndarray:
    """(2n × n) align-corners interpolation matrix."""
    m = 2 * n
    a = np.zeros((m, n))
    if n == 1:
        a[:, 0] = 1.0
        return a
    pos = np.arange(m) * (n - 1) / (m - 1)
    lo = np.minimum(np.floor(pos).astype(int), n - 2)
    frac = pos - lo
    a[np.arange(m), lo] = 1.0 - frac
    a[np.arange(m), lo + 1] += frac
    return a


def upsample2x_bilinear(x: Tensor) -> Tensor:
    """Align-corners bilinear doubling of a C×H×W map."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"upsample expects C×H×W, got {x.shape}")
    _, h, w = x.shape
    ah, aw = _bilinear_matrix(h), _bilinear_matrix(w)
    out = np.einsum("ih,chw,jw->cij", ah, x.data, aw, optimize=True)
    return Tensor._op(out, (x,), lambda g: (np.einsum("ih,cij,jw->chw", ah, g, aw, optimize=True),))


def box_sum(x: Tensor, window: int) -> Tensor:
    """Sum over a centered window×window neighbourhood, zero outside (same size)."""
    x = as_tensor(x)
    r = window // 2

    def boxsum(a: np.ndarray) -> np.ndarray:
        pad = [(0, 0)] * (a.ndim - 2) + [(r, r), (r, r)]
        c = np.pad(a, pad)
        c = np.cumsum(np.cumsum(c, axis=-2), axis=-1)
        c = np.pad(c, [(0, 0)] * (a.ndim - 2) + [(1, 0), (1, 0)])
        return c[..., window:, window:] - c[..., :-window, window:] - c[..., window:, :-window] + c[..., :-window, :-window]

    # the zero-padded box filter is self-adjoint
    return Tensor._op(boxsum(x.data), (x,), lambda g: (boxsum(g),))


# verification ----------------------------------------------------------------

def numerical_gradient(f: Callable[[Tensor], Tensor], point: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    point = np.array(point, dtype=np.float64)
    grad = np.zeros_like(point)
    flat = point.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f(Tensor(point)).item()
        flat[i] = old - eps
        fm = f(Tensor(point)).item()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def gradient_check(f: Callable[[Tensor], Tensor], point, eps: float = 1e-5) -> float:
    """Max relative disagreement between backprop and central differences."""
    point = np.array(point, dtype=np.float64)
    x = Tensor(point.copy(), requires_grad=True)
    backward(f(x))
    analytic = x.grad if x.grad is not None else np.zeros_like(point)
    numeric = numerical_gradient(f, point, eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    rel = np.abs(analytic - numeric) / denom
    # both sides ~0: defined as agreement
    rel[np.maximum(np.abs(analytic), np.abs(numeric)) <= 1e-12] = 0.0
    return float(rel.max()) if rel.size else 0.0


def parameters_grad_check(loss_fn: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5,
                          max_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Gradient check of a scalar closure w.r.t. a set of leaf tensors.

    Perturbs ``max_coords`` randomly chosen coordinates per tensor (all when None).
    Uses an absolute floor of 1e-8 relative to the loss scale to ignore coordinates
    whose true derivative is numerically zero.
    """
    params = list(params)
    for p in params:
        p.grad = None
    backward(loss_fn())
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + eps
            fp = loss_fn().item()
            flat[i] = old - eps
            fm = loss_fn().item()
            flat[i] = old
            num = (fp - fm) / (2 * eps)
            ana = analytic.reshape(-1)[i]
            scale = max(abs(ana), abs(num))
            if scale <= 1e-8:
                continue
            worst = max(worst, abs(ana - num) / scale)
    return worst

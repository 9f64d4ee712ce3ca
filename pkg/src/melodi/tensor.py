"""Dense tensors with reverse-mode automatic differentiation.

Every op records its parents and a backward closure on the output tensor.
``backward`` orders the recorded graph topologically (reverse creation
order) and pushes adjoints through it. Leaf tensors that require grad
accumulate into ``.grad`` until ``zero_grad`` is called; intermediates
never keep their adjoints.

Broadcasting is limited to leading batch dimensions: the smaller operand's
shape must equal a suffix of the larger one.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "DimensionError",
    "DegenerateRowError",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "zeros",
    "matmul",
    "softmax_rows",
    "concat",
    "layer_norm",
    "embedding",
    "cross_entropy",
    "gelu",
    "relu",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "dropout",
    "backward",
    "zero_grad",
    "grad_check",
    "set_default_dtype",
    "get_default_dtype",
]


class DimensionError(ValueError):
    pass


class DegenerateRowError(ValueError):
    pass


_GRAD_ENABLED = True
_DEFAULT_DTYPE = np.float64
_counter = itertools.count()


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


def get_default_dtype():
    return _DEFAULT_DTYPE


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_order", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _infer_dtype(data))
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._order = next(_counter)

    # -- construction of graph nodes -------------------------------------

    @staticmethod
    def from_op(data: np.ndarray, parents: Sequence["Tensor"], backward_fn) -> "Tensor":
        """Wrap ``data`` as the output of an op.

        ``backward_fn(grad_out)`` must return one adjoint (or None) per parent.
        """
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._order = next(_counter)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- basic properties ---------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return _binary(self, other, np.add, lambda g, a, b: (g, g))

    __radd__ = __add__

    def __sub__(self, other):
        return _binary(self, other, np.subtract, lambda g, a, b: (g, -g))

    def __rsub__(self, other):
        return _binary(_lift(other, self), self, np.subtract, lambda g, a, b: (g, -g))

    def __mul__(self, other):
        return _binary(self, other, np.multiply, lambda g, a, b: (g * b, g * a))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return _binary(self, other, np.divide, lambda g, a, b: (g / b, -g * a / (b * b)))
        return self * (1.0 / other)

    def __neg__(self):
        return Tensor.from_op(-self.data, (self,), lambda g: (-g,))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        data = self.data[idx]
        shape, dtype = self.data.shape, self.data.dtype

        def bw(g):
            full = np.zeros(shape, dtype=dtype)
            if _is_fancy(idx):
                np.add.at(full, idx, g)
            else:
                full[idx] = g
            return (full,)

        return Tensor.from_op(data, (self,), bw)

    # -- shape ops -----------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        return Tensor.from_op(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes) -> "Tensor":
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = tuple(np.argsort(axes))
        return Tensor.from_op(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    def swapaxes(self, a: int, b: int) -> "Tensor":
        return Tensor.from_op(self.data.swapaxes(a, b), (self,), lambda g: (g.swapaxes(a, b),))

    @property
    def T(self) -> "Tensor":
        return self.swapaxes(-1, -2)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.data.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor.from_op(np.asarray(out), (self,), bw)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else np.prod([self.data.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))


class Parameter(Tensor):
    """A named leaf tensor owned by a model."""

    __slots__ = ("name", "trainable")

    def __init__(self, data, name: str = "", trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=trainable, dtype=dtype)
        self.name = name
        self.trainable = trainable

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _raise_item(t):
    raise DimensionError(f"item() needs a single-element tensor, got shape {t.shape}")


def _infer_dtype(data):
    if isinstance(data, np.ndarray) and data.dtype.kind == "f":
        return data.dtype
    return _DEFAULT_DTYPE


def _is_fancy(idx) -> bool:
    if isinstance(idx, tuple):
        return any(isinstance(i, (list, np.ndarray)) for i in idx)
    return isinstance(idx, (list, np.ndarray))


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _check_broadcast(a: tuple, b: tuple) -> None:
    if a == b or len(a) == 0 or len(b) == 0:
        return
    short, long_ = (a, b) if len(a) < len(b) else (b, a)
    if len(short) == len(long_) or long_[len(long_) - len(short):] != short:
        raise DimensionError(f"shapes {a} and {b} differ beyond leading batch dimensions")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    if g.shape != shape:  # scalar operand
        g = g.sum().reshape(shape)
    return g


def _binary(a, b, fn, grads):
    if not isinstance(a, Tensor):
        a = _lift(a, b)
    if not isinstance(b, Tensor):
        b = _lift(b, a)
    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        ga, gb = grads(g, ad, bd)
        return (_unbroadcast(ga, ad.shape) if a.requires_grad else None,
                _unbroadcast(gb, bd.shape) if b.requires_grad else None)

    return Tensor.from_op(fn(ad, bd), (a, b), bw)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or _DEFAULT_DTYPE), requires_grad=requires_grad)


# -- core ops -------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes are batch axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(ad @ bd, (a, b), bw)


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis. ``mask`` is True where an entry is kept.

    Masked entries come out exactly zero. A row with no kept entries raises
    DegenerateRowError.
    """
    z = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=-1).all():
            raise DegenerateRowError("softmax row has every entry masked")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor.from_op(y, (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if len(tensors) == 1:
        return tensors[0]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Tensor.from_op(data, tensors, bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = _unbroadcast(g * xhat, gd.shape) if gamma.requires_grad else None
        gb = _unbroadcast(g, gd.shape) if beta.requires_grad else None
        return gx, gg, gb

    return Tensor.from_op(xhat * gd + beta.data, (x, gamma, beta), bw)


def embedding(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` selected by integer array ``ids`` (any shape)."""
    ids = np.asarray(ids, dtype=np.int64)
    td = table.data

    def bw(g):
        full = np.zeros_like(td)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, td.shape[-1]))
        return (full,)

    return Tensor.from_op(td[ids], (table,), bw)


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over positions where mask is True."""
    ld = logits.data
    targets = np.asarray(targets, dtype=np.int64)
    if mask is None:
        mask = np.ones(targets.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("cross_entropy: every position is masked")
    z = ld - ld.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    safe_t = np.where(mask, targets, 0)
    picked = np.take_along_axis(logp, safe_t[..., None], axis=-1)[..., 0]
    loss = -(picked * mask).sum() / count

    def bw(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe_t[..., None], 1.0, axis=-1)
        return ((p - onehot) * (mask[..., None] * (float(g) / count)),)

    return Tensor.from_op(np.asarray(loss, dtype=ld.dtype), (logits,), bw)


def _unary(x: Tensor, y: np.ndarray, dydx: Callable[[], np.ndarray]) -> Tensor:
    return Tensor.from_op(y, (x,), lambda g: (g * dydx(),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _unary(x, y, lambda: y)


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _unary(x, np.log(xd), lambda: 1.0 / xd)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _unary(x, y, lambda: 1.0 - y * y)


def sigmoid(x: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-x.data))
    return _unary(x, y, lambda: y * (1.0 - y))


def relu(x: Tensor) -> Tensor:
    xd = x.data
    return _unary(x, np.maximum(xd, 0), lambda: (xd > 0).astype(xd.dtype))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(inner)
    y = 0.5 * xd * (1.0 + t)

    def d():
        return 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)

    return _unary(x, y, d)


def dropout(x: Tensor, keep: np.ndarray | None, rate: float) -> Tensor:
    """Apply a precomputed boolean keep-mask with inverted scaling."""
    if keep is None or rate <= 0.0:
        return x
    scale = (keep / (1.0 - rate)).astype(x.dtype)
    return Tensor.from_op(x.data * scale, (x,), lambda g: (g * scale,))


# -- autodiff driver --------------------------------------------------------


def _topo(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(p for p in t._parents if p.requires_grad)
    nodes.sort(key=lambda t: t._order, reverse=True)
    return nodes


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into the ``.grad`` of every reachable leaf."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in _topo(loss):
        g = adj.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in adj:
                adj[key] = adj[key] + pg
            else:
                adj[key] = pg


Tensor.backward = backward  # type: ignore[attr-defined]


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
               samples_per_param: int | None = 8, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` is re-evaluated with perturbed parameter values; all params must be
    float64. Error per coordinate is |a - n| / max(1e-8, |a| + |n|).
    """
    for p in params:
        if p.data.dtype != np.float64:
            raise TypeError("grad_check requires float64 parameters")
    zero_grad(params)
    backward(f())
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            if not np.shares_memory(flat, p.data):
                raise ValueError("grad_check needs contiguous parameter storage")
            n = flat.size
            if samples_per_param is None or samples_per_param >= n:
                coords = range(n)
            else:
                coords = rng.choice(n, size=samples_per_param, replace=False)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f().data)
                flat[i] = orig - eps
                fm = float(f().data)
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                ana = float(a.reshape(-1)[i])
                err = abs(ana - num) / max(1e-8, abs(ana) + abs(num))
                worst = max(worst, err)
    zero_grad(params)
    return worst

"""Small reverse-mode autodiff over float64 numpy arrays.

Only the operations the task head and its losses need are provided.
Layout convention: channel axis first, any trailing spatial axes
(``C x H x W``, ``C x B x H x W`` or a flattened ``C x P`` pixel matrix).
"""
from __future__ import annotations

import builtins
import contextlib
import threading

import numpy as np

PROB_FLOOR = 1e-12

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (per thread)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class FlopCounter:
    """Counts multiply-add FLOPs of linear ops (one multiply-add = 2 FLOPs).

    Elementwise ops (relu, softmax, gating, losses) are not counted.
    Counts are attributed to the innermost active ``scope`` tag.
    """

    def __init__(self):
        self.by_scope: dict[str, int] = {}
        self._scopes = ["untagged"]

    @property
    def total(self) -> int:
        return builtins.sum(self.by_scope.values())

    def add(self, n: int):
        key = self._scopes[-1]
        self.by_scope[key] = self.by_scope.get(key, 0) + int(n)

    @contextlib.contextmanager
    def scope(self, name: str):
        self._scopes.append(name)
        try:
            yield
        finally:
            self._scopes.pop()


def _counter() -> FlopCounter | None:
    return getattr(_state, "counter", None)


@contextlib.contextmanager
def count_flops():
    """Install a FlopCounter for the current thread and yield it."""
    prev = _counter()
    c = FlopCounter()
    _state.counter = c
    try:
        yield c
    finally:
        _state.counter = prev


@contextlib.contextmanager
def flop_scope(name: str):
    c = _counter()
    if c is None:
        yield
        return
    with c.scope(name):
        yield


def _count(n: int):
    c = _counter()
    if c is not None:
        c.add(n)


class ShapeError(ValueError):
    pass


class Tensor:
    """Dense float64 array with an optional gradient and a backward closure."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def backward(self, grad=None):
        backward(self, grad)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A named leaf tensor that always requires grad."""

    __slots__ = ()

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn) -> Tensor:
    req = _grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req)
    if req:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    return add(a, scale(b, -1.0))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), bw)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def bw(g):
        _accum(a, g * c)

    return _result(a.data * c, (a,), bw)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def bw(g):
        _accum(a, g * mask)

    return _result(np.where(mask, a.data, 0.0), (a,), bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None

    def bw(g):
        _accum(a, g.reshape(a.shape))

    return _result(out, (a,), bw)


# ---------------------------------------------------------------- reductions


def sum(a) -> Tensor:  # noqa: A001 - mirrors the op name
    a = as_tensor(a)

    def bw(g):
        _accum(a, np.broadcast_to(g, a.shape).copy())

    return _result(a.data.sum(), (a,), bw)


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size

    def bw(g):
        _accum(a, np.broadcast_to(g / n, a.shape).copy())

    return _result(a.data.sum() / n, (a,), bw)


def mse(a, target) -> Tensor:
    """Mean of squared differences; ``target`` is treated as a constant."""
    a = as_tensor(a)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    try:
        diff = a.data - np.broadcast_to(t, a.shape)
    except ValueError:
        raise ShapeError(f"mse: shapes {a.shape} and {t.shape} do not conform") from None
    n = a.data.size

    def bw(g):
        _accum(a, g * 2.0 * diff / n)

    return _result((diff * diff).sum() / n, (a,), bw)


# ---------------------------------------------------------------- linear ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    _count(2 * a.shape[0] * a.shape[1] * b.shape[1])

    def bw(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _result(a.data @ b.data, (a, b), bw)


def conv1x1(x, weight, bias=None) -> Tensor:
    """Pointwise convolution: ``x`` is C x (spatial...), ``weight`` K x C, ``bias`` K.

    Returns K x (spatial...). FLOPs recorded: 2*K*C*pixels (bias folded in).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.data.ndim != 2 or x.data.ndim < 1 or x.shape[0] != weight.shape[1]:
        raise ShapeError(f"conv1x1: input {x.shape} and weight {weight.shape} do not conform")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"conv1x1: bias {bias.shape} and weight {weight.shape} do not conform")
    spatial = x.shape[1:]
    X = x.data.reshape(x.shape[0], -1)
    _count(2 * weight.shape[0] * weight.shape[1] * X.shape[1])
    Y = weight.data @ X
    if bias is not None:
        Y = Y + bias.data[:, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        G = g.reshape(weight.shape[0], -1)
        if x.requires_grad:
            _accum(x, (weight.data.T @ G).reshape(x.shape))
        _accum(weight, G @ X.T)
        if bias is not None:
            _accum(bias, G.sum(axis=1))

    return _result(Y.reshape((weight.shape[0],) + spatial), parents, bw)


def softmax_channel(a) -> Tensor:
    """Softmax along axis 0 (channels), independently per pixel."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=0, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=0, keepdims=True)

    def bw(g):
        _accum(a, p * (g - (g * p).sum(axis=0, keepdims=True)))

    return _result(p, (a,), bw)


def cross_entropy(probs, target, weight=None) -> Tensor:
    """Pixel-averaged negative log-likelihood of ``target`` classes.

    ``probs`` is K x (spatial...) (channel softmax output), ``target`` integer
    class ids with the spatial shape. Probabilities are clamped to
    [1e-12, 1] before the log. With ``weight`` (same spatial shape, e.g. a
    0/1 mask) the result is sum(w * nll) / sum(w), and exactly 0 when the
    weights sum to zero.
    """
    probs = as_tensor(probs)
    target = np.asarray(target)
    if target.shape != probs.shape[1:]:
        raise ShapeError(f"cross_entropy: probs {probs.shape} and target {target.shape} do not conform")
    K = probs.shape[0]
    if target.size and (target.min() < 0 or target.max() >= K):
        raise ValueError(f"cross_entropy: target classes must lie in [0, {K})")
    if weight is None:
        w = np.ones(target.shape)
    else:
        w = np.asarray(weight, dtype=np.float64)
        if w.shape != target.shape:
            raise ShapeError(f"cross_entropy: weight {w.shape} and target {target.shape} do not conform")
    denom = w.sum()
    p_t = np.take_along_axis(probs.data, target[None].astype(np.intp), axis=0)[0]
    clamped = np.clip(p_t, PROB_FLOOR, 1.0)
    if denom == 0:
        return _result(0.0, (probs,), lambda g: None)
    loss = (w * -np.log(clamped)).sum() / denom

    def bw(g):
        inside = (p_t >= PROB_FLOOR) & (p_t <= 1.0)
        gp = np.where(inside, -w / np.where(inside, p_t, 1.0), 0.0) * (g / denom)
        full = np.zeros_like(probs.data)
        np.put_along_axis(full, target[None].astype(np.intp), gp[None], axis=0)
        _accum(probs, full)

    return _result(loss, (probs,), bw)


# ---------------------------------------------------------------- pixel gather / scatter


def take_columns(a, idx) -> Tensor:
    """Select columns ``idx`` of a 2-D (C x P) tensor."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"take_columns: expected a C x P matrix, got {a.shape}")
    idx = np.asarray(idx, dtype=np.intp)

    def bw(g):
        full = np.zeros_like(a.data)
        full[:, idx] = g
        _accum(a, full)

    return _result(a.data[:, idx], (a,), bw)


def scatter_columns(parts, indices, width: int) -> Tensor:
    """Assemble a C x width matrix from disjoint column blocks.

    Columns not covered by any block are zero.
    """
    parts = [as_tensor(p) for p in parts]
    indices = [np.asarray(i, dtype=np.intp) for i in indices]
    if not parts:
        raise ShapeError("scatter_columns: need at least one block")
    rows = parts[0].shape[0]
    out = np.zeros((rows, width))
    for p, i in zip(parts, indices):
        if p.data.ndim != 2 or p.shape != (rows, i.size):
            raise ShapeError(f"scatter_columns: block {p.shape} does not match {rows} x {i.size}")
        out[:, i] = p.data

    def bw(g):
        for p, i in zip(parts, indices):
            _accum(p, g[:, i])

    return _result(out, tuple(parts), bw)


def row(a, k: int) -> Tensor:
    """Channel ``k`` of a C x ... tensor, keeping a leading axis of 1."""
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        full[k : k + 1] = g
        _accum(a, full)

    return _result(a.data[k : k + 1], (a,), bw)


# ---------------------------------------------------------------- backward


def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, grad=None):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaf grads accumulate across calls; interior grads are scratch space.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo(loss)
    interior = [n for n in order if n._backward is not None]
    for n in interior:
        n.grad = None
    seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=np.float64).reshape(loss.shape)
    if loss._backward is None:
        _accum(loss, seed)
        return
    loss.grad = seed
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for n in interior:
        n.grad = None

"""Dense numpy arrays with a dynamic reverse-mode tape.

Every operation returns a new :class:`Tensor`. When at least one input is
tracked, the result records its parents and a closure that maps the output
gradient to input gradients. ``Tensor.backward`` walks the recorded graph in
reverse topological order and accumulates gradients into tracked leaves.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DTYPE = np.float64

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    pass


class NumericalError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "tracked", "_parents", "_backward")
    # ndarray (op) Tensor defers to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, tracked: bool = False, _parents=(), _backward=None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.tracked = bool(tracked)
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = _backward

    # -- basic properties -------------------------------------------------
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
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", tracked" if self.tracked else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- differentiation --------------------------------------------------
    def backward(self) -> None:
        """Populate ``grad`` on every tracked leaf reachable from this scalar."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.tracked:
            return
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if p.tracked and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.tracked:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # -- operator sugar ---------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    """A tracked leaf."""
    return Tensor(np.array(data, dtype=DTYPE), tracked=True)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    if any(p.tracked for p in parents):
        return Tensor(data, True, parents, backward)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(*shapes: tuple[int, ...]) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeError(f"shapes {shapes} are not broadcast-compatible") from None


# -- binary elementwise ---------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data

    def back(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.tracked else None,
            _unbroadcast(g * ad, bd.shape) if b.tracked else None,
        )

    return _make(ad * bd, (a, b), back)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.tracked else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.tracked else None,
        )

    return _make(out, (a, b), back)


# -- unary elementwise ----------------------------------------------------
def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def gelu(x) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    x = as_tensor(x)
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))

    def back(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return _make(xd * cdf, (x,), back)


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=DTYPE)
    flat = z.reshape(-1)
    out = np.empty_like(flat)
    pos = flat >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-flat[pos]))
    ez = np.exp(flat[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out.reshape(z.shape)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid_np(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    return _make(t, (x,), lambda g: (g * (1.0 - t * t),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.data)
    return _make(e, (x,), lambda g: (g * e,))


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2.0 * g * xd,))


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp with zero gradient outside ``[lo, hi]``."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


_ELEMENTWISE = {
    "add": add,
    "mul": mul,
    "relu": relu,
    "gelu": gelu,
    "sigmoid": sigmoid,
    "tanh": tanh,
}


def elementwise(kind: str, *inputs) -> Tensor:
    """Dispatch by name to one of add, mul, relu, gelu, sigmoid, tanh."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}") from None
    arity = 2 if kind in ("add", "mul") else 1
    if len(inputs) != arity:
        raise ValueError(f"{kind} takes {arity} input(s), got {len(inputs)}")
    return fn(*inputs)


# -- linear algebra -------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeError("matmul needs at least 1-D operands")
    ka = a.shape[-1]
    kb = b.shape[-2] if b.ndim >= 2 else b.shape[0]
    if ka != kb:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape} ({ka} != {kb})")
    if a.ndim > 2 and b.ndim > 2:
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise ShapeError(f"matmul batch dimensions disagree: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data
    if ad.ndim > 2 and bd.ndim == 2:
        # flatten leading dims: one GEMM instead of a batch of small ones
        lead = ad.shape[:-1]
        out = (ad.reshape(-1, ka) @ bd).reshape(lead + (bd.shape[1],))

        def back_flat(g):
            g2 = g.reshape(-1, bd.shape[1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.tracked else None
            gb = ad.reshape(-1, ka).T @ g2 if b.tracked else None
            return ga, gb

        return _make(out, (a, b), back_flat)
    out = ad @ bd

    def back(g):
        ga = gb = None
        if ad.ndim == 1 and bd.ndim == 1:
            ga = g * bd if a.tracked else None
            gb = g * ad if b.tracked else None
            return ga, gb
        A = ad[None, :] if ad.ndim == 1 else ad
        B = bd[:, None] if bd.ndim == 1 else bd
        G = g
        if ad.ndim == 1:
            G = np.expand_dims(G, -2)
        if bd.ndim == 1:
            G = np.expand_dims(G, -1)
        if a.tracked:
            ga = G @ np.swapaxes(B, -1, -2)
            ga = _unbroadcast(ga, A.shape).reshape(ad.shape)
        if b.tracked:
            gb = np.swapaxes(A, -1, -2) @ G
            gb = _unbroadcast(gb, B.shape).reshape(bd.shape)
        return ga, gb

    return _make(out, (a, b), back)


# -- reductions and shape ops ---------------------------------------------
def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), back)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def _basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis or p is None for p in parts)


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    basic = _basic_index(index)

    def back(g):
        out = np.zeros(shape, dtype=DTYPE)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _make(x.data[index], (x,), back)


def take_rows(table, ids) -> Tensor:
    """Row gather ``table[ids]`` (embedding lookup)."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def back(g):
        flat = ids.reshape(-1)
        onehot = np.zeros((flat.size, shape[0]), dtype=DTYPE)
        onehot[np.arange(flat.size), flat] = 1.0
        return (onehot.T @ g.reshape(-1, shape[-1]),)

    return _make(table.data[ids], (table,), back)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, back)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _make(np.stack([t.data for t in ts], axis=axis), ts, back)


# -- normalisation and probabilities --------------------------------------
def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), back)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def back(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), back)


def softmax_crossentropy(logits, target, mask=None) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over unmasked rows.

    ``logits`` has shape ``(..., V)`` and ``target`` the leading shape. A
    single vector with an integer target gives the plain scalar loss.
    """
    logits = as_tensor(logits)
    V = logits.shape[-1]
    tgt = np.asarray(target, dtype=np.int64)
    if tgt.shape != logits.shape[:-1]:
        raise ShapeError(f"target shape {tgt.shape} does not match logits {logits.shape}")
    w = np.ones(tgt.shape, dtype=DTYPE) if mask is None else np.asarray(mask, dtype=DTYPE)
    live = w > 0
    if np.any((tgt[live] < 0) | (tgt[live] >= V)):
        raise IndexError(f"target index out of vocabulary range [0, {V})")
    safe = np.where(live, tgt, 0)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    denom = max(w.sum(), 1e-300)
    loss = -(picked * w).sum() / denom

    def back(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe[..., None], 1.0, axis=-1)
        return (g * (p - onehot) * (w / denom)[..., None],)

    return _make(np.asarray(loss), (logits,), back)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    n = xd.shape[-1]

    def back(g):
        gx = gg = gb = None
        if gain.tracked:
            gg = _unbroadcast(g * xhat, gain.shape)
        if bias.tracked:
            gb = _unbroadcast(g, bias.shape)
        if x.tracked:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / n)
        return gx, gg, gb

    return _make(out, (x, gain, bias), back)


# -- gradient oracle ------------------------------------------------------
def finite_difference_grad(f: Callable[[np.ndarray], float], x, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if step <= 0:
        raise ValueError("step must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(base.copy()))
        flat[i] = orig - step
        fm = float(f(base.copy()))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            coord = np.unravel_index(i, base.shape)
            raise NumericalError(f"non-finite function value at coordinate {coord}: f(+)={fp}, f(-)={fm}")
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


# -- optimisers -----------------------------------------------------------
@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float | None = None


class Optimizer:
    """SGD or Adam(W) over a fixed list of tracked leaves.

    Adam moments persist on the instance across calls to :meth:`step`.
    """

    def __init__(self, params: Iterable[Tensor], config: OptimizerConfig | None = None):
        self.params = list(params)
        self.config = config or OptimizerConfig()
        if self.config.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.config.kind!r}")
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, grads: Sequence[np.ndarray | None] | None = None) -> None:
        if grads is None:
            grads = [p.grad for p in self.params]
        grads = [np.zeros_like(p.data) if g is None else g for p, g in zip(self.params, grads)]
        for p, g in zip(self.params, grads):
            if g.shape != p.shape:
                raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        bad = [i for i, g in enumerate(grads) if not np.all(np.isfinite(g))]
        if bad:
            raise NumericalError(f"non-finite gradient in parameter(s) {bad}; step rejected")
        cfg = self.config
        if cfg.grad_clip is not None:
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
            if norm > cfg.grad_clip:
                grads = [g * (cfg.grad_clip / norm) for g in grads]
        self.t += 1
        if cfg.kind == "sgd":
            for p, g in zip(self.params, grads):
                p.data -= cfg.lr * g
            return
        b1, b2 = cfg.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if cfg.weight_decay and p.ndim >= 2:
                p.data -= cfg.lr * cfg.weight_decay * p.data
            p.data -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


def optimizer_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], config: OptimizerConfig,
                   state: Optimizer | None = None) -> Optimizer:
    """One in-place update; pass the returned optimizer back in to keep Adam moments."""
    opt = state if state is not None else Optimizer(params, config)
    opt.step(grads)
    return opt

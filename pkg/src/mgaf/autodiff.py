"""Minimal reverse-mode automatic differentiation over numpy arrays.

A Var wraps an ndarray and remembers how it was produced; backward() walks
the recorded graph in exact reverse topological order and accumulates
gradients with hand-derived adjoints. Works in float32 for training and
float64 for gradient checking; every op preserves its input dtype.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .types import TrainingError


class Var:
    """Graph node: value plus the adjoint closure that produced it."""

    __slots__ = ("value", "grad", "parents", "bwd", "op", "requires_grad")

    def __init__(
        self,
        value: np.ndarray,
        parents: tuple["Var", ...] = (),
        bwd: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        op: str = "leaf",
        requires_grad: bool = False,
    ):
        self.value = np.asarray(value)
        self.grad: np.ndarray | None = None
        self.parents = parents
        self.bwd = bwd
        self.op = op
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def detach(self) -> "Var":
        return Var(self.value, op="detach")

    def __repr__(self):
        return f"Var(op={self.op}, shape={self.value.shape}, dtype={self.value.dtype})"


class Param(Var):
    """Named trainable leaf; lr_mult scales the learning rate per param."""

    __slots__ = ("name", "trainable", "decay", "lr_mult")

    def __init__(self, name: str, value: np.ndarray, trainable: bool = True,
                 decay: bool = True, lr_mult: float = 1.0):
        super().__init__(np.ascontiguousarray(value), requires_grad=trainable)
        self.name = name
        self.trainable = trainable
        self.decay = decay
        self.lr_mult = lr_mult
        self.op = f"param:{name}"


def as_var(x, dtype=None) -> Var:
    if isinstance(x, Var):
        return x
    arr = np.asarray(x)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    return Var(arr, op="const")


def _toposort(root: Var) -> list[Var]:
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Var, check_finite: bool = True) -> None:
    """Populate .grad on every reachable node that requires a gradient."""
    if loss.value.ndim != 0 and loss.value.size != 1:
        raise ValueError("backward() expects a scalar loss")
    order = _toposort(loss)
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node.bwd is None or node.grad is None:
            continue
        grads = node.bwd(node.grad)
        for parent, g in zip(node.parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if check_finite and not np.isfinite(g).all():
                raise TrainingError(f"non-finite gradient flowing into op '{parent.op}' from '{node.op}'")
            if parent.grad is None:
                parent.grad = g.astype(parent.value.dtype, copy=True)
            else:
                parent.grad += g


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to the parent's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / arithmetic primitives


def add(a: Var, b: Var) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)),
        op="add",
    )


def sub(a: Var, b: Var) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)),
        op="sub",
    )


def mul(a: Var, b: Var) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(
        a.value * b.value,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        ),
        op="mul",
    )


def div(a: Var, b: Var) -> Var:
    a, b = as_var(a), as_var(b)
    inv = 1.0 / b.value
    return Var(
        a.value * inv,
        (a, b),
        lambda g: (
            _unbroadcast(g * inv, a.value.shape),
            _unbroadcast(-g * a.value * inv * inv, b.value.shape),
        ),
        op="div",
    )


def neg(a: Var) -> Var:
    a = as_var(a)
    return Var(-a.value, (a,), lambda g: (-g,), op="neg")


def scale(a: Var, s: float) -> Var:
    a = as_var(a)
    return Var(a.value * s, (a,), lambda g: (g * s,), op="scale")


def relu(a: Var) -> Var:
    a = as_var(a)
    mask = a.value > 0
    return Var(np.where(mask, a.value, 0), (a,), lambda g: (g * mask,), op="relu")


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a: Var) -> Var:
    a = as_var(a)
    s = stable_sigmoid(a.value)
    return Var(s, (a,), lambda g: (g * s * (1.0 - s),), op="sigmoid")


def tanh(a: Var) -> Var:
    a = as_var(a)
    t = np.tanh(a.value)
    return Var(t, (a,), lambda g: (g * (1.0 - t * t),), op="tanh")


def exp(a: Var) -> Var:
    a = as_var(a)
    e = np.exp(a.value)
    return Var(e, (a,), lambda g: (g * e,), op="exp")


def log(a: Var) -> Var:
    a = as_var(a)
    return Var(np.log(a.value), (a,), lambda g: (g / a.value,), op="log")


def sqrt(a: Var) -> Var:
    a = as_var(a)
    r = np.sqrt(a.value)
    return Var(r, (a,), lambda g: (g * 0.5 / r,), op="sqrt")


def sin(a: Var) -> Var:
    a = as_var(a)
    return Var(np.sin(a.value), (a,), lambda g: (g * np.cos(a.value),), op="sin")


def cos(a: Var) -> Var:
    a = as_var(a)
    return Var(np.cos(a.value), (a,), lambda g: (-g * np.sin(a.value),), op="cos")


def square(a: Var) -> Var:
    a = as_var(a)
    return Var(a.value * a.value, (a,), lambda g: (g * 2.0 * a.value,), op="square")


def pow_const(a: Var, p: float) -> Var:
    a = as_var(a)
    v = a.value**p
    return Var(v, (a,), lambda g: (g * p * a.value ** (p - 1.0),), op="pow")


def absolute(a: Var) -> Var:
    a = as_var(a)
    s = np.sign(a.value)
    return Var(np.abs(a.value), (a,), lambda g: (g * s,), op="abs")


def clip(a: Var, lo: float, hi: float) -> Var:
    a = as_var(a)
    mask = (a.value > lo) & (a.value < hi)
    return Var(np.clip(a.value, lo, hi), (a,), lambda g: (g * mask,), op="clip")


# ---------------------------------------------------------------------------
# reductions / shape ops


def vsum(a: Var, axis=None, keepdims: bool = False) -> Var:
    a = as_var(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.value.shape).astype(a.value.dtype, copy=False),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.value.shape).astype(a.value.dtype, copy=False),)

    return Var(out, (a,), bwd, op="sum")


def vmean(a: Var, axis=None, keepdims: bool = False) -> Var:
    a = as_var(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return scale(vsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Var, shape) -> Var:
    a = as_var(a)
    old = a.value.shape
    return Var(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),), op="reshape")


def transpose(a: Var, axes) -> Var:
    a = as_var(a)
    inv = np.argsort(axes)
    return Var(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),), op="transpose")


def concat(vars_: Sequence[Var], axis: int = 0) -> Var:
    vars_ = [as_var(v) for v in vars_]
    sizes = [v.value.shape[axis] for v in vars_]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return Var(np.concatenate([v.value for v in vars_], axis=axis), tuple(vars_), bwd, op="concat")


def matmul(a: Var, b: Var) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(
        a.value @ b.value,
        (a, b),
        lambda g: (g @ b.value.T, a.value.T @ g),
        op="matmul",
    )


def getitem(a: Var, idx) -> Var:
    """Generic indexing; backward scatter-adds, so duplicate fancy indices
    accumulate correctly."""
    a = as_var(a)

    def bwd(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return (out,)

    return Var(a.value[idx], (a,), bwd, op="getitem")


def maximum_const(a: Var, c: float) -> Var:
    a = as_var(a)
    mask = a.value > c
    return Var(np.maximum(a.value, c), (a,), lambda g: (g * mask,), op="maximum")


# ---------------------------------------------------------------------------
# gradient checking


def gradcheck_scalar_fn(fn, inputs: list[np.ndarray], rel_tol: float = 1e-5,
                        eps: float = 1e-6, max_entries: int | None = None,
                        rng: np.random.Generator | None = None):
    """Central-difference check of d fn / d inputs[i] for every entry (or a
    random subset). fn maps a list of Vars to a scalar Var; inputs are f64.

    Returns the worst relative error found.
    """
    vars_ = [Var(np.asarray(x, dtype=np.float64), requires_grad=True, op=f"in{i}") for i, x in enumerate(inputs)]
    loss = fn(vars_)
    backward(loss, check_finite=True)
    worst = 0.0
    for vi, v in enumerate(vars_):
        analytic = v.grad if v.grad is not None else np.zeros_like(v.value)
        flat = v.value.reshape(-1)
        n = flat.size
        if max_entries is not None and n > max_entries:
            assert rng is not None
            entries = rng.choice(n, size=max_entries, replace=False)
        else:
            entries = range(n)
        for j in entries:
            orig = flat[j]
            h = eps * max(1.0, abs(orig))
            flat[j] = orig + h
            lp = float(fn(vars_).value)
            flat[j] = orig - h
            lm = float(fn(vars_).value)
            flat[j] = orig
            num = (lp - lm) / (2.0 * h)
            ana = float(analytic.reshape(-1)[j])
            denom = max(abs(num), abs(ana), 1e-4)
            rel = abs(num - ana) / denom
            worst = max(worst, rel)
            if rel > rel_tol:
                raise AssertionError(
                    f"gradcheck failed on input {vi} entry {j}: analytic={ana:.9g} "
                    f"numeric={num:.9g} rel={rel:.3g}"
                )
    return worst

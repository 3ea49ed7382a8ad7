"""Reverse-mode automatic differentiation over dense numpy arrays.

A ``Tensor`` wraps an ndarray; operations on tensors record primitive nodes
onto the active ``Tape`` in creation order, which is automatically a
topological order. ``backward_gradients`` replays the tape once in reverse.

Double precision is the default and the precision all oracle tests run in;
single precision can be requested per-tensor for cheaper training runs.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

Array = np.ndarray

_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of primitive ops; parents are recorded before children.

    Use as a context manager around a forward pass, then call
    ``backward_gradients(tape, loss)``.
    """

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []

    def record(self, node: "Tensor") -> None:
        self.nodes.append(node)

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """Immutable dense array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple = (),
        _backward: Callable[[Array], Sequence[Array | None]] | None = None,
    ) -> None:
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward

    # -- basic introspection ------------------------------------------------

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

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    # -- operators ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data) -> Tensor:
    """Leaf tensor that receives gradients."""
    return Tensor(np.array(data, copy=True), requires_grad=True)


# -- node construction --------------------------------------------------------


def _make_node(data: Array, parents: tuple, backward) -> Tensor:
    tape = active_tape()
    track = tape is not None and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data)
    node = Tensor(data, requires_grad=True, _parents=parents, _backward=backward)
    tape.record(node)
    return node


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum out broadcast dimensions so grad matches the parent's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- arithmetic ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make_node(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make_node(out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make_node(out, (a, b), backward)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    e = float(exponent)
    out = a.data**e

    def backward(g):
        return (g * e * a.data ** (e - 1.0),)

    return _make_node(out, (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data @ b.data
    except ValueError as exc:
        raise ShapeError(f"matmul shapes {a.shape} x {b.shape}: {exc}") from exc

    def backward(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd, g * ad
        if ad.ndim == 1:
            ga = (g[..., None, :] @ np.swapaxes(bd, -1, -2))[..., 0, :]
            gb = ad[:, None] @ g[..., None, :]
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
        if bd.ndim == 1:
            ga = g[..., :, None] @ bd[None, :]
            gb = np.swapaxes(ad, -1, -2) @ g[..., :, None]
            return _unbroadcast(ga, a.shape), _unbroadcast(gb[..., 0], b.shape)
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make_node(out, (a, b), backward)


# -- elementwise nonlinearities -----------------------------------------------


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _make_node(out, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    out = np.log(a.data)

    def backward(g):
        return (g / a.data,)

    return _make_node(out, (a,), backward)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def backward(g):
        return (g * 0.5 / out,)

    return _make_node(out, (a,), backward)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _make_node(out, (a,), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)

    def backward(g):
        return (g * (a.data > 0.0),)

    return _make_node(out, (a,), backward)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    # log(1 + e^x) computed stably for large |x|
    out = np.logaddexp(0.0, a.data)

    def backward(g):
        sig = 1.0 / (1.0 + np.exp(-a.data))
        return (g * sig,)

    return _make_node(out, (a,), backward)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp with pass-through gradient strictly inside [lo, hi]."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)

    def backward(g):
        inside = (a.data >= lo) & (a.data <= hi)
        return (g * inside,)

    return _make_node(out, (a,), backward)


# -- reductions and shape ops ---------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            for d in sorted(ax):
                g = np.expand_dims(g, d % a.ndim)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make_node(out, (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[d % a.ndim] for d in ax]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return _make_node(out, (a,), backward)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)

    def backward(g):
        if axes is None:
            return (np.transpose(g),)
        inv = np.argsort(axes)
        return (np.transpose(g, inv),)

    return _make_node(out, (a,), backward)


def take(a, idx) -> Tensor:
    """Basic indexing/slicing; gradient scatters back into a zero array."""
    a = as_tensor(a)
    out = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make_node(np.array(out, copy=True), (a,), backward)


def concat(parts: Iterable, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.array(piece, copy=True) for piece in np.split(g, splits, axis=axis))

    return _make_node(out, tuple(parts), backward)


def diag_part(a) -> Tensor:
    """Diagonal of the trailing two axes."""
    a = as_tensor(a)
    out = np.diagonal(a.data, axis1=-2, axis2=-1)

    def backward(g):
        full = np.zeros_like(a.data)
        idx = np.arange(a.shape[-1])
        full[..., idx, idx] = g
        return (full,)

    return _make_node(np.array(out, copy=True), (a,), backward)


# -- attention softmax primitive ------------------------------------------------


def masked_softmax(logits, mask) -> Tensor:
    """Softmax over the last axis restricted to allowed (True) entries.

    Denied entries are exactly zero in the output; allowed entries of every
    row sum to one. Stabilized by subtracting the per-row max over allowed
    entries. A row with no allowed entry is an error.
    """
    logits = as_tensor(logits)
    mask_arr = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
    if not mask_arr.any(axis=-1).all():
        raise ShapeError("empty attention row: some row allows no entries")
    shifted = np.where(mask_arr, logits.data, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    expd = np.exp(shifted, where=mask_arr, out=np.zeros_like(logits.data))
    out = expd / expd.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return _make_node(out, (logits,), backward)


# -- linear algebra primitives --------------------------------------------------


def trisolve_lower(L, b) -> Tensor:
    """Solve L x = b for lower-triangular L; batched over leading axes."""
    L, b = as_tensor(L), as_tensor(b)
    Ld = L.data
    if Ld.shape[-1] != Ld.shape[-2]:
        raise ShapeError(f"trisolve expects square factor, got {L.shape}")
    vector_rhs = b.ndim == L.ndim - 1
    bd = b.data[..., None] if vector_rhs else b.data
    try:
        out = np.linalg.solve(np.tril(Ld), bd)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"singular triangular factor: {exc}") from exc
    if not np.isfinite(out).all():
        raise NumericError("singular triangular factor: non-finite solve result")
    res = out[..., 0] if vector_rhs else out

    def backward(g):
        gd = g[..., None] if vector_rhs else g
        LT = np.swapaxes(np.tril(Ld), -1, -2)
        gb = np.linalg.solve(LT, gd)
        gL = -(gb @ np.swapaxes(out, -1, -2))
        gL = np.tril(gL)
        gb_out = gb[..., 0] if vector_rhs else gb
        return _unbroadcast(gL, L.shape), _unbroadcast(gb_out, b.shape)

    return _make_node(np.array(res, copy=True), (L, b), backward)


def _phi(X: Array) -> Array:
    """Lower triangle with halved diagonal, batched."""
    out = np.tril(X)
    idx = np.arange(X.shape[-1])
    out[..., idx, idx] *= 0.5
    return out


def cholesky(a) -> Tensor:
    """Cholesky factor of a symmetric positive-definite matrix (batched)."""
    a = as_tensor(a)
    try:
        L = np.linalg.cholesky(a.data)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"covariance factorization failed: {exc}") from exc

    def backward(g):
        # reverse-mode rule for A = L L^T with symmetric A
        P = _phi(np.swapaxes(L, -1, -2) @ np.tril(g))
        LT = np.swapaxes(L, -1, -2)
        tmp = np.linalg.solve(LT, P)
        gA = np.linalg.solve(LT, np.swapaxes(tmp, -1, -2))
        return (0.5 * (gA + np.swapaxes(gA, -1, -2)),)

    return _make_node(L, (a,), backward)


# -- backward pass ----------------------------------------------------------------


def backward_gradients(
    tape: Tape, loss: Tensor, leaves: Iterable[Tensor] | None = None
) -> dict[int, Array]:
    """Gradient of a scalar loss wrt every requires_grad leaf reached from it.

    Returns a map keyed by ``id(tensor)``. If ``leaves`` is given, every listed
    leaf appears in the map, with a zero array when the loss does not touch it.
    """
    if loss.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NumericError("non-finite loss")
    grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None or node._backward is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if leaves is not None:
        for leaf in leaves:
            grads.setdefault(id(leaf), np.zeros_like(leaf.data))
    return grads


def grad_of(grads: dict[int, Array], leaf: Tensor) -> Array:
    return grads.get(id(leaf), np.zeros_like(leaf.data))


# -- gradient checking --------------------------------------------------------------


def finite_difference_check(
    f: Callable[[dict[str, Tensor]], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-5,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` must be deterministic given its parameters. The relative error for
    each scalar parameter is ``|analytic - fd| / max(1, |fd|)``.
    """
    with Tape() as tape:
        loss = f(params)
    if not np.isfinite(loss.data).all():
        raise NumericError("non-finite objective in finite_difference_check")
    grads = backward_gradients(tape, loss, leaves=params.values())

    worst = 0.0
    for p in params.values():
        analytic = grad_of(grads, p).reshape(-1)
        for i in range(p.size):
            orig = p.data.flat[i]
            p.data.flat[i] = orig + h
            up = float(f(params).data)
            p.data.flat[i] = orig - h
            down = float(f(params).data)
            p.data.flat[i] = orig
            fd = (up - down) / (2.0 * h)
            err = abs(analytic[i] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    return worst


__all__ = [
    "Tape",
    "Tensor",
    "add",
    "as_tensor",
    "backward_gradients",
    "cholesky",
    "clip",
    "concat",
    "diag_part",
    "div",
    "exp",
    "finite_difference_check",
    "grad_of",
    "log",
    "masked_softmax",
    "matmul",
    "mul",
    "parameter",
    "power",
    "relu",
    "reshape",
    "softplus",
    "sqrt",
    "take",
    "tanh",
    "tmean",
    "transpose",
    "trisolve_lower",
    "tsum",
]

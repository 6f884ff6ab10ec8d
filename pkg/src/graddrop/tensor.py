"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op returns a new :class:`Tensor` that remembers its inputs and a
closure implementing the local backward rule. :meth:`Tensor.backward` walks
the recorded graph in reverse topological order and accumulates gradients
into leaves that have ``requires_grad`` set.

Most ops act on the last one or two axes; any leading axes are treated as a
batch of independent matrices. Broadcasting is limited to that leading batch
axis and to row vectors added along the last axis.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

LN_EPS = 1e-5


class Tensor:
    """A float64 array plus the bookkeeping needed to differentiate through it.

    ``op`` is the tag of the op that produced the tensor (``"leaf"`` for
    user-created ones), ``parents`` the input tensors and ``_backward`` the
    rule mapping the output gradient to input gradients. Forward values the
    rule needs are captured in its closure.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)

    def __sub__(self, other: Tensor) -> Tensor:
        return add(self, scale(other, -1.0))

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def backward(self) -> None:
        backward(self)


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...], rule) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.parents = parents
    out.requires_grad = any(p.requires_grad for p in parents)
    out._backward = rule if out.requires_grad else None
    return out


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the leading axes that were broadcast to produce it."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    if grad.shape != shape:
        grad = grad.sum(axis=tuple(i for i, s in enumerate(shape) if s == 1), keepdims=True)
    return grad


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node.parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every ``requires_grad`` leaf reachable from ``loss``.

    Leaf gradients accumulate across calls; intermediate gradients are
    discarded once propagated.
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor with requires_grad")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading batch axes broadcast."""
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if a.data.ndim > 2 and b.data.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch axes of {a.shape} and {b.shape} differ")
    A, B = a.data, b.data

    def rule(g):
        da = _reduce_to(g @ np.swapaxes(B, -1, -2), A.shape) if a.requires_grad else None
        db = _reduce_to(np.swapaxes(A, -1, -2) @ g, B.shape) if b.requires_grad else None
        return da, db

    return _make(A @ B, "matmul", (a, b), rule)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a row vector matching ``a``'s last axis."""
    if a.shape != b.shape and not (b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]):
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} are incompatible")
    bshape = b.shape
    return _make(a.data + b.data, "add", (a, b), lambda g: (g, _reduce_to(g, bshape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    A, B = a.data, b.data
    return _make(A * B, "mul", (a, b), lambda g: (g * B, g * A))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, "scale", (a,), lambda g: (g * c,))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim < 2:
        raise DimensionError(f"transpose: need at least 2 axes, got {a.shape}")
    return _make(np.swapaxes(a.data, -1, -2), "transpose", (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return _make(out, "reshape", (a,), lambda g: (g.reshape(old),))


def concat_cols(*tensors: Tensor) -> Tensor:
    """Concatenate along the last axis."""
    if not tensors:
        raise DimensionError("concat_cols: nothing to concatenate")
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise DimensionError(f"concat_cols: shapes {tensors[0].shape} and {t.shape} disagree")
    widths = [t.shape[-1] for t in tensors]
    cuts = np.cumsum(widths)[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=-1),
        "concat_cols",
        tuple(tensors),
        lambda g: np.split(g, cuts, axis=-1),
    )


def relu(a: Tensor) -> Tensor:
    on = a.data > 0
    return _make(np.where(on, a.data, 0.0), "relu", (a,), lambda g: (g * on,))


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax over the last axis with max subtraction."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, "softmax_rows", (a,), rule)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Standardize each row (eps inside the square root), then scale and shift."""
    n = x.shape[-1]
    if n < 2:
        raise DimensionError(f"layer_norm: rows need at least 2 entries, got {x.shape}")
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match rows of {x.shape}")
    X = x.data
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    G = gain.data

    def rule(g):
        dxhat = g * G
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        dg = (g * xhat).reshape(-1, n).sum(axis=0)
        db = g.reshape(-1, n).sum(axis=0)
        return dx, dg, db

    return _make(xhat * G + bias.data, "layer_norm", (x, gain, bias), rule)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of a 2-D table; output shape is ``ids.shape + (width,)``."""
    if table.data.ndim != 2:
        raise DimensionError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    idx = np.asarray(ids)
    if idx.dtype.kind not in "iu":
        raise DimensionError(f"embedding_lookup: ids must be integers, got {idx.dtype}")
    rows = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= rows):
        raise DimensionError(f"embedding_lookup: ids outside [0, {rows})")
    tshape = table.shape

    def rule(g):
        dt = np.zeros(tshape)
        np.add.at(dt, idx.reshape(-1), g.reshape(-1, tshape[1]))
        return (dt,)

    return _make(table.data[idx], "embedding_lookup", (table,), rule)


def mean_pool(x: Tensor) -> Tensor:
    """Average over the second-to-last (position) axis."""
    if x.data.ndim < 2:
        raise DimensionError(f"mean_pool: need at least 2 axes, got {x.shape}")
    n = x.shape[-2]
    shape = x.shape

    def rule(g):
        return (np.broadcast_to(np.expand_dims(g, -2) / n, shape).copy(),)

    return _make(x.data.mean(axis=-2), "mean_pool", (x,), rule)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.array(x.data.sum()), "sum", (x,), lambda g: (np.full(shape, float(g)),))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under row-wise softmax of ``logits``.

    ``targets`` is either an integer class per row or a one-hot matrix of the
    same shape as ``logits``. A 1-D ``logits`` is treated as a single row.
    """
    Z = logits.data
    single = Z.ndim == 1
    Z2 = Z.reshape(1, -1) if single else Z
    if Z2.ndim != 2:
        raise DimensionError(f"cross_entropy: logits must be 1-D or 2-D, got {logits.shape}")
    t = np.asarray(targets)
    if t.dtype.kind in "iu":
        t = t.reshape(-1)
        if t.shape[0] != Z2.shape[0]:
            raise DimensionError(f"cross_entropy: {t.shape[0]} targets for logits {logits.shape}")
        if t.size and (t.min() < 0 or t.max() >= Z2.shape[1]):
            raise DimensionError(f"cross_entropy: class ids outside [0, {Z2.shape[1]})")
        Y = np.zeros_like(Z2)
        Y[np.arange(t.shape[0]), t] = 1.0
    else:
        if t.shape != Z.shape:
            raise DimensionError(f"cross_entropy: targets {t.shape} do not match logits {logits.shape}")
        Y = t.astype(np.float64).reshape(Z2.shape)
    m = Z2.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(Z2 - m).sum(axis=1, keepdims=True))
    logp = Z2 - lse
    rows = Z2.shape[0]
    loss = -(Y * logp).sum() / rows
    probs = np.exp(logp)

    def rule(g):
        d = float(g) * (probs * Y.sum(axis=1, keepdims=True) - Y) / rows
        return (d.reshape(Z.shape),)

    return _make(np.array(loss), "cross_entropy", (logits,), rule)

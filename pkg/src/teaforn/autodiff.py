"""Dense tensors with reverse-mode automatic differentiation.

Everything in this package (attention blocks, stacked-decoder losses,
beam scoring) is expressed through the small op set below.  Storage is
numpy; float32 is the training default and float64 is used by the
gradient-check tests.  Broadcasting is restricted to leading batch
dimensions: an operand may be a trailing-shape suffix of the other, and
nothing else.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeMismatchError(ValueError):
    """Operand shapes do not satisfy an op's contract."""


class DegenerateDistributionError(ValueError):
    """A softmax slice had every entry masked out."""


class ContractError(ValueError):
    """An op precondition was violated."""


class ParameterError(ValueError):
    """A scalar parameter (k, lambda, probability, ...) is out of range."""


def neg_inf(dtype) -> float:
    """Mask value: most negative finite number of the storage type.

    Kept finite so that arithmetic before the exponentiation inside
    softmax cannot produce NaNs; softmax maps masked entries to exact 0.
    """
    return float(np.finfo(np.dtype(dtype)).min)


def _mask_threshold(dtype) -> float:
    # Anything at or below half the finite minimum counts as masked.
    return float(np.finfo(np.dtype(dtype)).min) / 2


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / oracles)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A dense array plus its position in the differentiation graph.

    Leaves are constructed directly; op results carry the op name, the
    operand references and a backward closure.  ``grad`` is populated on
    requires-grad leaves by :func:`backward` and accumulates across calls
    until :meth:`zero_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None, *,
                 op: str = "", parents: tuple = (), backward=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES or (
                dtype is None
                and not isinstance(data, (np.ndarray, np.generic))):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.op = op
        self.parents = parents
        self._backward: Optional[Callable] = backward

    # -- introspection ------------------------------------------------

    @property
    def shape(self):
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

    @property
    def is_leaf(self) -> bool:
        return self._backward is None and not self.parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = self.op or ("leaf" if self.is_leaf else "node")
        return f"Tensor({tag}, shape={self.shape}, dtype={self.dtype.name})"

    # -- operator sugar -----------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        raise TypeError("tensor/tensor division is not part of the op set")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def parameter(data, dtype=None) -> Tensor:
    """A trainable leaf."""
    return Tensor(data, requires_grad=True, dtype=dtype)


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


# -- graph ------------------------------------------------------------


class Graph:
    """Topologically ordered record of the ops reachable from a root.

    ``nodes`` lists every reachable tensor with operands strictly before
    results (postorder of a depth-first walk over ``parents``).
    """

    def __init__(self, root: Tensor):
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
            for p in reversed(node.parents):
                if id(p) not in seen:
                    stack.append((p, False))
        self.nodes = order

    def operations(self):
        """(op name, operand tensors, result tensor) in application order."""
        return [(t.op, t.parents, t) for t in self.nodes if t.op]


def depends_on(result: Tensor, source: Tensor) -> bool:
    """True if ``source`` is reachable from ``result`` through the graph."""
    stack = [result]
    seen: set[int] = set()
    while stack:
        node = stack.pop()
        if node is source:
            return True
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.extend(node.parents)
    return False


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad leaf below ``loss``.

    Traversal follows the reverse of the graph's topological order, so
    repeated runs over identical graphs accumulate bit-identical values.
    """
    if loss.data.size != 1:
        raise ContractError(
            f"backward requires a scalar loss, got shape {loss.shape}")
    order = Graph(loss).nodes
    grads: dict[int, np.ndarray] = {
        id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is not None:
            for parent, pg in node._backward(g):
                if not parent.requires_grad:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg
        elif node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g


# -- op plumbing ------------------------------------------------------


def _result(data, parents, op, backward_fn) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, op=op,
                      parents=tuple(parents), backward=backward_fn)
    return Tensor(data, op=op, parents=tuple(parents))


def _is_suffix(short: tuple, long: tuple) -> bool:
    return len(short) <= len(long) and (len(short) == 0 or long[-len(short):] == short)


def _check_leading_broadcast(a: Tensor, b: Tensor, op: str):
    if a.shape == b.shape:
        return
    if _is_suffix(a.shape, b.shape) or _is_suffix(b.shape, a.shape):
        return
    raise ShapeMismatchError(f"{op}: shapes {a.shape} and {b.shape} are not "
                             "equal or leading-batch compatible")


def _sum_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    return g.sum(axis=tuple(range(extra)))


# -- elementwise and structural ops -----------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_leading_broadcast(a, b, "add")

    def bwd(g):
        return ((a, _sum_to(g, a.shape)), (b, _sum_to(g, b.shape)))

    return _result(a.data + b.data, (a, b), "add", bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        return ((a, -g),)

    return _result(-a.data, (a,), "neg", bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g):
        return ((a, g * c),)

    return _result(a.data * c, (a,), "scale", bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_leading_broadcast(a, b, "mul")

    def bwd(g):
        return ((a, _sum_to(g * b.data, a.shape)),
                (b, _sum_to(g * a.data, b.shape)))

    return _result(a.data * b.data, (a, b), "mul", bwd)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ContractError("log requires strictly positive inputs")

    def bwd(g):
        return ((a, g / a.data),)

    return _result(np.log(a.data), (a,), "log", bwd)


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0

    def bwd(g):
        return ((a, g * keep),)

    return _result(np.where(keep, a.data, 0), (a,), "relu", bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError(
            f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(
            f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    if not (_is_suffix(a.shape[:-2], b.shape[:-2])
            or _is_suffix(b.shape[:-2], a.shape[:-2])):
        raise ShapeMismatchError(
            f"matmul batch dimensions disagree: {a.shape} @ {b.shape}")

    def bwd(g):
        ga = _sum_to(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _sum_to(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ((a, ga), (b, gb))

    return _result(a.data @ b.data, (a, b), "matmul", bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ContractError("concat of zero tensors")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        out = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            out.append((t, g[tuple(index)]))
        return tuple(out)

    return _result(np.concatenate([t.data for t in tensors], axis=axis),
                   tensors, "concat", bwd)


def slice_(a: Tensor, key) -> Tensor:
    out = a.data[key]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return ((a, full),)

    return _result(out, (a,), "slice", bwd)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    def bwd(g):
        return ((a, g.reshape(a.shape)),)

    return _result(a.data.reshape(shape), (a,), "reshape", bwd)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def bwd(g):
        return ((a, g.transpose(inverse)),)

    return _result(a.data.transpose(axes), (a,), "transpose", bwd)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is not None and not isinstance(axis, tuple):
        axis = (axis,)

    def bwd(g):
        if axis is None:
            return ((a, np.broadcast_to(g, a.shape).copy()),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return ((a, np.broadcast_to(gg, a.shape).copy()),)

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum", bwd)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in ax]))
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- probability ops ---------------------------------------------------


def _masked(x: np.ndarray) -> np.ndarray:
    return x <= _mask_threshold(x.dtype)


def softmax(a: Tensor) -> Tensor:
    """Probabilities over the last axis.

    Entries at the mask value map to exactly 0; the rest are computed with
    max-subtraction.  A slice with every entry masked is degenerate.
    """
    if a.shape[-1] < 1:
        raise ShapeMismatchError("softmax needs a non-empty last axis")
    masked = _masked(a.data)
    if np.any(masked.all(axis=-1)):
        raise DegenerateDistributionError(
            "softmax slice with all entries masked")
    m = np.max(np.where(masked, -np.inf, a.data), axis=-1, keepdims=True)
    shifted = np.where(masked, 0.0, a.data - m)
    e = np.exp(shifted)
    e[masked] = 0.0
    total = e.sum(axis=-1, keepdims=True)
    y = e / total

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return ((a, y * (g - dot)),)

    return _result(y, (a,), "softmax", bwd)


def log_softmax(a: Tensor) -> Tensor:
    """log of softmax, fused for stability; masked entries stay masked."""
    masked = _masked(a.data)
    if np.any(masked.all(axis=-1)):
        raise DegenerateDistributionError(
            "log_softmax slice with all entries masked")
    m = np.max(np.where(masked, -np.inf, a.data), axis=-1, keepdims=True)
    shifted = np.where(masked, 0.0, a.data - m)
    e = np.exp(shifted)
    e[masked] = 0.0
    total = e.sum(axis=-1, keepdims=True)
    out = np.where(masked, neg_inf(a.dtype), a.data - m - np.log(total))
    probs = e / total

    def bwd(g):
        gsum = g.sum(axis=-1, keepdims=True)
        return ((a, g - probs * gsum),)

    return _result(out, (a,), "log_softmax", bwd)


def top_k_mask(a: Tensor, k: int) -> Tensor:
    """Keep the k largest entries of each last-axis slice, mask the rest.

    Ties break toward the lowest index.  Gradients flow only through the
    kept entries.
    """
    v = a.shape[-1]
    if not 1 <= k <= v:
        raise ParameterError(f"top_k_mask k={k} outside [1, {v}]")
    # stable sort on the negated values keeps the lowest index first
    # among ties
    idx = np.argsort(-a.data, axis=-1, kind="stable")[..., :k]
    keep = np.zeros(a.shape, dtype=bool)
    np.put_along_axis(keep, idx, True, axis=-1)
    out = np.where(keep, a.data, neg_inf(a.dtype))

    def bwd(g):
        return ((a, np.where(keep, g, 0.0)),)

    return _result(out, (a,), "top_k_mask", bwd)


def masked_fill(a: Tensor, keep_mask: np.ndarray) -> Tensor:
    """Keep entries where the mask is true, set the rest to the mask value."""
    keep = np.asarray(keep_mask, dtype=bool)
    if not _is_suffix(keep.shape, a.shape):
        raise ShapeMismatchError(
            f"masked_fill mask {keep.shape} does not suffix {a.shape}")
    out = np.where(keep, a.data, neg_inf(a.dtype))

    def bwd(g):
        return ((a, np.where(keep, g, 0.0)),)

    return _result(out, (a,), "masked_fill", bwd)


def gather_rows(table: Tensor, indices) -> Tensor:
    """Rows of a V x D table selected by integer indices.

    Backward scatter-adds into the indexed rows, so repeated indices
    accumulate.
    """
    idx = np.asarray(indices, dtype=np.int64)
    v = table.shape[0]
    if idx.size:
        bad = (idx < 0) | (idx >= v)
        if bad.any():
            pos = tuple(int(i) for i in np.argwhere(bad)[0])
            raise IndexError(
                f"gather_rows index {int(idx[pos])} out of range [0, {v}) "
                f"at position {pos}")
    out = table.data[idx]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1),
                  g.reshape(-1, table.shape[-1]))
        return ((table, gt),)

    return _result(out, (table,), "gather_rows", bwd)


def take_along_last(a: Tensor, indices) -> Tensor:
    """a[..., indices[...]] over the last axis; backward scatter-adds."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.shape != a.shape[:-1]:
        raise ShapeMismatchError(
            f"take_along_last indices {idx.shape} do not match {a.shape[:-1]}")
    expanded = idx[..., None]
    out = np.take_along_axis(a.data, expanded, axis=-1)[..., 0]

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, expanded, g[..., None], axis=-1)
        return ((a, ga),)

    return _result(out, (a,), "take_along_last", bwd)


def argmax_last(a: Tensor) -> np.ndarray:
    """Index of the largest entry per last-axis slice (lowest index on
    ties).  Plain integer array: there is no gradient path."""
    return np.argmax(a.data, axis=-1)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor,
               eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply
    the learned gain and bias."""
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatchError(
            f"layer_norm gain/bias must be ({d},), got {gain.shape}/{bias.shape}")
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        reduce_axes = tuple(range(g.ndim - 1))
        g_gain = (g * xhat).sum(axis=reduce_axes)
        g_bias = g.sum(axis=reduce_axes)
        gx = g * gain.data
        ga = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return ((a, ga), (gain, g_gain), (bias, g_bias))

    return _result(out, (a, gain, bias), "layer_norm", bwd)


def dropout(a: Tensor, p: float, rng: np.random.Generator,
            scale_kept: bool = True) -> Tensor:
    """Multiply by a fresh Bernoulli keep-mask.

    With ``scale_kept`` the surviving entries are rescaled by 1/(1-p)
    (inverted dropout); the word-drop regularizer turns that off.
    """
    if not 0.0 <= p <= 1.0:
        raise ParameterError(f"dropout probability {p} outside [0, 1]")
    if p == 0.0:
        return a
    keep = rng.random(a.shape) >= p
    mask = keep.astype(a.dtype.type)
    if scale_kept and p < 1.0:
        mask /= np.asarray(1.0 - p, dtype=a.dtype)
    return mul(a, Tensor(mask))


# -- oracle helper -----------------------------------------------------


def finite_difference_grad(f: Callable[[np.ndarray], float],
                           x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function, entry by entry."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return g

"""Reverse-mode automatic differentiation over dense float64 arrays.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output adjoint to the parents' adjoints.  Calling
:func:`backward` on a scalar builds the tape (a topological ordering of the
graph reachable from the loss) and replays it in reverse.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

DTYPE = np.float64
MASK_FILL = -1e30

_GRAD_ENABLED = True
# names of ops whose adjoint is deliberately perturbed; negative-control hook for gradcheck
_FAULTS: set = set()


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateMaskError(ValueError):
    """A softmax slice has no unmasked entries."""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def inject_fault(op_name: str):
    """Corrupt the adjoint of ``op_name`` (scaled by 1.1) inside the block."""
    _FAULTS.add(op_name)
    try:
        yield
    finally:
        _FAULTS.discard(op_name)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # operator sugar
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)


TensorLike = Union[Tensor, np.ndarray, float, int]


def as_tensor(x: TensorLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: cannot broadcast {a.shape} and {b.shape}") from exc
    return _make(
        data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul: cannot broadcast {a.shape} and {b.shape}") from exc
    return _make(
        data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bw(g):
        d = g * out * (1.0 - out)
        if "sigmoid" in _FAULTS:
            d = d * 1.1
        return (d,)

    return _make(out, (x,), bw, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """``max(x, floor)``; the adjoint is zero where the floor is active.  NaN passes through."""
    keep = ~(x.data <= floor)
    return _make(np.where(keep, x.data, floor), (x,), lambda g: (g * keep,), "clamp_min")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, batched over leading axes (numpy ``@`` semantics).

    Both operands need at least two axes.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        data = a.data @ b.data
    except ValueError as exc:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from exc

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(data, (a, b), bw, "matmul")


def affine(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` where ``x`` may carry any number of leading axes."""
    if x.ndim == 1:
        out = reshape(matmul(reshape(x, (1, -1)), weight), (weight.shape[-1],))
    else:
        out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# ---------------------------------------------------------------------------
# reductions and normalisation


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    data = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(data, (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def max(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Maximum along ``axis``; the adjoint goes to the first arg-max entry only."""
    idx = np.argmax(x.data, axis=axis)
    idx_k = np.expand_dims(idx, axis)
    data = np.take_along_axis(x.data, idx_k, axis=axis)
    if not keepdims:
        data = np.squeeze(data, axis=axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        out = np.zeros_like(x.data)
        np.put_along_axis(out, idx_k, g, axis=axis)
        return (out,)

    return _make(data, (x,), bw, "max")


def softmax(x: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Numerically stable softmax with optional boolean mask.

    Masked entries receive an additive ``-1e30`` before normalisation and are
    then set to exactly zero.

    Raises:
        DegenerateMaskError: if some slice along ``axis`` is fully masked.
    """
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not np.all(mask.any(axis=axis)):
            raise DegenerateMaskError("softmax: a slice has every entry masked")
        z = np.where(mask, z, z + MASK_FILL)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


# ---------------------------------------------------------------------------
# shape and indexing


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    return _make(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),), "swapaxes")


def expand_dims(x: Tensor, axis: int) -> Tensor:
    return reshape(x, np.expand_dims(x.data, axis).shape)


def broadcast_to(x: Tensor, shape) -> Tensor:
    return _make(
        np.broadcast_to(x.data, shape).copy(),
        (x,),
        lambda g: (_unbroadcast(g, x.shape),),
        "broadcast_to",
    )


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ref = xs[0].shape
    ax = axis % len(ref)
    for x in xs[1:]:
        if len(x.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(x.shape, ref)) if i != ax
        ):
            raise DimensionError(
                f"concat: shapes {[t.shape for t in xs]} disagree off axis {axis}"
            )
    data = np.concatenate([x.data for x in xs], axis=ax)
    bounds = np.cumsum([x.shape[ax] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(data, xs, bw, "concat")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        data = np.stack([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"stack: shapes {[t.shape for t in xs]} differ") from exc

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(data, xs, bw, "stack")


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis or p is None for p in parts)


def getitem(x: Tensor, index) -> Tensor:
    data = x.data[index]
    basic = _is_basic(index)

    def bw(g):
        out = np.zeros_like(x.data)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _make(np.array(data), (x,), bw, "getitem")


def gather_rows(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]`` for an integer array ``ids`` of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"gather_rows: ids must lie in [0, {n}), got range [{ids.min()}, {ids.max()}]")
    data = table.data[ids]

    def bw(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, *table.shape[1:]))
        return (out,)

    return _make(data, (table,), bw, "gather_rows")


def take_last(x: Tensor, index) -> Tensor:
    """Select one entry per slice along the last axis: ``out[...] = x[..., index[...]]``."""
    idx = np.expand_dims(np.asarray(index, dtype=np.int64), -1)
    data = np.take_along_axis(x.data, idx, axis=-1)[..., 0]

    def bw(g):
        out = np.zeros_like(x.data)
        np.put_along_axis(out, idx, np.expand_dims(g, -1), axis=-1)
        return (out,)

    return _make(data, (x,), bw, "take_last")


def scatter_add(src: Tensor, index, size: int) -> Tensor:
    """Sum ``src[..., m]`` into bucket ``index[..., m]`` of a new last axis of ``size``.

    ``index`` must broadcast to ``src.shape``.
    """
    idx = np.broadcast_to(np.asarray(index, dtype=np.int64), src.shape)
    lead = src.shape[:-1]
    rows = int(np.prod(lead)) if lead else 1
    src2 = src.data.reshape(rows, src.shape[-1])
    idx2 = idx.reshape(rows, src.shape[-1])
    out = np.zeros((rows, size))
    np.add.at(out, (np.arange(rows)[:, None], idx2), src2)

    def bw(g):
        g2 = g.reshape(rows, size)
        return (np.take_along_axis(g2, idx2, axis=1).reshape(src.shape),)

    return _make(out.reshape(*lead, size), (src,), bw, "scatter_add")


# ---------------------------------------------------------------------------
# tape and backward


@dataclass
class Tape:
    """Topologically ordered list of the nodes a loss depends on."""

    nodes: List[Tensor] = field(default_factory=list)

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        order: List[Tensor] = []
        seen = set()
        stack = [(root, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def replay(self, seed_grad: np.ndarray) -> None:
        """Propagate ``seed_grad`` from the last node to every node, accumulating into ``.grad``."""
        adj: Dict[int, np.ndarray] = {id(self.nodes[-1]): seed_grad}
        for node in reversed(self.nodes):
            g = adj.pop(id(node), None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                adj[key] = pg if key not in adj else adj[key] + pg


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every participating tensor.

    Raises:
        ContractError: if ``loss`` is not a scalar.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    Tape.record(loss).replay(np.ones_like(loss.data))


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# finite-difference oracle


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: Dict[str, float]
    worst: Tuple[str, tuple]
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def failing(self) -> List[str]:
        return [k for k, v in self.per_param.items() if v > self.tol]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_grads(
    f: Callable[[], Union[Tensor, Sequence[Tensor]]],
    params: Dict[str, Tensor],
    h: float = 1e-5,
) -> List[Dict[str, np.ndarray]]:
    """Central differences of every output of ``f`` w.r.t. every parameter coordinate.

    ``f`` may return a single scalar or a sequence of scalars; one sweep over
    the coordinates serves all of them.
    """
    if h <= 0:
        raise ContractError("finite differences need h > 0")

    def evaluate():
        with no_grad():
            out = f()
        outs = [out] if isinstance(out, Tensor) else list(out)
        return np.array([float(o.data) for o in outs])

    n_out = len(evaluate())
    result = [{name: np.zeros(p.shape) for name, p in params.items()} for _ in range(n_out)]
    for name, p in params.items():
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = evaluate()
            flat[i] = orig - h
            down = evaluate()
            flat[i] = orig
            d = (up - down) / (2.0 * h)
            for k in range(n_out):
                result[k][name].reshape(-1)[i] = d[k]
    return result


def analytic_grads(f: Callable[[], Tensor], params: Dict[str, Tensor]) -> Dict[str, np.ndarray]:
    zero_grads(params.values())
    backward(f())
    out = {n: (p.grad.copy() if p.grad is not None else np.zeros(p.shape)) for n, p in params.items()}
    zero_grads(params.values())
    return out


def compare_grads(
    analytic: Dict[str, np.ndarray],
    numeric: Dict[str, np.ndarray],
    tol: float,
    floor: float = 1e-6,
) -> GradCheckReport:
    per_param = {}
    worst = ("", ())
    worst_err = 0.0
    for name, a in analytic.items():
        err = relative_error(a, numeric[name], floor)
        e = float(err.max()) if err.size else 0.0
        per_param[name] = e
        if e > worst_err:
            worst_err = e
            worst = (name, tuple(int(i) for i in np.unravel_index(int(err.argmax()), err.shape)))
    return GradCheckReport(worst_err, per_param, worst, tol)


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Dict[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare analytic gradients of ``f`` against central finite differences.

    Args:
        f: zero-argument closure computing a scalar loss from ``params``.
        params: name -> tensor; their ``data`` is perturbed in place and restored.
        h: finite-difference step.
        tol: largest acceptable relative error.
    """
    analytic = analytic_grads(f, params)
    numeric = numeric_grads(f, params, h)[0]
    return compare_grads(analytic, numeric, tol)

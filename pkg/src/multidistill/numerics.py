"""Dense tensors with reverse-mode differentiation.

A ``Tensor`` wraps a numpy array. Every differentiable op records its
parents and a closure mapping the output gradient to parent gradients;
``backward`` linearises that graph into a ``ComputationTape`` and replays
the closures in reverse.

There is deliberately no implicit broadcasting. Elementwise ops need equal
shapes; ``add_bias`` and ``expand`` are the explicit ways to combine a
smaller tensor with a larger one.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class ContractError(RuntimeError):
    pass


_state = threading.local()


def _st():
    if not hasattr(_state, "dtype"):
        _state.dtype = np.dtype(np.float32)
        _state.grad_enabled = True
    return _state


def default_dtype() -> np.dtype:
    return _st().dtype


@contextlib.contextmanager
def precision(dtype):
    """Create tensors with ``dtype`` inside the block (float32 outside).

    Gradient checks run under float64; finite differences at float32
    cannot resolve 1e-4 relative error.
    """
    st = _st()
    prev = st.dtype
    st.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        st.dtype = prev


@contextlib.contextmanager
def no_grad():
    st = _st()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


def grad_enabled() -> bool:
    return _st().grad_enabled


def _contig(arr: np.ndarray) -> np.ndarray:
    # np.ascontiguousarray promotes 0-d arrays to 1-d
    return arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _contig(np.array(data, dtype=default_dtype(), copy=True))
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = _contig(np.asarray(arr))
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        t._parents = ()
        t._backward = None
        t.op = "leaf"
        return t

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

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{rg})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -other)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {op}")


def _make(arr: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    _finite(arr, op)
    rg = grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor._wrap(arr, rg)
    out.op = op
    if rg:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ------------------------------------------------------------------ elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, s: float) -> Tensor:
    s = a.dtype.type(s)
    return _make(a.data * s, (a,), lambda g: (g * s,), "scale")


def add_scalar(a: Tensor, s: float) -> Tensor:
    return _make(a.data + a.dtype.type(s), (a,), lambda g: (g,), "add_scalar")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x + b where b's shape equals the trailing dimensions of x."""
    if b.ndim > x.ndim or x.shape[x.ndim - b.ndim:] != b.shape:
        raise DimensionError(f"add_bias: {b.shape} does not trail {x.shape}")
    lead = x.ndim - b.ndim

    def bw(g):
        return g, g.sum(axis=tuple(range(lead))) if lead else g

    return _make(x.data + b.data, (x, b), bw, "add_bias")


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    xd = x.data
    return _make(_kernels.gelu(xd), (x,), lambda g: (_kernels.gelu_grad(xd, g),), "gelu")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,), "exp")


# ------------------------------------------------------------------ linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supports (..., p, q) @ (q, r) and batched (B, p, q) @ (B, q, r).
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: need >=2-D operands, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    if b.ndim == 2:
        if ad.shape[-1] != bd.shape[0]:
            raise DimensionError(f"matmul: inner dimensions of {a.shape} and {b.shape} disagree")
        q, r = bd.shape

        def bw(g):
            ga = g @ bd.T
            gb = ad.reshape(-1, q).T @ g.reshape(-1, r)
            return ga, gb

        return _make(ad @ bd, (a, b), bw, "matmul")
    if a.ndim == 3 and b.ndim == 3 and ad.shape[0] == bd.shape[0] and ad.shape[2] == bd.shape[1]:

        def bw3(g):
            return g @ bd.transpose(0, 2, 1), ad.transpose(0, 2, 1) @ g

        return _make(ad @ bd, (a, b), bw3, "bmm")
    raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        if a.ndim < 2:
            raise DimensionError(f"transpose: need >=2-D, got {a.shape}")
        axes = list(range(a.ndim - 2)) + [a.ndim - 1, a.ndim - 2]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from e
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


# ------------------------------------------------------------------ reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for {ndim}-D tensor")
        out.append(ax % ndim)
    return tuple(sorted(out))


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    ax = _norm_axis(axis, x.ndim)
    shape = x.shape

    def bw(g):
        if ax is not None:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=ax)), (x,), bw, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    ax = _norm_axis(axis, x.ndim)
    count = x.size if ax is None else int(np.prod([x.shape[i] for i in ax]))
    inv = x.dtype.type(1.0 / count)
    shape = x.shape

    def bw(g):
        if ax is not None:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g * inv, shape).copy(),)

    return _make(np.asarray(x.data.mean(axis=ax)), (x,), bw, "mean")


def argmax(x, axis: int = -1) -> np.ndarray:
    """Forward-only argmax; ties go to the lowest index."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    return np.argmax(data, axis=axis)


# ------------------------------------------------------------------ normalisation


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if np.isnan(x.data).any():
        raise NumericError("softmax: NaN input")
    ax = _norm_axis(axis, x.ndim)[0]
    moved = np.moveaxis(x.data, ax, -1)
    mshape = moved.shape
    y2 = _kernels.softmax_rows(moved.reshape(-1, mshape[-1]))
    y = np.moveaxis(y2.reshape(mshape), -1, ax)

    def bw(g):
        gm = np.moveaxis(g, ax, -1).reshape(-1, mshape[-1])
        gx = _kernels.softmax_rows_grad(y2, gm)
        return (np.moveaxis(gx.reshape(mshape), -1, ax),)

    return _make(y, (x,), bw, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs last dim {d}")
    x2 = x.data.reshape(-1, d)
    y, xhat, rstd = _kernels.layer_norm(x2, gamma.data, beta.data, eps)
    gd = gamma.data
    shape = x.shape

    def bw(g):
        dx, dg, db = _kernels.layer_norm_grad(g.reshape(-1, d), xhat, rstd, gd)
        return dx.reshape(shape), dg, db

    return _make(y.reshape(shape), (x, gamma, beta), bw, "layer_norm")


# ------------------------------------------------------------------ structure


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise DimensionError("concat: empty input")
    ax = _norm_axis(axis, tensors[0].ndim)[0]
    try:
        out = np.concatenate([t.data for t in tensors], axis=ax)
    except ValueError as e:
        raise DimensionError(f"concat: {[t.shape for t in tensors]} along axis {ax}") from e
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(out, tuple(tensors), bw, "concat")


def index(x: Tensor, key) -> Tensor:
    """x[key] for basic slices and integer-array row selection."""
    shape, dt = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dt)
        np.add.at(full, key, g)
        return (full,)

    return _make(np.array(x.data[key], copy=True), (x,), bw, "index")


def place_rows(x: Tensor, rows: np.ndarray, n: int) -> Tensor:
    """(n, d) tensor holding x's rows at ``rows`` and zeros elsewhere."""
    rows = np.asarray(rows, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] != rows.size:
        raise DimensionError(f"place_rows: {x.shape} vs {rows.size} row indices")
    out = np.zeros((n, x.shape[1]), dtype=x.dtype)
    out[rows] = x.data
    return _make(out, (x,), lambda g: (g[rows],), "place_rows")


def expand(x: Tensor, count: int) -> Tensor:
    """Stack ``count`` copies of x along a new leading axis."""
    out = np.broadcast_to(x.data, (count,) + x.shape).copy()
    return _make(out, (x,), lambda g: (g.sum(axis=0),), "expand")


def patchify(image: Tensor, patch: int) -> Tensor:
    """(B, H, W, C) or (H, W, C) image to (B, g*g, p*p*C) row-major patches."""
    single = image.ndim == 3
    x = reshape(image, (1,) + image.shape) if single else image
    b, h, w, c = x.shape
    if h != w or h % patch:
        raise DimensionError(f"patchify: image {h}x{w} is not a square multiple of patch {patch}")
    g = h // patch
    x = reshape(x, (b, g, patch, g, patch, c))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    x = reshape(x, (b, g * g, patch * patch * c))
    return reshape(x, x.shape[1:]) if single else x


# ------------------------------------------------------------------ losses


def mse(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mse")
    diff = a.data - b.data
    inv = a.dtype.type(2.0 / diff.size)

    def bw(g):
        ga = g * inv * diff
        return ga, -ga

    return _make(np.asarray(np.mean(diff * diff)), (a, b), bw, "mse")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row softmax."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] != labels.size:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs {labels.size} labels")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    shifted = z - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(labels.size)
    loss = -logp[rows, labels].mean()
    p = np.exp(logp)

    def bw(g):
        d = p.copy()
        d[rows, labels] -= 1.0
        return (d * (g / labels.size),)

    return _make(np.asarray(loss, dtype=z.dtype), (logits,), bw, "cross_entropy")


# ------------------------------------------------------------------ tape / backward


@dataclass
class TapeRecord:
    op: str
    inputs: tuple[int, ...]
    output: int


@dataclass
class ComputationTape:
    """Topologically ordered record of the graph reaching one output."""

    nodes: list[Tensor] = field(default_factory=list)
    records: list[TapeRecord] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "ComputationTape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in reversed(node._parents):
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        pos = {id(n): i for i, n in enumerate(order)}
        tape = cls(nodes=order)
        for i, n in enumerate(order):
            if n._parents:
                ins = tuple(pos[id(p)] for p in n._parents if id(p) in pos)
                tape.records.append(TapeRecord(n.op, ins, i))
        return tape

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf and n.requires_grad]


def backward(loss: Tensor, leaves: Iterable[Tensor] | None = None) -> ComputationTape:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every tracked leaf.

    Leaves passed in ``leaves`` that the loss does not reach get a zero grad.
    """
    if loss.size != 1 or loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        tape = ComputationTape(nodes=[loss])
    else:
        tape = ComputationTape.from_output(loss)
    grads: dict[int, np.ndarray] = {len(tape.nodes) - 1: np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = grads.pop(rec.output, None)
        node = tape.nodes[rec.output]
        if g is None:
            continue
        _route(rec, node, node._backward(g), grads)
    for i, n in enumerate(tape.nodes):
        if n.is_leaf and n.requires_grad and i in grads:
            g = grads[i].astype(n.dtype, copy=False)
            n.grad = g.copy() if n.grad is None else n.grad + g
    if leaves is not None:
        for leaf in leaves:
            if leaf.requires_grad and leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
    return tape


def _route(rec, node, pgrads, grads):
    it = iter(rec.inputs)
    for parent, pg in zip(node._parents, pgrads):
        if not parent.requires_grad:
            continue
        j = next(it)
        if pg is None:
            continue
        if j in grads:
            grads[j] = grads[j] + pg
        else:
            grads[j] = pg

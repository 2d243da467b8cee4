"""Dense float64 tensors with reverse-mode automatic differentiation.

Gradients are define-by-run: entering the ``tape()`` context installs a fresh
recording tape for the current thread, differentiable operations append one
``TapeNode`` each as they execute, and ``backward(loss)`` sweeps the tape once
in reverse creation order. Outside a tape context the same operations run as
plain numpy computations, which is the fast path used for inference.

Everything is float64 and row-major. Broadcasting is deliberately limited to
scalars plus the explicit axis helpers (``add_vec``, ``mul_vec``,
``expand_axis``); anything fancier raises ``ShapeError``.
"""

from __future__ import annotations

import numbers
import threading
from contextlib import contextmanager

import numpy as np

from .errors import AxisError, ConfigError, DomainError, ShapeError, StateError

__all__ = [
    "Tensor",
    "Tape",
    "TapeNode",
    "tape",
    "backward",
    "tensor_new",
    "zeros",
    "ones",
    "full",
    "as_tensor",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sqrt",
    "absolute",
    "xlogx",
    "scalar_mul",
    "sigmoid",
    "tanh",
    "relu",
    "selu",
    "softplus",
    "matmul",
    "reduce",
    "reduce_sum",
    "reduce_mean",
    "reduce_max",
    "reshape",
    "transpose",
    "concat",
    "stack",
    "slice_axis",
    "flip_axis",
    "expand_axis",
    "add_vec",
    "mul_vec",
    "embedding_lookup",
    "conv2d",
    "conv1d",
    "upsample2x",
    "finite_diff_check",
    "SELU_ALPHA",
    "SELU_LAMBDA",
]

SELU_ALPHA = 1.6732632423543772
SELU_LAMBDA = 1.0507009873554805


class Tensor:
    """A dense float64 array plus an optional gradient buffer.

    ``requires_grad`` marks leaves that should accumulate gradients; it also
    propagates through operations so that backward can skip subgraphs with no
    trainable inputs. ``grad`` is zero-initialized for leaves created through
    ``tensor_new`` and filled in (additively) by ``backward``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_tape_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._tape = None
        self._tape_id = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tape_id(self):
        return self._tape_id

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; scalars and same-shape tensors only.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)


class TapeNode:
    """One recorded operation: which op ran, what it read, what backward needs.

    ``input_ids`` holds tape ids aligned with the op's tensor inputs (``None``
    for inputs that do not require gradients). The tape is append-only, so
    every recorded id references an earlier node.
    """

    __slots__ = ("op_kind", "input_ids", "saved", "backward_fn", "out")

    def __init__(self, op_kind, input_ids, saved, backward_fn, out):
        self.op_kind = op_kind
        self.input_ids = input_ids
        self.saved = saved
        self.backward_fn = backward_fn
        self.out = out


class Tape:
    """Append-only record of one forward pass, in topological order."""

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __len__(self):
        return len(self.nodes)

    def _release(self):
        # Break the tape <-> tensor reference cycle so a batch's activations
        # free immediately instead of waiting for a full gc pass.
        for node in self.nodes:
            node.out._tape = None
            node.out._tape_id = None
            node.saved = ()
        self.nodes.clear()

    def _id_of(self, t: Tensor) -> int:
        if t._tape is self:
            return t._tape_id
        # First time a leaf shows up on this tape.
        self.nodes.append(TapeNode("leaf", (), (), None, t))
        t._tape = self
        t._tape_id = len(self.nodes) - 1
        return t._tape_id

    def record(self, op_kind, inputs, saved, backward_fn, out: Tensor):
        ids = tuple(
            self._id_of(t) if isinstance(t, Tensor) and t.requires_grad else None
            for t in inputs
        )
        self.nodes.append(TapeNode(op_kind, ids, saved, backward_fn, out))
        out._tape = self
        out._tape_id = len(self.nodes) - 1


_LOCAL = threading.local()


def _active_tape() -> Tape | None:
    return getattr(_LOCAL, "tape", None)


@contextmanager
def tape():
    """Install a fresh tape for the current thread (define-by-run).

    Leaving the context releases the recorded graph; run ``backward``
    inside it.
    """
    prev = getattr(_LOCAL, "tape", None)
    t = Tape()
    _LOCAL.tape = t
    try:
        yield t
    finally:
        _LOCAL.tape = prev
        t._release()


def backward(loss: Tensor):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor.

    ``loss`` must be a scalar recorded on the active tape. Tensors with
    ``requires_grad=False`` are never touched.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ShapeError("backward expects a scalar loss tensor")
    tp = _active_tape()
    if tp is None or loss._tape is not tp:
        raise StateError("loss is not recorded on the active tape")

    nodes = tp.nodes
    adjoint: list = [None] * len(nodes)
    adjoint[loss._tape_id] = np.ones_like(loss.data)
    # Consumers always sit later on the tape, so a single reverse sweep sees
    # each node's adjoint complete by the time it is visited.
    for nid in range(loss._tape_id, -1, -1):
        g = adjoint[nid]
        if g is None:
            continue
        node = nodes[nid]
        out_t = node.out
        if out_t.requires_grad:
            out_t.grad = g.copy() if out_t.grad is None else out_t.grad + g
        if node.backward_fn is None:
            continue
        for iid, ig in zip(node.input_ids, node.backward_fn(g, node.saved)):
            if iid is None or ig is None:
                continue
            prev = adjoint[iid]
            adjoint[iid] = ig if prev is None else prev + ig


def _make(op_kind, inputs, out_data, saved, backward_fn) -> Tensor:
    out = Tensor(out_data)
    if any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        tp = _active_tape()
        if tp is not None:
            tp.record(op_kind, inputs, saved, backward_fn, out)
    return out


# ---------------------------------------------------------------------------
# Creation


def tensor_new(shape, fill=0.0, requires_grad: bool = False) -> Tensor:
    """Create a row-major tensor from a scalar fill or a flat buffer."""
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeError(f"shape entries must be >= 1, got {shape}")
    n = int(np.prod(shape)) if shape else 1
    if isinstance(fill, numbers.Number):
        data = np.full(shape, float(fill), dtype=np.float64)
    else:
        buf = np.asarray(fill, dtype=np.float64).ravel()
        if buf.size != n:
            raise ShapeError(
                f"buffer of length {buf.size} does not fill shape {shape} ({n} values)"
            )
        data = buf.reshape(shape)
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return tensor_new(shape, 0.0, requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return tensor_new(shape, 1.0, requires_grad)


def full(shape, value, requires_grad: bool = False) -> Tensor:
    return tensor_new(shape, value, requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# Elementwise arithmetic


def _is_scalar_tensor(t) -> bool:
    return isinstance(t, Tensor) and t.data.size == 1


def _sum_to_scalar_shape(g: np.ndarray, shape) -> np.ndarray:
    return np.full(shape, g.sum(), dtype=np.float64) if shape else np.asarray(g.sum())


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if isinstance(b, numbers.Number):
        return _make("add", (a,), a.data + float(b), (), lambda g, s: (g,))
    if _is_scalar_tensor(b) and a.shape != b.shape:
        return _make(
            "add",
            (a, b),
            a.data + b.data.reshape(()),
            (b.shape,),
            lambda g, s: (g, _sum_to_scalar_shape(g, s[0])),
        )
    _check_same_shape(a, b, "add")
    return _make("add", (a, b), a.data + b.data, (), lambda g, s: (g, g))


def sub(a, b) -> Tensor:
    if isinstance(a, numbers.Number):
        return _make("sub", (b,), float(a) - b.data, (), lambda g, s: (-g,))
    if isinstance(b, numbers.Number):
        return _make("sub", (a,), a.data - float(b), (), lambda g, s: (g,))
    if _is_scalar_tensor(b) and a.shape != b.shape:
        return _make(
            "sub",
            (a, b),
            a.data - b.data.reshape(()),
            (b.shape,),
            lambda g, s: (g, -_sum_to_scalar_shape(g, s[0])),
        )
    _check_same_shape(a, b, "sub")
    return _make("sub", (a, b), a.data - b.data, (), lambda g, s: (g, -g))


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if isinstance(b, numbers.Number):
        s = float(b)
        return _make("mul", (a,), a.data * s, (s,), lambda g, sv: (g * sv[0],))
    if _is_scalar_tensor(b) and a.shape != b.shape:
        return _make(
            "mul",
            (a, b),
            a.data * b.data.reshape(()),
            (a.data, b.data, b.shape),
            lambda g, s: (
                g * s[1].reshape(()),
                _sum_to_scalar_shape(g * s[0], s[2]),
            ),
        )
    _check_same_shape(a, b, "mul")
    return _make(
        "mul",
        (a, b),
        a.data * b.data,
        (a.data, b.data),
        lambda g, s: (g * s[1], g * s[0]),
    )


def div(a, b) -> Tensor:
    if isinstance(b, Tensor) and np.any(b.data == 0.0):
        raise DomainError("div: divisor contains zero")
    if isinstance(b, numbers.Number) and float(b) == 0.0:
        raise DomainError("div: divisor is zero")
    if isinstance(a, numbers.Number):
        s = float(a)
        return _make(
            "div",
            (b,),
            s / b.data,
            (s, b.data),
            lambda g, sv: (-g * sv[0] / (sv[1] * sv[1]),),
        )
    if isinstance(b, numbers.Number):
        s = float(b)
        return _make("div", (a,), a.data / s, (s,), lambda g, sv: (g / sv[0],))
    if _is_scalar_tensor(b) and a.shape != b.shape:
        bs = b.data.reshape(())
        return _make(
            "div",
            (a, b),
            a.data / bs,
            (a.data, bs, b.shape),
            lambda g, s: (
                g / s[1],
                _sum_to_scalar_shape(-g * s[0] / (s[1] * s[1]), s[2]),
            ),
        )
    _check_same_shape(a, b, "div")
    return _make(
        "div",
        (a, b),
        a.data / b.data,
        (a.data, b.data),
        lambda g, s: (g / s[1], -g * s[0] / (s[1] * s[1])),
    )


def neg(a: Tensor) -> Tensor:
    return _make("neg", (a,), -a.data, (), lambda g, s: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make("exp", (a,), out, (out,), lambda g, s: (g * s[0],))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError("log: nonpositive input")
    return _make("log", (a,), np.log(a.data), (a.data,), lambda g, s: (g / s[0],))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0.0):
        raise DomainError("sqrt: negative input")
    out = np.sqrt(a.data)
    return _make("sqrt", (a,), out, (out,), lambda g, s: (g / (2.0 * s[0]),))


def absolute(a: Tensor) -> Tensor:
    # Subgradient 0 at exactly 0.
    return _make("abs", (a,), np.abs(a.data), (a.data,), lambda g, s: (g * np.sign(s[0]),))


def xlogx(a: Tensor) -> Tensor:
    """Elementwise x*ln(x) with the continuous extension 0*ln(0) = 0."""
    if np.any(a.data < 0.0):
        raise DomainError("xlogx: negative input")
    pos = a.data > 0.0
    out = np.zeros_like(a.data)
    np.multiply(a.data, np.log(a.data, where=pos, out=np.zeros_like(a.data)), out=out, where=pos)

    def bwd(g, s):
        x, p = s
        d = np.zeros_like(x)
        np.add(np.log(x, where=p, out=np.zeros_like(x)), 1.0, out=d, where=p)
        return (g * d,)

    return _make("xlogx", (a,), out, (a.data, pos), bwd)


def scalar_mul(a: Tensor, s) -> Tensor:
    return mul(a, float(s))


_UNARY = {"neg": neg, "exp": exp, "log": log}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div, "scalar_mul": scalar_mul}


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name over the basic elementwise operations."""
    if kind in _UNARY:
        return _UNARY[kind](a)
    if kind in _BINARY:
        return _BINARY[kind](a, b)
    raise ConfigError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------------------
# Activations


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make("sigmoid", (a,), out, (out,), lambda g, s: (g * s[0] * (1.0 - s[0]),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make("tanh", (a,), out, (out,), lambda g, s: (g * (1.0 - s[0] * s[0]),))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    return _make("relu", (a,), out, (a.data > 0.0,), lambda g, s: (g * s[0],))


def selu(a: Tensor) -> Tensor:
    x = a.data
    out = np.where(x > 0.0, SELU_LAMBDA * x, SELU_LAMBDA * SELU_ALPHA * np.expm1(x))

    def bwd(g, s):
        (xs,) = s
        d = np.where(xs > 0.0, SELU_LAMBDA, SELU_LAMBDA * SELU_ALPHA * np.exp(xs))
        return (g * d,)

    return _make("selu", (a,), out, (x,), bwd)


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def bwd(g, s):
        (xs,) = s
        d = np.empty_like(xs)
        pos = xs >= 0
        d[pos] = 1.0 / (1.0 + np.exp(-xs[pos]))
        ex = np.exp(xs[~pos])
        d[~pos] = ex / (1.0 + ex)
        return (g * d,)

    return _make("softplus", (a,), out, (x,), bwd)


# ---------------------------------------------------------------------------
# Linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    return _make(
        "matmul",
        (a, b),
        a.data @ b.data,
        (a.data, b.data),
        lambda g, s: (g @ s[1].T, s[0].T @ g),
    )


# ---------------------------------------------------------------------------
# Reductions


def _normalize_axes(axes, ndim) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    out = []
    for ax in axes:
        ax = int(ax)
        if ax < 0:
            ax += ndim
        if not 0 <= ax < ndim:
            raise AxisError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax)
    if len(set(out)) != len(out):
        raise AxisError(f"duplicate axes in {axes}")
    return tuple(sorted(out))


def _bcast_back(g: np.ndarray, axes, shape) -> np.ndarray:
    for ax in axes:
        g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape).copy()


def reduce(kind: str, x: Tensor, axes=None) -> Tensor:
    """Reduce over ``axes`` (all axes when None). Max ties route to the first index."""
    axes = _normalize_axes(axes, x.ndim)
    if kind == "sum":
        out = x.data.sum(axis=axes) if axes else x.data.copy()
        return _make(
            "reduce_sum", (x,), out, (axes, x.shape), lambda g, s: (_bcast_back(g, s[0], s[1]),)
        )
    if kind == "mean":
        count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
        out = x.data.mean(axis=axes) if axes else x.data.copy()
        return _make(
            "reduce_mean",
            (x,),
            out,
            (axes, x.shape, count),
            lambda g, s: (_bcast_back(g, s[0], s[1]) / s[2],),
        )
    if kind == "max":
        if not axes:
            return _make("reduce_max", (x,), x.data.copy(), (), lambda g, s: (g,))
        keep = [a for a in range(x.ndim) if a not in axes]
        moved = np.transpose(x.data, keep + list(axes))
        outer_shape = moved.shape[: len(keep)]
        flat = moved.reshape(int(np.prod(outer_shape)) if keep else 1, -1)
        # argmax returns the first maximal index, which fixes tie-breaking.
        idx = np.argmax(flat, axis=1)
        out = flat[np.arange(flat.shape[0]), idx].reshape(outer_shape)

        def bwd(g, s):
            keep_s, axes_s, shape_s, idx_s, flat_shape = s
            gz = np.zeros(flat_shape)
            gz[np.arange(flat_shape[0]), idx_s] = g.ravel()
            moved_shape = [shape_s[a] for a in keep_s] + [shape_s[a] for a in axes_s]
            gz = gz.reshape(moved_shape)
            inv = np.argsort(keep_s + list(axes_s))
            return (np.transpose(gz, inv),)

        return _make(
            "reduce_max", (x,), out, (keep, axes, x.shape, idx, flat.shape), bwd
        )
    raise ConfigError(f"unknown reduce kind {kind!r}")


def reduce_sum(x: Tensor, axes=None) -> Tensor:
    return reduce("sum", x, axes)


def reduce_mean(x: Tensor, axes=None) -> Tensor:
    return reduce("mean", x, axes)


def reduce_max(x: Tensor, axes=None) -> Tensor:
    return reduce("max", x, axes)


# ---------------------------------------------------------------------------
# Shape manipulation


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if (int(np.prod(shape)) if shape else 1) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    return _make(
        "reshape",
        (x,),
        x.data.reshape(shape),
        (x.shape,),
        lambda g, s: (g.reshape(s[0]),),
    )


def transpose(x: Tensor, axes) -> Tensor:
    axes = list(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise AxisError(f"transpose axes {axes} are not a permutation of rank {x.ndim}")
    inv = np.argsort(axes)
    return _make(
        "transpose",
        (x,),
        np.ascontiguousarray(np.transpose(x.data, axes)),
        (inv,),
        lambda g, s: (np.transpose(g, s[0]),),
    )


def concat(parts, axis: int) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat of zero tensors")
    nd = parts[0].ndim
    if axis < 0:
        axis += nd
    if not 0 <= axis < nd:
        raise AxisError(f"concat axis {axis} out of range")
    sizes = [p.shape[axis] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)

    def bwd(g, s):
        ax, szs = s
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, np.cumsum(szs)[:-1], axis=ax))

    return _make("concat", tuple(parts), out, (axis, sizes), bwd)


def stack(parts, axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("stack of zero tensors")
    out = np.stack([p.data for p in parts], axis=axis)

    def bwd(g, s):
        (ax,) = s
        return tuple(np.ascontiguousarray(piece.squeeze(ax)) for piece in np.split(g, g.shape[ax], axis=ax))

    return _make("stack", tuple(parts), out, (axis,), bwd)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    if axis < 0:
        axis += x.ndim
    if not 0 <= axis < x.ndim:
        raise AxisError(f"slice axis {axis} out of range")
    if not (0 <= start < stop <= x.shape[axis]):
        raise ShapeError(f"slice [{start}:{stop}] invalid for axis of size {x.shape[axis]}")
    sl = tuple(slice(None) if a != axis else slice(start, stop) for a in range(x.ndim))

    def bwd(g, s):
        shape, sl_s = s
        out = np.zeros(shape)
        out[sl_s] = g
        return (out,)

    return _make("slice", (x,), x.data[sl].copy(), (x.shape, sl), bwd)


def flip_axis(x: Tensor, axis: int) -> Tensor:
    if axis < 0:
        axis += x.ndim
    if not 0 <= axis < x.ndim:
        raise AxisError(f"flip axis {axis} out of range")
    return _make(
        "flip",
        (x,),
        np.ascontiguousarray(np.flip(x.data, axis)),
        (axis,),
        lambda g, s: (np.flip(g, s[0]),),
    )


def expand_axis(x: Tensor, axis: int, n: int) -> Tensor:
    """Insert a new axis of size ``n`` by replication (gradient sums over it)."""
    if axis < 0:
        axis += x.ndim + 1
    if not 0 <= axis <= x.ndim:
        raise AxisError(f"expand axis {axis} out of range")
    out = np.repeat(np.expand_dims(x.data, axis), n, axis=axis)
    return _make("expand", (x,), out, (axis,), lambda g, s: (g.sum(axis=s[0]),))


def add_vec(x: Tensor, v: Tensor, axis: int) -> Tensor:
    """Add a rank-1 vector along one axis of ``x`` (e.g. a bias per channel)."""
    if axis < 0:
        axis += x.ndim
    if v.ndim != 1 or v.shape[0] != x.shape[axis]:
        raise ShapeError(f"add_vec: vector {v.shape} does not match axis {axis} of {x.shape}")
    vshape = tuple(x.shape[axis] if a == axis else 1 for a in range(x.ndim))
    other = tuple(a for a in range(x.ndim) if a != axis)
    return _make(
        "add_vec",
        (x, v),
        x.data + v.data.reshape(vshape),
        (other,),
        lambda g, s: (g, g.sum(axis=s[0]) if s[0] else g.copy()),
    )


def mul_vec(x: Tensor, v: Tensor, axis: int) -> Tensor:
    """Scale ``x`` by a rank-1 vector along one axis."""
    if axis < 0:
        axis += x.ndim
    if v.ndim != 1 or v.shape[0] != x.shape[axis]:
        raise ShapeError(f"mul_vec: vector {v.shape} does not match axis {axis} of {x.shape}")
    vshape = tuple(x.shape[axis] if a == axis else 1 for a in range(x.ndim))
    other = tuple(a for a in range(x.ndim) if a != axis)
    return _make(
        "mul_vec",
        (x, v),
        x.data * v.data.reshape(vshape),
        (x.data, v.data, vshape, other),
        lambda g, s: (
            g * s[1].reshape(s[2]),
            (g * s[0]).sum(axis=s[3]) if s[3] else (g * s[0]),
        ),
    )


# ---------------------------------------------------------------------------
# Lookups


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Row lookup; gradients scatter-add into the looked-up rows only."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding ids must be integers")
    V = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise IndexError(f"embedding id out of range [0, {V})")

    def bwd(g, s):
        ids_s, tbl_shape = s
        dt = np.zeros(tbl_shape)
        np.add.at(dt, ids_s.ravel(), g.reshape(-1, tbl_shape[1]))
        return (dt,)

    return _make("embedding", (table,), table.data[ids], (ids, table.shape), bwd)


# ---------------------------------------------------------------------------
# Convolutions (cross-correlation convention, no kernel flip)


def _conv2d_prep(x: Tensor, kernels: Tensor, padding: str):
    if kernels.ndim != 4:
        raise ShapeError(f"conv2d kernels must be rank 4, got {kernels.shape}")
    single = x.ndim == 3
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv2d input must be rank 3 or 4, got {x.shape}")
    xd = x.data[None] if single else x.data
    n, c, h, w = xd.shape
    co, ci, kh, kw = kernels.shape
    if ci != c:
        raise ShapeError(f"conv2d channel mismatch: input {c}, kernels expect {ci}")
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError("same padding requires odd kernel sizes")
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        ph = pw = 0
    else:
        raise ConfigError(f"unknown padding {padding!r}")
    ho, wo = h + 2 * ph - kh + 1, w + 2 * pw - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h}x{w}")
    return single, xd, (n, c, h, w, co, kh, kw, ph, pw, ho, wo)


def conv2d(x: Tensor, kernels: Tensor, padding: str = "same") -> Tensor:
    """2D cross-correlation over [C,H,W] (or batched [N,C,H,W]) inputs."""
    single, xd, dims = _conv2d_prep(x, kernels, padding)
    n, c, h, w, co, kh, kw, ph, pw, ho, wo = dims
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    out = np.einsum("ncijuv,ocuv->noij", win, kernels.data, optimize=True)
    if single:
        out = out[0]

    def bwd(g, s):
        xp_s, k_s, dims_s, single_s = s
        n_, c_, h_, w_, co_, kh_, kw_, ph_, pw_, ho_, wo_ = dims_s
        gb = g[None] if single_s else g
        win_s = np.lib.stride_tricks.sliding_window_view(xp_s, (kh_, kw_), axis=(2, 3))
        dk = np.einsum("ncijuv,noij->ocuv", win_s, gb, optimize=True)
        # dX is itself a correlation: full-pad the output gradient, flip the kernel.
        gp = np.pad(gb, ((0, 0), (0, 0), (kh_ - 1, kh_ - 1), (kw_ - 1, kw_ - 1)))
        wg = np.lib.stride_tricks.sliding_window_view(gp, (kh_, kw_), axis=(2, 3))
        dxp = np.einsum("noijuv,ocuv->ncij", wg, k_s[:, :, ::-1, ::-1], optimize=True)
        dx = dxp[:, :, ph_ : ph_ + h_, pw_ : pw_ + w_]
        if single_s:
            dx = dx[0]
        return (np.ascontiguousarray(dx), dk)

    return _make("conv2d", (x, kernels), out, (xp, kernels.data, dims, single), bwd)


def conv1d(x: Tensor, kernels: Tensor, padding: str = "same") -> Tensor:
    """1D cross-correlation over [C,T] (or batched [N,C,T]) inputs."""
    if kernels.ndim != 3:
        raise ShapeError(f"conv1d kernels must be rank 3, got {kernels.shape}")
    single = x.ndim == 2
    if x.ndim not in (2, 3):
        raise ShapeError(f"conv1d input must be rank 2 or 3, got {x.shape}")
    xd = x.data[None] if single else x.data
    n, c, t = xd.shape
    co, ci, k = kernels.shape
    if ci != c:
        raise ShapeError(f"conv1d channel mismatch: input {c}, kernels expect {ci}")
    if padding == "same":
        if k % 2 == 0:
            raise ShapeError("same padding requires odd kernel size")
        p = k // 2
    elif padding == "valid":
        p = 0
    else:
        raise ConfigError(f"unknown padding {padding!r}")
    to = t + 2 * p - k + 1
    if to < 1:
        raise ShapeError(f"kernel {k} larger than padded input of length {t}")
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p)))
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)
    out = np.einsum("nciu,ocu->noi", win, kernels.data, optimize=True)
    if single:
        out = out[0]

    def bwd(g, s):
        xp_s, k_s, (n_, c_, t_, co_, kk, p_, to_), single_s = s
        gb = g[None] if single_s else g
        win_s = np.lib.stride_tricks.sliding_window_view(xp_s, kk, axis=2)
        dk = np.einsum("nciu,noi->ocu", win_s, gb, optimize=True)
        gp = np.pad(gb, ((0, 0), (0, 0), (kk - 1, kk - 1)))
        wg = np.lib.stride_tricks.sliding_window_view(gp, kk, axis=2)
        dxp = np.einsum("noiu,ocu->nci", wg, k_s[:, :, ::-1], optimize=True)
        dx = dxp[:, :, p_ : p_ + t_]
        if single_s:
            dx = dx[0]
        return (np.ascontiguousarray(dx), dk)

    return _make(
        "conv1d", (x, kernels), out, (xp, kernels.data, (n, c, t, co, k, p, to), single), bwd
    )


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling of the last two axes."""
    if x.ndim not in (3, 4):
        raise ShapeError(f"upsample2x input must be rank 3 or 4, got {x.shape}")
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def bwd(g, s):
        (shape,) = s
        gr = g.reshape(shape[:-2] + (shape[-2], 2, shape[-1], 2))
        return (gr.sum(axis=(-3, -1)),)

    return _make("upsample2x", (x,), out, (x.shape,), bwd)


# ---------------------------------------------------------------------------
# Gradient checking


def finite_diff_check(f, x: Tensor, h: float = 1e-5) -> float:
    """Compare analytic gradients of ``f`` against central finite differences.

    Returns the maximum over coordinates of
    ``|analytic - numeric| / max(1, |analytic|)``. ``f`` must be a
    deterministic scalar-valued function of ``x``. Returns NaN if ``f``
    produces a NaN anywhere.
    """
    if h <= 0:
        raise DomainError("finite_diff_check requires h > 0")
    was_rg, was_grad = x.requires_grad, x.grad
    x.requires_grad = True
    x.grad = None
    try:
        with tape():
            y = f(x)
            backward(y)
        analytic = (x.grad if x.grad is not None else np.zeros_like(x.data)).ravel().copy()
    finally:
        x.requires_grad = was_rg
        x.grad = was_grad

    flat = x.data.ravel()
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(np.asarray(f(x).data).reshape(()))
        flat[i] = orig - h
        fm = float(np.asarray(f(x).data).reshape(()))
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * h)
        if not (np.isfinite(numeric) and np.isfinite(analytic[i])):
            return float("nan")
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    return worst

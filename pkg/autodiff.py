"""
Tape-based reverse-mode automatic differentiation over dense float64 tensors.

Every operation appends a node to an append-only Tape and caches its forward
value. `grad` sweeps the tape backwards; with `create_graph=True` the sweep
emits ordinary forward nodes for each vector-Jacobian product, so the returned
gradients are themselves differentiable and `grad` can be applied again. This
is what makes meta-gradients through an inner SGD step exact.

Each vector-Jacobian rule is written once against an op namespace `F`. During
a plain backward pass `F` is `_NumpyOps` and the rule runs on arrays; during a
create_graph pass `F` is `_VarOps` and the same rule records new nodes.

Broadcasting is restricted to `add_bias_row`; every other op requires exact
dimension equality.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

import numpy as np

from errors import MetaLabError

Dims = tuple[int, ...]


class AutodiffError(MetaLabError, ValueError):
    """Raised for misuse of the tape: foreign Vars, non-scalar outputs, non-finite leaves."""


class ShapeError(AutodiffError):
    """Raised when operand dimensions do not conform."""


class DomainError(AutodiffError):
    """Raised when an op is evaluated outside its domain (e.g. log of a non-positive value)."""


@dataclass
class Node:
    """One operation record on the tape."""

    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    requires_grad: bool
    payload: dict[str, Any] = field(default_factory=dict)


class Tape:
    """
    An append-only arena of operation records.

    Node ids are assigned in creation order, so every node's inputs have
    strictly smaller ids and the node list is already topologically sorted.
    A tape is confined to one thread; independent tapes may run in parallel.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    @property
    def next_id(self) -> int:
        return len(self.nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        """Drops every node. Vars issued before the reset must not be used again."""
        self.nodes = []

    def record(self, op: str, inputs: Sequence["Var"], value: np.ndarray, payload: Optional[dict] = None) -> "Var":
        for var in inputs:
            if var.tape is not self:
                raise AutodiffError(f"'{op}' received a Var from a different tape.")
        requires_grad = any(self.nodes[v.id].requires_grad for v in inputs)
        node = Node(op=op, inputs=tuple(v.id for v in inputs), value=value, requires_grad=requires_grad, payload=payload or {})
        self.nodes.append(node)
        return Var(self, len(self.nodes) - 1, value.shape)


class Var:
    """A handle to one node of a Tape."""

    __slots__ = ("tape", "id", "dims")

    def __init__(self, tape: Tape, node_id: int, dims: Dims):
        self.tape = tape
        self.id = node_id
        self.dims = tuple(dims)

    @property
    def value(self) -> np.ndarray:
        """A copy of the cached forward value."""
        return self.tape.nodes[self.id].value.copy()

    @property
    def requires_grad(self) -> bool:
        return self.tape.nodes[self.id].requires_grad

    def item(self) -> float:
        if self.dims not in ((), (1,), (1, 1)):
            raise ShapeError(f"item() needs a single-element Var, got dims {self.dims}.")
        return float(self.tape.nodes[self.id].value.reshape(()))

    def __repr__(self) -> str:
        return f"Var(id={self.id}, op={self.tape.nodes[self.id].op!r}, dims={self.dims})"

    def __add__(self, other: "Var") -> "Var":
        return add(self, other)

    def __sub__(self, other: "Var") -> "Var":
        return sub(self, other)

    def __mul__(self, other: "Var") -> "Var":
        return mul(self, other)

    def __neg__(self) -> "Var":
        return neg(self)

    def __matmul__(self, other: "Var") -> "Var":
        return matmul(self, other)

    def sum(self) -> "Var":
        return reduce_sum(self)

    def mean(self) -> "Var":
        return reduce_mean(self)


def _val(v: Var) -> np.ndarray:
    return v.tape.nodes[v.id].value


def _same_dims(op: str, a: Var, b: Var) -> None:
    if a.dims != b.dims:
        raise ShapeError(f"'{op}' needs equal dims, got {a.dims} and {b.dims}.")


# --- Leaves ---

def var(tape: Tape, value: Any, requires_grad: bool = True) -> Var:
    """
    Appends a leaf node holding a float64 copy of `value`.

    Raises:
        AutodiffError: If the value contains NaN or infinity.
    """
    array = np.array(value, dtype=np.float64)
    if not np.all(np.isfinite(array)):
        raise AutodiffError("Leaf values must be finite.")
    node = Node(op="leaf", inputs=(), value=array, requires_grad=requires_grad)
    tape.nodes.append(node)
    return Var(tape, len(tape.nodes) - 1, array.shape)


def constant(tape: Tape, value: Any) -> Var:
    """A non-differentiable leaf."""
    return var(tape, value, requires_grad=False)


# --- Elementwise ops ---

def add(a: Var, b: Var) -> Var:
    _same_dims("add", a, b)
    return a.tape.record("add", [a, b], _val(a) + _val(b))


def sub(a: Var, b: Var) -> Var:
    _same_dims("sub", a, b)
    return a.tape.record("sub", [a, b], _val(a) - _val(b))


def mul(a: Var, b: Var) -> Var:
    _same_dims("mul", a, b)
    return a.tape.record("mul", [a, b], _val(a) * _val(b))


def neg(a: Var) -> Var:
    return a.tape.record("neg", [a], -_val(a))


def scale(a: Var, c: float) -> Var:
    """Multiplies by a Python constant (scale_by_constant)."""
    c = float(c)
    return a.tape.record("scale", [a], _val(a) * c, {"c": c})


def shift(a: Var, c: float) -> Var:
    """Adds a Python constant."""
    c = float(c)
    return a.tape.record("shift", [a], _val(a) + c, {"c": c})


def square(a: Var) -> Var:
    x = _val(a)
    return a.tape.record("square", [a], x * x)


def exp(a: Var) -> Var:
    return a.tape.record("exp", [a], np.exp(_val(a)))


def log(a: Var) -> Var:
    x = _val(a)
    if np.any(x <= 0.0):
        raise DomainError("log of a non-positive value.")
    return a.tape.record("log", [a], np.log(x))


def reciprocal(a: Var) -> Var:
    x = _val(a)
    if np.any(x == 0.0):
        raise DomainError("reciprocal of zero.")
    return a.tape.record("reciprocal", [a], 1.0 / x)


def relu(a: Var) -> Var:
    return a.tape.record("relu", [a], np.maximum(_val(a), 0.0))


def tanh(a: Var) -> Var:
    return a.tape.record("tanh", [a], np.tanh(_val(a)))


def sigmoid(a: Var) -> Var:
    x = _val(a)
    # Split by sign so neither branch overflows.
    e = np.exp(-np.abs(x))
    value = np.where(x >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))
    return a.tape.record("sigmoid", [a], value)


def sin(a: Var) -> Var:
    return a.tape.record("sin", [a], np.sin(_val(a)))


def cos(a: Var) -> Var:
    return a.tape.record("cos", [a], np.cos(_val(a)))


# --- Linear algebra and shape ops ---

def matmul(a: Var, b: Var) -> Var:
    if len(a.dims) != 2 or len(b.dims) != 2 or a.dims[1] != b.dims[0]:
        raise ShapeError(f"'matmul' needs [n×k]·[k×m], got {a.dims} and {b.dims}.")
    return a.tape.record("matmul", [a, b], _val(a) @ _val(b))


def transpose(a: Var) -> Var:
    if len(a.dims) != 2:
        raise ShapeError(f"'transpose' needs a matrix, got dims {a.dims}.")
    return a.tape.record("transpose", [a], np.ascontiguousarray(_val(a).T))


def add_bias_row(x: Var, b: Var) -> Var:
    """Adds the length-m vector `b` to every row of the [n×m] matrix `x`."""
    if len(x.dims) != 2 or b.dims != (x.dims[1],):
        raise ShapeError(f"'add_bias_row' needs [n×m] and [m], got {x.dims} and {b.dims}.")
    return x.tape.record("add_bias_row", [x, b], _val(x) + _val(b))


def sum_rows(x: Var) -> Var:
    """Sums an [n×m] matrix over its rows, giving [m]."""
    if len(x.dims) != 2:
        raise ShapeError(f"'sum_rows' needs a matrix, got dims {x.dims}.")
    return x.tape.record("sum_rows", [x], _val(x).sum(axis=0))


def reduce_sum(a: Var) -> Var:
    return a.tape.record("sum", [a], np.array(_val(a).sum()))


def reduce_mean(a: Var) -> Var:
    n = _val(a).size
    if n == 0:
        raise ShapeError("'mean' of an empty tensor.")
    return a.tape.record("mean", [a], np.array(_val(a).sum() / n), {"n": n})


def fill(s: Var, dims: Dims) -> Var:
    """Broadcasts a scalar Var to a tensor of the given dims."""
    if s.dims != ():
        raise ShapeError(f"'fill' needs a scalar, got dims {s.dims}.")
    dims = tuple(int(d) for d in dims)
    return s.tape.record("fill", [s], np.full(dims, float(_val(s))), {"dims": dims})


def reshape(a: Var, dims: Dims) -> Var:
    dims = tuple(int(d) for d in dims)
    if int(np.prod(dims, dtype=np.int64)) != _val(a).size:
        raise ShapeError(f"'reshape' cannot map {a.dims} onto {dims}.")
    return a.tape.record("reshape", [a], _val(a).reshape(dims).copy(), {"dims": dims, "from": a.dims})


def concat(parts: Sequence[Var]) -> Var:
    """Concatenates 1-d Vars."""
    if not parts:
        raise ShapeError("'concat' needs at least one part.")
    for p in parts:
        if len(p.dims) != 1:
            raise ShapeError(f"'concat' needs 1-d parts, got dims {p.dims}.")
    sizes = [p.dims[0] for p in parts]
    return parts[0].tape.record("concat", list(parts), np.concatenate([_val(p) for p in parts]), {"sizes": sizes})


def slice_vec(a: Var, start: int, stop: int) -> Var:
    if len(a.dims) != 1 or not 0 <= start <= stop <= a.dims[0]:
        raise ShapeError(f"'slice_vec' range [{start}, {stop}) invalid for dims {a.dims}.")
    return a.tape.record("slice_vec", [a], _val(a)[start:stop].copy(), {"start": start, "stop": stop, "total": a.dims[0]})


def pad_vec(a: Var, start: int, total: int) -> Var:
    if len(a.dims) != 1 or start < 0 or start + a.dims[0] > total:
        raise ShapeError(f"'pad_vec' cannot place dims {a.dims} at {start} inside {total}.")
    out = np.zeros(total)
    out[start : start + a.dims[0]] = _val(a)
    return a.tape.record("pad_vec", [a], out, {"start": start, "total": total})


# --- Losses ---

def mse_loss(pred: Var, target: Any) -> Var:
    """Mean over all elements of the squared difference."""
    target = np.asarray(target, dtype=np.float64)
    if pred.dims != target.shape:
        raise ShapeError(f"'mse_loss' needs equal dims, got {pred.dims} and {target.shape}.")
    return reduce_mean(square(sub(pred, constant(pred.tape, target))))


def softmax_cross_entropy(logits: Var, labels: Any) -> Var:
    """
    Mean over rows of -log softmax(logits)[true class].

    The row maximum is subtracted as a constant before exponentiating; the
    loss is shift-invariant per row, so gradients are unaffected.
    """
    labels = np.asarray(labels, dtype=np.float64)
    if len(logits.dims) != 2 or labels.shape != logits.dims:
        raise ShapeError(f"'softmax_cross_entropy' needs [n×c] logits and labels, got {logits.dims} and {labels.shape}.")
    if not (np.all((labels == 0.0) | (labels == 1.0)) and np.all(labels.sum(axis=1) == 1.0)):
        raise AutodiffError("Every label row must be one-hot.")
    tape = logits.tape
    n, c = logits.dims
    row_max = np.broadcast_to(_val(logits).max(axis=1, keepdims=True), (n, c)).copy()
    z = sub(logits, constant(tape, row_max))
    log_sum_exp = log(matmul(exp(z), constant(tape, np.ones((c, 1)))))
    picked = reduce_sum(mul(constant(tape, labels), z))
    return scale(sub(reduce_sum(log_sum_exp), picked), 1.0 / n)


# --- Backends for the vector-Jacobian rules ---

class _NumpyOps:
    """Evaluates VJP rules on plain arrays."""

    const = staticmethod(lambda arr: arr)
    add = staticmethod(np.add)
    sub = staticmethod(np.subtract)
    mul = staticmethod(np.multiply)
    neg = staticmethod(np.negative)
    square = staticmethod(np.square)
    sin = staticmethod(np.sin)
    cos = staticmethod(np.cos)
    matmul = staticmethod(np.matmul)
    scale = staticmethod(lambda x, c: x * c)
    shift = staticmethod(lambda x, c: x + c)
    reciprocal = staticmethod(lambda x: 1.0 / x)
    transpose = staticmethod(lambda x: np.ascontiguousarray(x.T))
    add_bias_row = staticmethod(lambda x, b: x + b)
    sum_rows = staticmethod(lambda x: x.sum(axis=0))
    sum = staticmethod(lambda x: np.array(x.sum()))
    fill = staticmethod(lambda s, dims: np.full(dims, float(s)))
    reshape = staticmethod(lambda x, dims: x.reshape(dims).copy())
    slice_vec = staticmethod(lambda x, start, stop: x[start:stop].copy())

    @staticmethod
    def pad_vec(x, start, total):
        out = np.zeros(total)
        out[start : start + x.shape[0]] = x
        return out


class _VarOps:
    """Evaluates VJP rules by recording new nodes on a tape (create_graph)."""

    def __init__(self, tape: Tape):
        self.tape = tape

    def const(self, arr):
        return constant(self.tape, arr)

    add = staticmethod(add)
    sub = staticmethod(sub)
    mul = staticmethod(mul)
    neg = staticmethod(neg)
    square = staticmethod(square)
    sin = staticmethod(sin)
    cos = staticmethod(cos)
    matmul = staticmethod(matmul)
    scale = staticmethod(scale)
    shift = staticmethod(shift)
    reciprocal = staticmethod(reciprocal)
    transpose = staticmethod(transpose)
    add_bias_row = staticmethod(add_bias_row)
    sum_rows = staticmethod(sum_rows)
    sum = staticmethod(reduce_sum)
    fill = staticmethod(fill)
    reshape = staticmethod(reshape)
    slice_vec = staticmethod(slice_vec)
    pad_vec = staticmethod(pad_vec)


# Each rule takes (F, g, xs, out, vals, payload) and returns one thunk per
# input; thunks are only evaluated for inputs that require a gradient.
VjpRule = Callable[..., tuple[Callable[[], Any], ...]]


def _concat_rule(F, g, xs, out, vals, p):
    offsets = np.cumsum([0] + p["sizes"])
    return tuple((lambda s=int(offsets[i]), e=int(offsets[i + 1]): F.slice_vec(g, s, e)) for i in range(len(xs)))


VJP_RULES: dict[str, VjpRule] = {
    "add": lambda F, g, xs, out, vals, p: (lambda: g, lambda: g),
    "sub": lambda F, g, xs, out, vals, p: (lambda: g, lambda: F.neg(g)),
    "mul": lambda F, g, xs, out, vals, p: (lambda: F.mul(g, xs[1]), lambda: F.mul(g, xs[0])),
    "neg": lambda F, g, xs, out, vals, p: (lambda: F.neg(g),),
    "scale": lambda F, g, xs, out, vals, p: (lambda: F.scale(g, p["c"]),),
    "shift": lambda F, g, xs, out, vals, p: (lambda: g,),
    "square": lambda F, g, xs, out, vals, p: (lambda: F.scale(F.mul(g, xs[0]), 2.0),),
    "exp": lambda F, g, xs, out, vals, p: (lambda: F.mul(g, out),),
    "log": lambda F, g, xs, out, vals, p: (lambda: F.mul(g, F.reciprocal(xs[0])),),
    "reciprocal": lambda F, g, xs, out, vals, p: (lambda: F.neg(F.mul(g, F.square(out))),),
    # Subgradient at exactly 0 is 0.
    "relu": lambda F, g, xs, out, vals, p: (lambda: F.mul(g, F.const((vals[0] > 0.0).astype(np.float64))),),
    "tanh": lambda F, g, xs, out, vals, p: (lambda: F.mul(g, F.shift(F.neg(F.square(out)), 1.0)),),
    "sigmoid": lambda F, g, xs, out, vals, p: (lambda: F.mul(g, F.mul(out, F.shift(F.neg(out), 1.0))),),
    "sin": lambda F, g, xs, out, vals, p: (lambda: F.mul(g, F.cos(xs[0])),),
    "cos": lambda F, g, xs, out, vals, p: (lambda: F.neg(F.mul(g, F.sin(xs[0]))),),
    "matmul": lambda F, g, xs, out, vals, p: (
        lambda: F.matmul(g, F.transpose(xs[1])),
        lambda: F.matmul(F.transpose(xs[0]), g),
    ),
    "transpose": lambda F, g, xs, out, vals, p: (lambda: F.transpose(g),),
    "add_bias_row": lambda F, g, xs, out, vals, p: (lambda: g, lambda: F.sum_rows(g)),
    "sum_rows": lambda F, g, xs, out, vals, p: (lambda: F.add_bias_row(F.const(np.zeros(vals[0].shape)), g),),
    "sum": lambda F, g, xs, out, vals, p: (lambda: F.fill(g, vals[0].shape),),
    "mean": lambda F, g, xs, out, vals, p: (lambda: F.fill(F.scale(g, 1.0 / p["n"]), vals[0].shape),),
    "fill": lambda F, g, xs, out, vals, p: (lambda: F.sum(g),),
    "reshape": lambda F, g, xs, out, vals, p: (lambda: F.reshape(g, p["from"]),),
    "concat": _concat_rule,
    "slice_vec": lambda F, g, xs, out, vals, p: (lambda: F.pad_vec(g, p["start"], p["total"]),),
    "pad_vec": lambda F, g, xs, out, vals, p: (lambda: F.slice_vec(g, p["start"], p["start"] + vals[0].shape[0]),),
}


def _backward(output: Var, inputs: Sequence[Var], create_graph: bool) -> list[Any]:
    tape = output.tape
    if output.dims != ():
        raise AutodiffError(f"grad needs a scalar output, got dims {output.dims}.")
    for v in inputs:
        if v.tape is not tape:
            raise AutodiffError("grad input belongs to a different tape.")

    F: Any = _VarOps(tape) if create_graph else _NumpyOps
    wanted = {v.id for v in inputs}
    found: dict[int, Any] = {}
    cotangents: dict[int, Any] = {output.id: F.const(np.ones(()))}

    for node_id in range(output.id, -1, -1):
        g = cotangents.pop(node_id, None)
        if g is None:
            continue
        if node_id in wanted:
            found[node_id] = g
        node = tape.nodes[node_id]
        if not node.inputs or not node.requires_grad:
            continue
        vals = [tape.nodes[i].value for i in node.inputs]
        if create_graph:
            xs = [Var(tape, i, tape.nodes[i].value.shape) for i in node.inputs]
            out = Var(tape, node_id, node.value.shape)
        else:
            xs, out = vals, node.value
        thunks = VJP_RULES[node.op](F, g, xs, out, vals, node.payload)
        for input_id, thunk in zip(node.inputs, thunks):
            if not tape.nodes[input_id].requires_grad:
                continue
            contribution = thunk()
            if input_id in cotangents:
                cotangents[input_id] = F.add(cotangents[input_id], contribution)
            else:
                cotangents[input_id] = contribution

    results = []
    for v in inputs:
        if v.id in found and tape.nodes[v.id].requires_grad:
            # Plain-mode cotangents may be shared between inputs of an add.
            results.append(found[v.id] if create_graph else np.array(found[v.id], dtype=np.float64))
        else:
            results.append(F.const(np.zeros(v.dims)))
    return results


def grad(output: Var, inputs: Sequence[Var], create_graph: bool = False) -> list[Var]:
    """
    Returns d(output)/d(input) for each input as Vars on the same tape.

    With create_graph the returned Vars are differentiable nodes; otherwise they
    are constant leaves. Inputs not reachable from `output` (or that do not
    require a gradient) receive zeros of matching dims.

    Raises:
        AutodiffError: If `output` is not a scalar or an input lives on another tape.
    """
    results = _backward(output, inputs, create_graph)
    if create_graph:
        return results
    return [constant(output.tape, r) for r in results]


def grad_values(output: Var, inputs: Sequence[Var]) -> list[np.ndarray]:
    """First-order gradients as plain arrays; leaves the tape untouched."""
    return _backward(output, inputs, create_graph=False)

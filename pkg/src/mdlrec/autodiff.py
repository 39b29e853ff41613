"""Dense float64 tensors recorded on a reverse-mode differentiation tape.

Every primitive stores what its backward rule needs at forward time; ``backward``
then walks the tape once, newest entry first.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np


class ShapeError(ValueError):
    pass


class Tensor:
    """A value living on a tape. Arithmetic goes through ``Tape.apply``."""

    __slots__ = ("value", "tape", "id", "name")

    def __init__(self, value: np.ndarray, tape: "Tape", node_id: int, name: str | None = None):
        self.value = value
        self.tape = tape
        self.id = node_id
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(id={self.id}{label}, shape={self.shape})"


@dataclass
class Entry:
    kind: str
    inputs: tuple[int, ...]
    output: int
    saved: dict[str, Any] = field(default_factory=dict)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


# Each primitive: forward(values, **attrs) -> (out, saved); backward(g, values, out, saved) -> grads.
# A backward may return None for an input that takes no gradient (e.g. gather ids).


def _matmul_fwd(vals, **_):
    a, b = vals
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    try:
        out = np.matmul(a, b)
    except ValueError as exc:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}") from exc
    return out, {}


def _matmul_bwd(g, vals, out, saved):
    a, b = vals
    return [_unbroadcast(g @ _swap(b), a.shape), _unbroadcast(_swap(a) @ g, b.shape)]


def _broadcast_check(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from exc


def _add_fwd(vals, **_):
    a, b = vals
    _broadcast_check("add", a, b)
    return a + b, {}


def _add_bwd(g, vals, out, saved):
    return [_unbroadcast(g, vals[0].shape), _unbroadcast(g, vals[1].shape)]


def _mul_fwd(vals, **_):
    a, b = vals
    _broadcast_check("mul", a, b)
    return a * b, {}


def _mul_bwd(g, vals, out, saved):
    a, b = vals
    return [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]


def _relu_fwd(vals, **_):
    (x,) = vals
    return np.maximum(x, 0.0), {}


def _relu_bwd(g, vals, out, saved):
    # derivative at exactly 0 is 0
    return [np.where(vals[0] > 0.0, g, 0.0)]


def _sigmoid_fwd(vals, **_):
    (x,) = vals
    ex = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))
    return out, {}


def _sigmoid_bwd(g, vals, out, saved):
    return [g * out * (1.0 - out)]


def _softmax_fwd(vals, **_):
    (x,) = vals
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True), {}


def _softmax_bwd(g, vals, out, saved):
    return [out * (g - (g * out).sum(axis=-1, keepdims=True))]


LN_EPS = 1e-6


def _layernorm_fwd(vals, **_):
    (x,) = vals
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    return xc * inv, {"inv": inv}


def _layernorm_bwd(g, vals, out, saved):
    inv = saved["inv"]
    gm = g.mean(axis=-1, keepdims=True)
    gy = (g * out).mean(axis=-1, keepdims=True)
    return [inv * (g - gm - out * gy)]


def _concat_fwd(vals, **_):
    lead = {v.shape[:-1] for v in vals}
    if len(lead) != 1:
        raise ShapeError(f"concat: leading shapes differ: {[v.shape for v in vals]}")
    return np.concatenate(vals, axis=-1), {}


def _concat_bwd(g, vals, out, saved):
    splits = np.cumsum([v.shape[-1] for v in vals])[:-1]
    return np.split(g, splits, axis=-1)


def _select_mean_fwd(vals, **_):
    # x: (B, T, d), mask: (B, T) of 0/1; mean over the selected rows of each instance
    x, mask = vals
    if x.ndim != 3 or mask.shape != x.shape[:2]:
        raise ShapeError(f"select_mean: rows {x.shape} vs mask {mask.shape}")
    count = mask.sum(axis=1, keepdims=True)
    if np.any(count == 0):
        raise ValueError("select_mean: an instance selects no rows")
    w = mask / count
    return (mask[:, :, None] * x).sum(axis=1) / count, {"w": w}


def _select_mean_bwd(g, vals, out, saved):
    w = saved["w"]
    return [w[:, :, None] * g[:, None, :], None]


def _gather_fwd(vals, **_):
    table, ids = vals
    if table.ndim != 2:
        raise ShapeError(f"gather: table must be 2-D, got {table.shape}")
    return table[ids.astype(np.int64)], {}


def _gather_bwd(g, vals, out, saved):
    table, ids = vals
    grad = np.zeros_like(table)
    np.add.at(grad, ids.astype(np.int64), g)
    return [grad, None]


def _sum_fwd(vals, **_):
    return np.asarray(vals[0].sum()), {}


def _sum_bwd(g, vals, out, saved):
    return [np.full(vals[0].shape, g, dtype=np.float64)]


def _scale_fwd(vals, *, factor: float, **_):
    return vals[0] * factor, {"factor": factor}


def _scale_bwd(g, vals, out, saved):
    return [g * saved["factor"]]


def _reshape_fwd(vals, *, shape, **_):
    (x,) = vals
    try:
        return x.reshape(shape), {}
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from exc


def _reshape_bwd(g, vals, out, saved):
    return [g.reshape(vals[0].shape)]


def _transpose_fwd(vals, *, axes, **_):
    (x,) = vals
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {tuple(axes)} invalid for shape {x.shape}")
    return np.ascontiguousarray(np.transpose(x, axes)), {"axes": tuple(axes)}


def _transpose_bwd(g, vals, out, saved):
    return [np.transpose(g, np.argsort(saved["axes"]))]


def _clip_fwd(vals, *, lo: float, hi: float, **_):
    return np.clip(vals[0], lo, hi), {"lo": lo, "hi": hi}


def _clip_bwd(g, vals, out, saved):
    x = vals[0]
    return [np.where((x >= saved["lo"]) & (x <= saved["hi"]), g, 0.0)]


def _log_fwd(vals, **_):
    return np.log(vals[0]), {}


def _log_bwd(g, vals, out, saved):
    return [g / vals[0]]


PRIMITIVES: dict[str, tuple[Callable, Callable]] = {
    "matmul": (_matmul_fwd, _matmul_bwd),
    "add": (_add_fwd, _add_bwd),
    "mul": (_mul_fwd, _mul_bwd),
    "relu": (_relu_fwd, _relu_bwd),
    "sigmoid": (_sigmoid_fwd, _sigmoid_bwd),
    "softmax": (_softmax_fwd, _softmax_bwd),
    "layernorm": (_layernorm_fwd, _layernorm_bwd),
    "concat": (_concat_fwd, _concat_bwd),
    "select_mean": (_select_mean_fwd, _select_mean_bwd),
    "gather": (_gather_fwd, _gather_bwd),
    "sum": (_sum_fwd, _sum_bwd),
    "scale": (_scale_fwd, _scale_bwd),
    "reshape": (_reshape_fwd, _reshape_bwd),
    "transpose": (_transpose_fwd, _transpose_bwd),
    "clip": (_clip_fwd, _clip_bwd),
    "log": (_log_fwd, _log_bwd),
}


class Tape:
    """Ordered record of primitive applications plus the leaves they read."""

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.entries: list[Entry] = []
        self.leaf_names: dict[int, str] = {}
        self.leaf_ids: list[int] = []
        self.trainable: set[int] = set()
        self.visits: list[int] = []

    def _new(self, value: np.ndarray, name: str | None = None) -> Tensor:
        node_id = len(self.values)
        self.values.append(value)
        return Tensor(value, self, node_id, name)

    def param(self, name: str, value: np.ndarray) -> Tensor:
        t = self._new(np.asarray(value, dtype=np.float64), name)
        self.leaf_names[t.id] = name
        self.leaf_ids.append(t.id)
        self.trainable.add(t.id)
        return t

    def variable(self, value) -> Tensor:
        """Anonymous differentiable leaf; its gradient is keyed by node id."""
        t = self._new(np.asarray(value, dtype=np.float64))
        self.leaf_ids.append(t.id)
        self.trainable.add(t.id)
        return t

    def constant(self, value, dtype=np.float64) -> Tensor:
        return self._new(np.asarray(value, dtype=dtype))

    def apply(self, kind: str, inputs: list[Tensor], **attrs) -> Tensor:
        return apply_primitive(kind, inputs, self, **attrs)

    def __len__(self) -> int:
        return len(self.values)


def apply_primitive(kind: str, inputs: list[Tensor], tape: Tape, **attrs) -> Tensor:
    if kind not in PRIMITIVES:
        raise KeyError(f"unknown primitive {kind!r}")
    for t in inputs:
        if t.tape is not tape:
            raise ValueError(f"{kind}: input {t!r} belongs to another tape")
    fwd, _ = PRIMITIVES[kind]
    out, saved = fwd([t.value for t in inputs], **attrs)
    node = tape._new(out)
    tape.entries.append(Entry(kind, tuple(t.id for t in inputs), node.id, saved))
    return node


def backward(tape: Tape, loss: Tensor) -> dict[str | int, np.ndarray]:
    """Gradients of a scalar ``loss`` for every differentiable leaf on ``tape``.

    Parameters are keyed by name, anonymous variables by node id. Leaves the
    loss does not reach get exact zeros.
    """
    if loss.tape is not tape:
        raise ValueError("loss belongs to another tape")
    if loss.value.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
    tape.visits = []
    for entry in reversed(tape.entries):
        tape.visits.append(entry.output)
        g = grads.pop(entry.output, None)
        if g is None:
            continue
        _, bwd = PRIMITIVES[entry.kind]
        in_vals = [tape.values[i] for i in entry.inputs]
        for i, gi in zip(entry.inputs, bwd(g, in_vals, tape.values[entry.output], entry.saved)):
            if gi is None:
                continue
            if i in grads:
                grads[i] = grads[i] + gi
            else:
                grads[i] = gi
    out: dict[str | int, np.ndarray] = {}
    for i in tape.leaf_ids:
        g = grads.get(i)
        if g is None:
            g = np.zeros_like(tape.values[i])
        out[tape.leaf_names.get(i, i)] = g
    return out


# thin functional wrappers

def matmul(a: Tensor, b: Tensor) -> Tensor:
    return a.tape.apply("matmul", [a, b])


def add(a: Tensor, b: Tensor) -> Tensor:
    return a.tape.apply("add", [a, b])


def mul(a: Tensor, b: Tensor) -> Tensor:
    return a.tape.apply("mul", [a, b])


def relu(x: Tensor) -> Tensor:
    return x.tape.apply("relu", [x])


def sigmoid(x: Tensor) -> Tensor:
    return x.tape.apply("sigmoid", [x])


def softmax(x: Tensor) -> Tensor:
    return x.tape.apply("softmax", [x])


def layernorm(x: Tensor) -> Tensor:
    return x.tape.apply("layernorm", [x])


def concat(xs: list[Tensor]) -> Tensor:
    if len(xs) == 1:
        return xs[0]
    return xs[0].tape.apply("concat", list(xs))


def select_mean(x: Tensor, mask: Tensor) -> Tensor:
    return x.tape.apply("select_mean", [x, mask])


def gather(table: Tensor, ids: Tensor) -> Tensor:
    return table.tape.apply("gather", [table, ids])


def total(x: Tensor) -> Tensor:
    return x.tape.apply("sum", [x])


def scale(x: Tensor, factor: float) -> Tensor:
    return x.tape.apply("scale", [x], factor=float(factor))


def reshape(x: Tensor, shape) -> Tensor:
    return x.tape.apply("reshape", [x], shape=tuple(shape))


def transpose(x: Tensor, axes) -> Tensor:
    return x.tape.apply("transpose", [x], axes=tuple(axes))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    return x.tape.apply("clip", [x], lo=lo, hi=hi)


def log(x: Tensor) -> Tensor:
    return x.tape.apply("log", [x])


def pertoken_linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Apply a distinct affine map to each token: x (B, T, i), w (T, i, o), b (T, o)."""
    if x.value.ndim != 3 or w.value.ndim != 3 or x.shape[1:] != w.shape[:2]:
        raise ShapeError(f"pertoken_linear: input {x.shape} vs weight {w.shape}")
    y = transpose(matmul(transpose(x, (1, 0, 2)), w), (1, 0, 2))
    if b is not None:
        y = add(y, b)
    return y

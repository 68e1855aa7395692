"""Reverse-mode automatic differentiation over float64 numpy buffers.

A Tape records primitive operations as they execute; backward() replays
it in reverse, accumulating gradients into every reachable parameter
tensor. The primitive set is exactly what the model needs: dense linear
algebra, pointwise nonlinearities, reductions, cosine similarities and
the fixed-index gather/scatter pair through which sparse adjacency
enters the differentiable region.

Sugar: Tensor supports +, -, *, /, @ and scalar mixing, all routed
through apply() so everything lands on the active tape.
"""

from __future__ import annotations

import threading
from typing import Callable

import numpy as np

from .errors import DimensionError, DomainError

_LOCAL = threading.local()


def _tape_stack() -> list:
    if not hasattr(_LOCAL, "stack"):
        _LOCAL.stack = []
    return _LOCAL.stack


class Tensor:
    """A dense float64 array plus grad metadata. Values are never mutated
    by ops; optimizers update leaf tensors in place between tapes."""

    __slots__ = ("values", "requires_grad", "grad")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------
    def _coerce(self, other):
        return other if isinstance(other, Tensor) else None

    def __add__(self, other):
        o = self._coerce(other)
        if o is None:
            return apply("scalar_add", [self], {"c": float(other)})
        return apply("add", [self, o])

    __radd__ = __add__

    def __sub__(self, other):
        o = self._coerce(other)
        if o is None:
            return apply("scalar_add", [self], {"c": -float(other)})
        return apply("sub", [self, o])

    def __rsub__(self, other):
        # other - self with other a plain number
        return apply("scalar_add", [apply("scalar_mul", [self], {"c": -1.0})],
                     {"c": float(other)})

    def __mul__(self, other):
        o = self._coerce(other)
        if o is None:
            return apply("scalar_mul", [self], {"c": float(other)})
        return apply("mul", [self, o])

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = self._coerce(other)
        if o is None:
            return apply("scalar_mul", [self], {"c": 1.0 / float(other)})
        return apply("div", [self, o])

    def __matmul__(self, other):
        return apply("matmul", [self, other])

    def __neg__(self):
        return apply("scalar_mul", [self], {"c": -1.0})


class Tape:
    """Ordered record of executed primitives; use as a context manager."""

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._produced: set[int] = set()

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], bwd: Callable):
        self._nodes.append((out, inputs, bwd))
        self._produced.add(id(out))


def _active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


def _check_norms(norms: np.ndarray, what: str):
    if np.any(norms < 1e-30):
        raise DomainError(f"zero-norm vector in {what}")


# ---------------------------------------------------------------------------
# Primitive registry: name -> (forward, backward)
# forward(values, attrs) -> ndarray
# backward(g, values, out, attrs) -> list of per-input gradients (or None)
# ---------------------------------------------------------------------------

def _fw_matmul(v, attrs):
    a, b = v
    if a.ndim > 2 or b.ndim > 2 or a.ndim == 0 or b.ndim == 0:
        raise DimensionError("matmul supports 1-D/2-D operands only")
    try:
        return a @ b
    except ValueError as exc:
        raise DimensionError(f"matmul shape mismatch {a.shape} @ {b.shape}") from exc


def _bw_matmul(g, v, out, attrs):
    a, b = v
    if a.ndim == 2 and b.ndim == 2:
        return [g @ b.T, a.T @ g]
    if a.ndim == 2 and b.ndim == 1:
        return [np.outer(g, b), a.T @ g]
    if a.ndim == 1 and b.ndim == 2:
        return [g @ b.T, np.outer(a, g)]
    # 1-D @ 1-D -> scalar
    return [g * b, g * a]


def _softmax(x, axis):
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _fw_lse(v, attrs):
    (a,) = v
    m = a.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=-1, keepdims=True))).reshape(a.shape[:-1])


def _bw_lse(g, v, out, attrs):
    (a,) = v
    soft = _softmax(a, axis=-1)
    return [np.expand_dims(np.asarray(g), -1) * soft]


def _cosine_shapes(a, b):
    """Broadcast rule: a [d] with b [k,d] (either order) or equal shapes."""
    if a.shape == b.shape:
        return a.reshape(-1, a.shape[-1]) if a.ndim > 1 else a[None, :], \
            b.reshape(-1, b.shape[-1]) if b.ndim > 1 else b[None, :]
    if a.ndim == 1 and b.ndim == 2 and a.shape[0] == b.shape[1]:
        return np.broadcast_to(a, b.shape), b
    if b.ndim == 1 and a.ndim == 2 and b.shape[0] == a.shape[1]:
        return a, np.broadcast_to(b, a.shape)
    raise DimensionError(f"cosine shapes incompatible: {a.shape} vs {b.shape}")


def _fw_cosine(v, attrs):
    a, b = v
    aa, bb = _cosine_shapes(a, b)
    na = np.linalg.norm(aa, axis=-1)
    nb = np.linalg.norm(bb, axis=-1)
    _check_norms(na, "cosine")
    _check_norms(nb, "cosine")
    sims = np.einsum("ij,ij->i", aa, bb) / (na * nb)
    if a.ndim == 1 and b.ndim == 1:
        return np.asarray(sims[0])
    return sims


def _bw_cosine(g, v, out, attrs):
    a, b = v
    aa, bb = _cosine_shapes(a, b)
    na = np.linalg.norm(aa, axis=-1, keepdims=True)
    nb = np.linalg.norm(bb, axis=-1, keepdims=True)
    s = (np.einsum("ij,ij->i", aa, bb) / (na[:, 0] * nb[:, 0]))[:, None]
    gg = np.asarray(g).reshape(-1, 1)
    ga = gg * (bb / (na * nb) - s * aa / na**2)
    gb = gg * (aa / (na * nb) - s * bb / nb**2)
    return [_unbroadcast(ga.reshape(np.broadcast_shapes(a.shape, bb.shape)), a.shape)
            if a.ndim == 1 and b.ndim == 2 else ga.reshape(a.shape),
            _unbroadcast(gb.reshape(np.broadcast_shapes(b.shape, aa.shape)), b.shape)
            if b.ndim == 1 and a.ndim == 2 else gb.reshape(b.shape)]


def _fw_gather(v, attrs):
    (a,) = v
    return a[np.asarray(attrs["idx"], dtype=np.int64)]


def _bw_gather(g, v, out, attrs):
    (a,) = v
    grad = np.zeros_like(a)
    np.add.at(grad, np.asarray(attrs["idx"], dtype=np.int64), g)
    return [grad]


def _fw_scatter(v, attrs):
    (a,) = v
    idx = np.asarray(attrs["idx"], dtype=np.int64)
    if idx.shape[0] != a.shape[0]:
        raise DimensionError("scatter index length must match first axis")
    out = np.zeros((attrs["num_rows"],) + a.shape[1:])
    np.add.at(out, idx, a)
    return out


def _bw_scatter(g, v, out, attrs):
    return [g[np.asarray(attrs["idx"], dtype=np.int64)]]


def _fw_concat(v, attrs):
    return np.concatenate([x for x in v], axis=attrs.get("axis", 0))


def _bw_concat(g, v, out, attrs):
    axis = attrs.get("axis", 0)
    sizes = np.cumsum([x.shape[axis] for x in v])[:-1]
    return list(np.split(g, sizes, axis=axis))


def _fw_l2norm_rows(v, attrs):
    (a,) = v
    if a.ndim == 1:
        n = np.linalg.norm(a)
        _check_norms(np.asarray([n]), "l2norm")
        return np.asarray(n)
    n = np.linalg.norm(a, axis=-1, keepdims=True)
    _check_norms(n.ravel(), "l2norm")
    return n


def _bw_l2norm_rows(g, v, out, attrs):
    (a,) = v
    if a.ndim == 1:
        return [np.asarray(g) * a / np.linalg.norm(a)]
    return [np.asarray(g) * a / out]


def _fw_log(v, attrs):
    (a,) = v
    if np.any(a <= 0):
        raise DomainError("log of non-positive value")
    return np.log(a)


def _fw_div(v, attrs):
    a, b = v
    if np.any(b == 0):
        raise DomainError("division by zero")
    return a / b


_OPS: dict[str, tuple[Callable, Callable]] = {
    "add": (
        lambda v, a: v[0] + v[1],
        lambda g, v, o, a: [_unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)],
    ),
    "sub": (
        lambda v, a: v[0] - v[1],
        lambda g, v, o, a: [_unbroadcast(g, v[0].shape), _unbroadcast(-g, v[1].shape)],
    ),
    "mul": (
        lambda v, a: v[0] * v[1],
        lambda g, v, o, a: [_unbroadcast(g * v[1], v[0].shape),
                            _unbroadcast(g * v[0], v[1].shape)],
    ),
    "div": (
        _fw_div,
        lambda g, v, o, a: [_unbroadcast(g / v[1], v[0].shape),
                            _unbroadcast(-g * v[0] / v[1]**2, v[1].shape)],
    ),
    "scalar_mul": (
        lambda v, a: v[0] * a["c"],
        lambda g, v, o, a: [g * a["c"]],
    ),
    "scalar_add": (
        lambda v, a: v[0] + a["c"],
        lambda g, v, o, a: [np.asarray(g, dtype=np.float64).copy()],
    ),
    "matmul": (_fw_matmul, _bw_matmul),
    "tanh": (
        lambda v, a: np.tanh(v[0]),
        lambda g, v, o, a: [g * (1.0 - o**2)],
    ),
    "exp": (
        lambda v, a: np.exp(v[0]),
        lambda g, v, o, a: [g * o],
    ),
    "log": (
        _fw_log,
        lambda g, v, o, a: [g / v[0]],
    ),
    "square": (
        lambda v, a: v[0]**2,
        lambda g, v, o, a: [2.0 * g * v[0]],
    ),
    # kinks use the right-hand subgradient: derivative 1 at exactly 0
    "relu": (
        lambda v, a: np.maximum(v[0], 0.0),
        lambda g, v, o, a: [g * (v[0] >= 0.0)],
    ),
    "leaky_relu": (
        lambda v, a: np.where(v[0] >= 0.0, v[0], a.get("slope", 0.2) * v[0]),
        lambda g, v, o, a: [g * np.where(v[0] >= 0.0, 1.0, a.get("slope", 0.2))],
    ),
    "elu": (
        lambda v, a: np.where(v[0] >= 0.0, v[0],
                              a.get("alpha", 1.0) * (np.exp(v[0]) - 1.0)),
        lambda g, v, o, a: [g * np.where(v[0] >= 0.0, 1.0,
                                         a.get("alpha", 1.0) * np.exp(v[0]))],
    ),
    "softmax_rows": (
        lambda v, a: _softmax(v[0], axis=-1),
        lambda g, v, o, a: [o * (g - (g * o).sum(axis=-1, keepdims=True))],
    ),
    "log_sum_exp": (_fw_lse, _bw_lse),
    "sum": (
        lambda v, a: np.asarray(v[0].sum()),
        lambda g, v, o, a: [np.broadcast_to(np.asarray(g), v[0].shape).copy()],
    ),
    "mean": (
        lambda v, a: np.asarray(v[0].mean()),
        lambda g, v, o, a: [np.broadcast_to(np.asarray(g) / v[0].size,
                                            v[0].shape).copy()],
    ),
    "l2norm_rows": (_fw_l2norm_rows, _bw_l2norm_rows),
    "cosine": (_fw_cosine, _bw_cosine),
    "gather_rows": (_fw_gather, _bw_gather),
    "take_per_row": (
        lambda v, a: v[0][np.arange(v[0].shape[0]),
                          np.asarray(a["cols"], dtype=np.int64)],
        lambda g, v, o, a: [_bw_take_per_row(g, v[0], a)],
    ),
    "scatter_add_rows": (_fw_scatter, _bw_scatter),
    "concat": (_fw_concat, _bw_concat),
    "reshape": (
        lambda v, a: v[0].reshape(a["shape"]),
        lambda g, v, o, a: [np.asarray(g).reshape(v[0].shape)],
    ),
    "transpose": (
        lambda v, a: v[0].T,
        lambda g, v, o, a: [np.asarray(g).T],
    ),
}


def _bw_take_per_row(g, a0, attrs):
    grad = np.zeros_like(a0)
    rows = np.arange(a0.shape[0])
    np.add.at(grad, (rows, np.asarray(attrs["cols"], dtype=np.int64)), g)
    return grad


def op_kinds() -> list[str]:
    return sorted(_OPS)


def apply(op_kind: str, inputs: list[Tensor], attrs: dict | None = None) -> Tensor:
    """Execute one primitive, recording it on the active tape when any
    input requires grad."""
    if op_kind not in _OPS:
        raise ValueError(f"unknown primitive: {op_kind}")
    attrs = attrs or {}
    fwd, bwd = _OPS[op_kind]
    values = [t.values for t in inputs]
    out_values = fwd(values, attrs)
    if not np.all(np.isfinite(out_values)):
        raise DomainError(f"non-finite output from {op_kind}")
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_values, requires_grad=needs)
    tape = _active_tape()
    if needs and tape is not None:
        def node_backward(g, _values=values, _out=out_values, _attrs=attrs, _bwd=bwd):
            return _bwd(g, _values, _out, _attrs)
        tape.record(out, tuple(inputs), node_backward)
    return out


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) for every requires-grad leaf on the tape.

    Returns {leaf tensor: gradient array} and mirrors each gradient into
    the tensor's .grad field. Fan-out sums, as differentiation requires.
    """
    if loss.size != 1:
        raise ValueError("backward needs a scalar loss")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    tensors: dict[int, Tensor] = {id(loss): loss}
    for out, inputs, bwd in reversed(tape._nodes):
        g = grads.pop(id(out), None)
        tensors.pop(id(out), None)
        if g is None:
            continue
        in_grads = bwd(g)
        for t, ig in zip(inputs, in_grads):
            if not t.requires_grad or ig is None:
                continue
            if id(t) in grads:
                grads[id(t)] = grads[id(t)] + ig
            else:
                grads[id(t)] = np.asarray(ig, dtype=np.float64)
                tensors[id(t)] = t
    result = {}
    for tid, g in grads.items():
        t = tensors[tid]
        if id(t) not in tape._produced:  # leaves only
            t.grad = g
            result[t] = g
    return result


def grad_check(f: Callable[[Tensor], Tensor], point: Tensor, h: float = 1e-5) -> float:
    """Worst relative error between tape gradients and central differences.

    ``f`` must be a pure scalar-valued function of its tensor argument.
    Differences below 1e-8 in absolute value count as zero.
    """
    base = np.array(point.values, dtype=np.float64)
    p = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(p)
    if out.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    analytic = backward(tape, out).get(p)
    if analytic is None:
        analytic = np.zeros_like(base)

    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    for i in range(base.size):
        shift = np.zeros_like(base).reshape(-1)
        shift[i] = h
        plus = f(Tensor(base + shift.reshape(base.shape))).values
        minus = f(Tensor(base - shift.reshape(base.shape))).values
        if not (np.isfinite(plus) and np.isfinite(minus)):
            raise DomainError("non-finite value during finite differences")
        flat[i] = (float(plus) - float(minus)) / (2.0 * h)

    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.where(diff <= 1e-8, 0.0, diff / scale)
    return float(rel.max()) if rel.size else 0.0

"""Minimal dense-tensor reverse-mode differentiation on a per-step tape.

Every trainable path in the model is built from the primitives here:
linear maps, softmax, layer norm, activations, concatenation, pooling,
logs and elementwise arithmetic. All arrays are float64. A tape records
operations in append order; ``backward`` replays it in exact reverse.
One tape lives for one training step and is dropped afterwards.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

LOG_CLAMP = 1e-12
REL_ERR_FLOOR = 1e-8


class AutodiffError(Exception):
    pass


class ShapeMismatchError(AutodiffError):
    pass


class NonFiniteError(AutodiffError):
    pass


class NonScalarRootError(AutodiffError):
    pass


class DetachedGraphError(AutodiffError):
    pass


class NonDeterministicError(AutodiffError):
    pass


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor constructed from non-finite data")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


@dataclass
class _Node:
    out: Tensor
    backward_fn: object


@dataclass
class Tape:
    nodes: list = field(default_factory=list)

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.pop()
        return False


_tape_stack: list[Tape] = []


def active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


def _finite(arr, op: str):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op}: non-finite values in result")
    return arr


def _make(data, inputs, backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = _finite(np.asarray(data, dtype=np.float64), op)
    out.grad = None
    tape = active_tape()
    out.requires_grad = tape is not None and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        tape.nodes.append(_Node(out, backward_fn))
    return out


def _accum(t: Tensor, g):
    if t.requires_grad:
        if t.grad is None:
            t.grad = np.array(g, dtype=np.float64)
        else:
            t.grad += g


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    # supports equal shapes and a row-broadcast bias: [L, d] + [d]
    if a.shape != b.shape and not (a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]):
        raise ShapeMismatchError(f"add: incompatible shapes {a.shape} and {b.shape}")
    bias = a.shape != b.shape

    def bwd(g):
        _accum(a, g)
        _accum(b, g.sum(axis=0) if bias else g)

    return _make(a.data + b.data, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"sub: incompatible shapes {a.shape} and {b.shape}")

    def bwd(g):
        _accum(a, g)
        _accum(b, -g)

    return _make(a.data - b.data, (a, b), bwd, "sub")


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"hadamard: incompatible shapes {a.shape} and {b.shape}")

    def bwd(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), bwd, "hadamard")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bwd(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), bwd, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeMismatchError(f"transpose: expected 2-d, got {a.shape}")

    def bwd(g):
        _accum(a, g.T)

    return _make(a.data.T, (a,), bwd, "transpose")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g):
        _accum(a, g * c)

    return _make(a.data * c, (a,), bwd, "scale")


def addc(a: Tensor, c) -> Tensor:
    """Add a constant (non-differentiated) array or scalar."""
    c = np.asarray(c, dtype=np.float64)

    def bwd(g):
        _accum(a, g)

    return _make(a.data + c, (a,), bwd, "addc")


def maskc(a: Tensor, m) -> Tensor:
    """Multiply by a constant mask; the mask carries no gradient."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != a.shape:
        raise ShapeMismatchError(f"maskc: mask shape {m.shape} vs tensor {a.shape}")

    def bwd(g):
        _accum(a, g * m)

    return _make(a.data * m, (a,), bwd, "maskc")


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def exp(a: Tensor) -> Tensor:
    # overflow produces inf, which _make rejects with NonFiniteError
    with np.errstate(over="ignore"):
        out_data = np.exp(a.data)

    def bwd(g):
        _accum(a, g * out_data)

    return _make(out_data, (a,), bwd, "exp")


def log(a: Tensor) -> Tensor:
    """Natural log with the argument clamped at LOG_CLAMP (removes 0*log 0)."""
    clamped = np.maximum(a.data, LOG_CLAMP)

    def bwd(g):
        _accum(a, g / clamped)

    return _make(np.log(clamped), (a,), bwd, "log")


def powop(a: Tensor, p: float) -> Tensor:
    p = float(p)
    out_data = np.power(a.data, p)

    def bwd(g):
        _accum(a, g * p * np.power(a.data, p - 1.0))

    return _make(out_data, (a,), bwd, "pow")


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0.0

    def bwd(g):
        _accum(a, g * keep)

    return _make(np.where(keep, a.data, 0.0), (a,), bwd, "relu")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    # max-shift before exponentiation: standard overflow guard
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        _accum(a, (g - dot) * s)

    return _make(s, (a,), bwd, "softmax")


def sumop(a: Tensor, axis: int | None = None) -> Tensor:
    def bwd(g):
        if axis is None:
            _accum(a, np.full(a.shape, float(g)))
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    return _make(a.data.sum(axis=axis), (a,), bwd, "sum")


def meanop(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]

    def bwd(g):
        if axis is None:
            _accum(a, np.full(a.shape, float(g) / n))
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.shape) / n)

    return _make(a.data.mean(axis=axis), (a,), bwd, "mean")


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeMismatchError("concat: empty input list")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(p, g[tuple(idx)])

    return _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bwd, "concat")


def reshape(a: Tensor, shape) -> Tensor:
    def bwd(g):
        _accum(a, g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), bwd, "reshape")


def take_row(a: Tensor, i: int) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeMismatchError(f"take_row: expected 2-d, got {a.shape}")

    def bwd(g):
        full = np.zeros(a.shape)
        full[i] = g
        _accum(a, full)

    return _make(a.data[i].copy(), (a,), bwd, "take_row")


def take_column(a: Tensor, j: int) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeMismatchError(f"take_column: expected 2-d, got {a.shape}")

    def bwd(g):
        full = np.zeros(a.shape)
        full[:, j] = g
        _accum(a, full)

    return _make(a.data[:, j].copy(), (a,), bwd, "take_column")


def slice_cols(a: Tensor, lo: int, hi: int) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeMismatchError(f"slice_cols: expected 2-d, got {a.shape}")

    def bwd(g):
        full = np.zeros(a.shape)
        full[:, lo:hi] = g
        _accum(a, full)

    return _make(a.data[:, lo:hi].copy(), (a,), bwd, "slice_cols")


def pad_rows(a: Tensor, total: int) -> Tensor:
    """Append zero rows so the result has ``total`` rows."""
    if a.data.ndim != 2 or total < a.shape[0]:
        raise ShapeMismatchError(f"pad_rows: cannot pad {a.shape} to {total} rows")
    n = a.shape[0]

    def bwd(g):
        _accum(a, g[:n])

    out = np.zeros((total, a.shape[1]))
    out[:n] = a.data
    return _make(out, (a,), bwd, "pad_rows")


def scale_rows(a: Tensor, s: Tensor) -> Tensor:
    """Row-wise scaling: out[l] = a[l] * s[l] for a [L, d] and s [L]."""
    if a.data.ndim != 2 or s.data.ndim != 1 or a.shape[0] != s.shape[0]:
        raise ShapeMismatchError(f"scale_rows: incompatible shapes {a.shape} and {s.shape}")

    def bwd(g):
        _accum(a, g * s.data[:, None])
        _accum(s, (g * a.data).sum(axis=1))

    return _make(a.data * s.data[:, None], (a, s), bwd, "scale_rows")


def gather_rows(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeMismatchError(f"gather_rows: expected 2-d table, got {table.shape}")

    def bwd(g):
        full = np.zeros(table.shape)
        np.add.at(full, ids, g)
        _accum(table, full)

    return _make(table.data[ids], (table,), bwd, "gather_rows")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if x.data.ndim != 2 or gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise ShapeMismatchError(
            f"layer_norm: incompatible shapes {x.shape}, {gain.shape}, {bias.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def bwd(g):
        dxhat = g * gain.data
        _accum(x, inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                         - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)))
        _accum(gain, (g * xhat).sum(axis=0))
        _accum(bias, g.sum(axis=0))

    return _make(xhat * gain.data + bias.data, (x, gain, bias), bwd, "layer_norm")


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Composite: each row scaled to unit Euclidean norm."""
    sq = sumop(hadamard(x, x), axis=1)
    inv = powop(addc(sq, eps), -0.5)
    return scale_rows(x, inv)


def stack_rows(vectors: list[Tensor]) -> Tensor:
    """Composite: stack 1-d tensors of equal length into a matrix."""
    return concat([reshape(v, (1, v.data.size)) for v in vectors], axis=0)


_OP_TABLE = {
    "add": add,
    "sub": sub,
    "hadamard": hadamard,
    "matmul": matmul,
    "transpose": transpose,
    "exp": exp,
    "log": log,
    "relu": relu,
    "softmax": softmax,
    "sum": sumop,
    "mean": meanop,
    "concat": concat,
}


def forward_op(kind: str, inputs, **kwargs) -> Tensor:
    """Name-based dispatch over the primitive table."""
    if kind not in _OP_TABLE:
        raise AutodiffError(f"unknown operation kind {kind!r}")
    if kind == "concat":
        return _OP_TABLE[kind](list(inputs), **kwargs)
    return _OP_TABLE[kind](*inputs, **kwargs)


# ---------------------------------------------------------------------------
# backward pass and gradient checking


def backward(root: Tensor) -> None:
    if root.data.size != 1:
        raise NonScalarRootError(f"backward root must be scalar, got shape {root.shape}")
    tape = active_tape()
    if tape is None or not root.requires_grad:
        raise DetachedGraphError("no active tape recorded the graph producing root")
    root.grad = np.ones_like(root.data)
    for node in reversed(tape.nodes):
        if node.out.grad is not None:
            node.backward_fn(node.out.grad)


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), REL_ERR_FLOOR)


@dataclass
class CheckReport:
    max_rel_errors: dict
    tol: float

    @property
    def passed(self) -> bool:
        return all(e < self.tol for e in self.max_rel_errors.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_errors.values()) if self.max_rel_errors else 0.0


def grad_check(f, params: dict, step: float = 1e-6, tol: float = 1e-4) -> CheckReport:
    """Compare tape gradients of ``f()`` against central finite differences.

    ``f`` must be a deterministic closure over the tensors in ``params``
    returning a scalar Tensor; it is re-run under fresh tapes as needed.
    """
    if not (0.0 < step <= 1e-3):
        raise AutodiffError(f"grad_check: step {step} outside (0, 1e-3]")

    def run() -> float:
        out = f()
        if out.data.size != 1:
            raise NonScalarRootError("grad_check target must be scalar")
        return float(out.data.reshape(()))

    v1 = run()
    v2 = run()
    if v1 != v2:
        raise NonDeterministicError(f"two forward passes disagree: {v1} vs {v2}")

    for p in params.values():
        p.grad = None
    with Tape():
        out = f()
        backward(out)
        analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                    for name, p in params.items()}

    errors = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = run()
            flat[i] = orig - step
            lo = run()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * step)
            worst = max(worst, relative_error(analytic[name].reshape(-1)[i], numeric))
        errors[name] = worst
    return CheckReport(max_rel_errors=errors, tol=tol)

"""Reverse-mode differentiable computation core over dense 2-d matrices.

Tensors are float64 by default and always two-dimensional (scalars are
``[1, 1]``, row vectors ``[1, d]``). Every op validates operand shapes,
checks its output for non-finite values, and records a backward closure
when any input requires gradients. Backward walks the recorded nodes in
exact reverse topological order, so repeated runs with identical inputs
produce bit-identical gradients.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericError

Array = np.ndarray

# Double precision by default: gradient checks are the backbone of the test
# surface. Single precision is an opt-in for the training harness.
_ACTIVE_DTYPE: ContextVar[type] = ContextVar("mtdistill_dtype", default=np.float64)

_DTYPES = {"double": np.float64, "single": np.float32}


@contextmanager
def precision(name: str):
    """Run the enclosed graph construction in 'double' or 'single'."""
    if name not in _DTYPES:
        raise ContractError(f"unknown precision '{name}', expected double|single")
    token = _ACTIVE_DTYPE.set(_DTYPES[name])
    try:
        yield
    finally:
        _ACTIVE_DTYPE.reset(token)


def active_dtype() -> type:
    return _ACTIVE_DTYPE.get()


def _as_matrix(values, dtype=None) -> Array:
    arr = np.asarray(values, dtype=dtype or _ACTIVE_DTYPE.get())
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ContractError(f"tensors are 2-d matrices, got ndim={arr.ndim}")
    return arr


def _check_finite(values: Array, op: str) -> None:
    if not np.isfinite(values).all():
        raise NumericError(f"non-finite output of op '{op}'")


class Tensor:
    """A node in the computation graph holding a 2-d float64 matrix."""

    __slots__ = ("values", "requires_grad", "grad", "parents", "_backward", "name")

    def __init__(self, values, requires_grad=False, parents=(), backward=None, name=""):
        self.values = _as_matrix(values)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self.parents: tuple[Tensor, ...] = tuple(parents)
        self._backward: Callable[[Array], None] | None = backward
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.values[0, 0])

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy())

    def __repr__(self) -> str:
        tag = f" '{self.name}'" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"


def constant(values, name="") -> Tensor:
    return Tensor(values, requires_grad=False, name=name)


def parameter(values, name="") -> Tensor:
    return Tensor(values, requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _accumulate(t: Tensor, grad: Array) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.values)
    t.grad += grad


def _unbroadcast(grad: Array, shape: tuple[int, int]) -> Array:
    """Sum a broadcast gradient back down to the operand's shape."""
    if grad.shape == shape:
        return grad
    out = grad
    if shape[0] == 1 and out.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and out.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    if out.shape != shape:
        raise ContractError(f"cannot reduce grad {grad.shape} to operand {shape}")
    return out


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ContractError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


def _make(values: Array, op: str, parents: Sequence[Tensor],
          backward: Callable[[Array], None]) -> Tensor:
    _check_finite(values, op)
    if any(p.requires_grad for p in parents):
        return Tensor(values, requires_grad=True, parents=parents, backward=backward)
    return Tensor(values)


# ---------------------------------------------------------------------------
# Primitive ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")
    out = a.values + b.values

    def backward(g: Array) -> None:
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape))

    return _make(out, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    return add(a, scale(as_tensor(b), -1.0))


def mul(a, b) -> Tensor:
    """Elementwise (broadcasting) product; covers scalar multiply via [1,1]."""
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")
    out = a.values * b.values

    def backward(g: Array) -> None:
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.values, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.values, b.shape))

    return _make(out, "mul", (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    out = a.values * float(c)

    def backward(g: Array) -> None:
        if a.requires_grad:
            _accumulate(a, g * float(c))

    return _make(out, "scale", (a,), backward)


def divide(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "divide")
    with np.errstate(all="ignore"):
        out = a.values / b.values

    def backward(g: Array) -> None:
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.values, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * a.values / (b.values ** 2), b.shape))

    return _make(out, "divide", (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    out = a.values @ b.values

    def backward(g: Array) -> None:
        if a.requires_grad:
            _accumulate(a, g @ b.values.T)
        if b.requires_grad:
            _accumulate(b, a.values.T @ g)

    return _make(out, "matmul", (a, b), backward)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    out = a.values.T.copy()

    def backward(g: Array) -> None:
        if a.requires_grad:
            _accumulate(a, g.T)

    return _make(out, "transpose", (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(all="ignore"):
        out = np.exp(a.values)

    def backward(g: Array) -> None:
        if a.requires_grad:
            _accumulate(a, g * out)

    return _make(out, "exp", (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(all="ignore"):
        out = np.log(a.values)

    def backward(g: Array) -> None:
        if a.requires_grad:
            _accumulate(a, g / a.values)

    return _make(out, "log", (a,), backward)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.values)

    def backward(g: Array) -> None:
        if a.requires_grad:
            _accumulate(a, g * (1.0 - out * out))

    return _make(out, "tanh", (a,), backward)


def clamp_min(a, floor: float) -> Tensor:
    """max(a, floor); gradient passes only where a > floor."""
    a = as_tensor(a)
    mask = a.values > floor
    out = np.where(mask, a.values, floor)

    def backward(g: Array) -> None:
        if a.requires_grad:
            _accumulate(a, g * mask)

    return _make(out, "clamp_min", (a,), backward)


def row_softmax(a) -> Tensor:
    """Softmax along each row, stabilized by row-max subtraction."""
    a = as_tensor(a)
    shifted = a.values - a.values.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g: Array) -> None:
        if a.requires_grad:
            inner = (g * out).sum(axis=1, keepdims=True)
            _accumulate(a, out * (g - inner))

    return _make(out, "row_softmax", (a,), backward)


def l2_normalize_rows(a) -> Tensor:
    """Rescale each row to unit length; all-zero rows pass through unchanged
    with zero gradient (the gated-fusion zero branch relies on this)."""
    a = as_tensor(a)
    norms = np.sqrt((a.values ** 2).sum(axis=1, keepdims=True))
    safe = np.where(norms == 0.0, 1.0, norms)
    out = a.values / safe

    def backward(g: Array) -> None:
        if a.requires_grad:
            inner = (g * out).sum(axis=1, keepdims=True)
            grad = (g - out * inner) / safe
            grad = np.where(norms == 0.0, 0.0, grad)
            _accumulate(a, grad)

    return _make(out, "l2_normalize_rows", (a,), backward)


def row_sum(a) -> Tensor:
    a = as_tensor(a)
    out = a.values.sum(axis=1, keepdims=True)

    def backward(g: Array) -> None:
        if a.requires_grad:
            _accumulate(a, np.broadcast_to(g, a.shape).copy())

    return _make(out, "row_sum", (a,), backward)


def total_sum(a) -> Tensor:
    a = as_tensor(a)
    out = np.array([[a.values.sum()]], dtype=a.values.dtype)

    def backward(g: Array) -> None:
        if a.requires_grad:
            _accumulate(a, np.full(a.shape, g[0, 0]))

    return _make(out, "total_sum", (a,), backward)


def gather_rows(a, index) -> Tensor:
    """Select rows a[index[i], :]; duplicate indices accumulate on backward."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ContractError(f"gather_rows: index out of range for {a.shape[0]} rows")
    out = a.values[idx]

    def backward(g: Array) -> None:
        if a.requires_grad:
            buf = np.zeros_like(a.values)
            np.add.at(buf, idx, g)
            _accumulate(a, buf)

    return _make(out, "gather_rows", (a,), backward)


def gather_cols(a, index) -> Tensor:
    """Per-row column gather: out[l, j] = a[l, index[l, j]]."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    if idx.ndim != 2 or idx.shape[0] != a.shape[0]:
        raise ContractError(f"gather_cols: index shape {idx.shape} vs matrix {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise ContractError(f"gather_cols: index out of range for {a.shape[1]} columns")
    rows = np.arange(a.shape[0])[:, None]
    out = a.values[rows, idx]

    def backward(g: Array) -> None:
        if a.requires_grad:
            buf = np.zeros_like(a.values)
            np.add.at(buf, (np.broadcast_to(rows, idx.shape), idx), g)
            _accumulate(a, buf)

    return _make(out, "gather_cols", (a,), backward)


def scatter_pairs(base, rows, cols, values) -> Tensor:
    """Masked assignment: copy `base` and overwrite entry (rows[p], cols[p])
    with values[p]. Positions must be distinct."""
    base, values = as_tensor(base), as_tensor(values)
    r = np.asarray(rows, dtype=np.int64).reshape(-1)
    c = np.asarray(cols, dtype=np.int64).reshape(-1)
    if r.shape != c.shape:
        raise ContractError("scatter_pairs: rows and cols length mismatch")
    if values.values.size != r.size:
        raise ContractError(
            f"scatter_pairs: {r.size} positions but {values.values.size} values")
    if r.size:
        if r.min() < 0 or r.max() >= base.shape[0] or c.min() < 0 or c.max() >= base.shape[1]:
            raise ContractError(f"scatter_pairs: position out of range for {base.shape}")
        flat = r * base.shape[1] + c
        if np.unique(flat).size != flat.size:
            raise ContractError("scatter_pairs: duplicate positions")
    out = base.values.copy()
    out[r, c] = values.values.reshape(-1)

    def backward(g: Array) -> None:
        if base.requires_grad:
            gb = g.copy()
            gb[r, c] = 0.0
            _accumulate(base, gb)
        if values.requires_grad:
            _accumulate(values, g[r, c].reshape(values.shape))

    return _make(out, "scatter_pairs", (base, values), backward)


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    width = parts[0].shape[1]
    if any(p.shape[1] != width for p in parts):
        raise ContractError("concat_rows: column counts differ")
    out = np.concatenate([p.values for p in parts], axis=0)
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward(g: Array) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                _accumulate(p, g[lo:hi])

    return _make(out, "concat_rows", tuple(parts), backward)


def concat_cols(tensors: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    height = parts[0].shape[0]
    if any(p.shape[0] != height for p in parts):
        raise ContractError("concat_cols: row counts differ")
    out = np.concatenate([p.values for p in parts], axis=1)
    offsets = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g: Array) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                _accumulate(p, g[:, lo:hi])

    return _make(out, "concat_cols", tuple(parts), backward)


def affine(x, w, b) -> Tensor:
    return add(matmul(x, w), b)


# ---------------------------------------------------------------------------
# Two-layer MLP block
# ---------------------------------------------------------------------------

@dataclass
class MlpParams:
    """Weights of one affine -> tanh -> affine block."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @property
    def in_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def out_dim(self) -> int:
        return self.w2.shape[1]

    def tensors(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


def init_mlp(rng: np.random.Generator, d_in: int, d_hidden: int, d_out: int,
             name: str) -> MlpParams:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases."""
    s1 = 1.0 / math.sqrt(d_in)
    s2 = 1.0 / math.sqrt(d_hidden)
    return MlpParams(
        w1=parameter(rng.uniform(-s1, s1, size=(d_in, d_hidden)), f"{name}.w1"),
        b1=parameter(np.zeros((1, d_hidden)), f"{name}.b1"),
        w2=parameter(rng.uniform(-s2, s2, size=(d_hidden, d_out)), f"{name}.w2"),
        b2=parameter(np.zeros((1, d_out)), f"{name}.b2"),
    )


def mlp_two_layer(x, p: MlpParams) -> Tensor:
    x = as_tensor(x)
    if x.shape[1] != p.in_dim:
        raise ContractError(f"mlp: input dim {x.shape[1]} vs weights {p.in_dim}")
    return affine(tanh(affine(x, p.w1, p.b1)), p.w2, p.b2)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    """Iterative post-order DFS; deterministic given graph construction order."""
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad tensor reachable from `loss`."""
    if loss.values.shape != (1, 1):
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    loss.grad = np.ones((1, 1), dtype=loss.values.dtype)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# Parameter storage and gradient verification
# ---------------------------------------------------------------------------

class ParamStore:
    """Ordered mapping of parameter names to leaf tensors."""

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, t: Tensor) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name '{name}'")
        if not t.requires_grad:
            raise ContractError(f"parameter '{name}' must require grad")
        t.name = name
        self._params[name] = t
        return t

    def add_mlp(self, prefix: str, p: MlpParams) -> MlpParams:
        for key, t in p.tensors().items():
            self.add(f"{prefix}.{key}", t)
        return p

    def merge(self, other: "ParamStore") -> None:
        for name, t in other.items():
            self.add(name, t)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return self._params.items()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def count(self) -> int:
        return sum(t.values.size for t in self._params.values())

    def snapshot(self) -> dict[str, Array]:
        return {name: t.values.copy() for name, t in self._params.items()}

    def load(self, state: dict[str, Array]) -> None:
        for name, t in self._params.items():
            if name not in state:
                raise ContractError(f"snapshot missing parameter '{name}'")
            if state[name].shape != t.values.shape:
                raise ContractError(f"snapshot shape mismatch for '{name}'")
            t.values = state[name].copy()


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str
    per_param: dict[str, float]
    passed: bool


# Below this magnitude both analytic and numeric gradients are treated as
# zero and compared by absolute error instead of ratio.
_ABS_FALLBACK = 1e-8


def gradient_check(f: Callable[[], Tensor], params: ParamStore,
                   step: float = 1e-5, tolerance: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of the scalar f() against central differences.

    f must rebuild its graph from the current parameter values on every call.
    """
    params.zero_grad()
    loss = f()
    if loss.values.shape != (1, 1):
        raise ContractError("gradient_check: f() must return a scalar tensor")
    backward(loss)
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.values))
                for name, t in params.items()}

    def eval_at(name: str, idx: tuple[int, int], value: float) -> float:
        t = params[name]
        saved = t.values[idx]
        t.values[idx] = value
        try:
            out = f().item()
        except NumericError as e:
            raise NumericError(
                f"non-finite objective while perturbing '{name}'{list(idx)}: {e}") from e
        finally:
            t.values[idx] = saved
        if not math.isfinite(out):
            raise NumericError(f"non-finite objective while perturbing '{name}'{list(idx)}")
        return out

    per_param: dict[str, float] = {}
    worst = ("", 0.0)
    for name, t in params.items():
        worst_here = 0.0
        for idx in np.ndindex(*t.values.shape):
            base = t.values[idx]
            fp = eval_at(name, idx, base + step)
            fm = eval_at(name, idx, base - step)
            numeric = (fp - fm) / (2.0 * step)
            a = analytic[name][idx]
            denom = max(abs(a), abs(numeric))
            err = abs(a - numeric) if denom < _ABS_FALLBACK else abs(a - numeric) / denom
            worst_here = max(worst_here, err)
        per_param[name] = worst_here
        if worst_here >= worst[1]:
            worst = (name, worst_here)
    max_err = worst[1]
    return GradCheckReport(max_rel_err=max_err, worst_param=worst[0],
                           per_param=per_param, passed=max_err <= tolerance)

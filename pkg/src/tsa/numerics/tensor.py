"""Dense float64 tensors with tape-based reverse-mode differentiation.

Ops record onto the thread-local active tape (opened with ``with Tape():``)
whenever any input has ``requires_grad``. Outside a tape context every op is
a plain numpy computation and outputs are detached. Tensors are immutable
once created; optimizers produce replacement tensors.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from tsa.errors import ContractError, NumericError, ShapeError

_LOCAL = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_LOCAL, "tape", None)


class Tensor:
    """Immutable float64 array plus a requires-grad flag."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "requires_grad", bool(requires_grad))

    def __setattr__(self, name, value):
        raise AttributeError("Tensor is immutable")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def param(data) -> Tensor:
    """A leaf tensor that accumulates gradients."""
    return Tensor(data, requires_grad=True)


class Tape:
    """Records ops in execution order; replaying in reverse accumulates
    exactly one gradient contribution per recorded use of each tensor."""

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise ContractError("nested tapes are not supported; one tape per session")
        _LOCAL.tape = self
        return self

    def __exit__(self, *exc):
        _LOCAL.tape = None
        return False

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self._records.append((out, inputs, backward))
        self._produced.add(id(out))

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Gradients of a scalar loss w.r.t. every leaf tensor on the tape.

        Returns a map keyed by ``id(leaf)``; use :func:`grad_of` to look up a
        parameter. The tape is cleared afterwards.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        # Reverse execution order is a valid reverse-topological order: every
        # consumer of an output was recorded after its producer.
        for out, inputs, backward_fn in reversed(self._records):
            g_out = grads.pop(id(out), None)
            if g_out is None:
                continue
            for inp, g_in in zip(inputs, backward_fn(g_out)):
                if g_in is None or not inp.requires_grad:
                    continue
                acc = grads.get(id(inp))
                grads[id(inp)] = g_in if acc is None else acc + g_in
        leaf_grads = {
            tid: g for tid, g in grads.items() if tid not in self._produced and tid != id(loss)
        }
        self._records.clear()
        self._produced.clear()
        return leaf_grads


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Run reverse-mode accumulation on the active tape."""
    tape = _active_tape()
    if tape is None:
        raise ContractError("backward() called with no active tape")
    return tape.backward(loss)


def grad_of(grads: dict[int, np.ndarray], t: Tensor) -> np.ndarray:
    return grads.get(id(t), np.zeros_like(t.data))


def _unary(x: Tensor, out_data: np.ndarray, backward_fn) -> Tensor:
    tape = _active_tape()
    rec = tape is not None and x.requires_grad
    out = Tensor(out_data, requires_grad=rec)
    if rec:
        tape._record(out, (x,), backward_fn)
    return out


def _binary(a: Tensor, b: Tensor, out_data: np.ndarray, backward_fn) -> Tensor:
    tape = _active_tape()
    rec = tape is not None and (a.requires_grad or b.requires_grad)
    out = Tensor(out_data, requires_grad=rec)
    if rec:
        tape._record(out, (a, b), backward_fn)
    return out


def _check_finite(name: str, arr: np.ndarray):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {name}")


# ---------------------------------------------------------------------------
# arithmetic

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} x {b.shape} do not conform")
    out = a.data @ b.data
    return _binary(a, b, out, lambda g: (g @ b.data.T, a.data.T @ g))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shapes {a.shape} vs {b.shape}")
    return _binary(a, b, a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub shapes {a.shape} vs {b.shape}")
    return _binary(a, b, a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes {a.shape} vs {b.shape}")
    return _binary(a, b, a.data * b.data, lambda g: (g * b.data, g * a.data))


def neg(x: Tensor) -> Tensor:
    return _unary(x, -x.data, lambda g: (-g,))


def smul(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _unary(x, x.data * c, lambda g: (g * c,))


def sadd(x: Tensor, c: float) -> Tensor:
    return _unary(x, x.data + float(c), lambda g: (g,))


def add_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """x + v with v broadcast across rows (the bias-add broadcast)."""
    if x.data.ndim != 2 or v.data.ndim != 1 or x.shape[1] != v.shape[0]:
        raise ShapeError(f"add_rowvec shapes {x.shape} + {v.shape}")
    return _binary(x, v, x.data + v.data, lambda g: (g, g.sum(axis=0)))


def mul_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """x * v with v broadcast across rows (per-column scaling)."""
    if x.data.ndim != 2 or v.data.ndim != 1 or x.shape[1] != v.shape[0]:
        raise ShapeError(f"mul_rowvec shapes {x.shape} * {v.shape}")
    return _binary(x, v, x.data * v.data, lambda g: (g * v.data, (g * x.data).sum(axis=0)))


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Multiply row i of x by s[i]."""
    if x.data.ndim != 2 or s.data.ndim != 1 or x.shape[0] != s.shape[0]:
        raise ShapeError(f"scale_rows shapes {x.shape} by {s.shape}")
    return _binary(
        x, s, x.data * s.data[:, None], lambda g: (g * s.data[:, None], (g * x.data).sum(axis=1))
    )


# ---------------------------------------------------------------------------
# nonlinearities

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0
    return _unary(x, np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _unary(x, y, lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    # Evaluated via the positive branch for stability on both tails.
    y = np.where(x.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(x.data))),
                 np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))))
    return _unary(x, y, lambda g: (g * y * (1.0 - y),))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    _check_finite("exp", y)
    return _unary(x, y, lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0.0):
        raise NumericError("log of non-positive value")
    y = np.log(x.data)
    return _unary(x, y, lambda g: (g / x.data,))


def powc(x: Tensor, p: float) -> Tensor:
    """Elementwise x**p for constant p; domain x > 0 for non-integer p."""
    p = float(p)
    if p != int(p) and np.any(x.data <= 0.0):
        raise NumericError(f"pow({p}) of non-positive value")
    y = np.power(x.data, p)
    _check_finite("powc", y)
    return _unary(x, y, lambda g: (g * p * np.power(x.data, p - 1.0),))


# ---------------------------------------------------------------------------
# row-wise softmax family

def softmax(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"softmax expects a matrix, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - dot),)

    return _unary(x, y, bwd)


def log_softmax(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"log_softmax expects a matrix, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    y = shifted - lse
    sm = np.exp(y)

    def bwd(g):
        return (g - sm * g.sum(axis=1, keepdims=True),)

    return _unary(x, y, bwd)


# ---------------------------------------------------------------------------
# reductions and indexing

def tsum(x: Tensor) -> Tensor:
    return _unary(x, np.asarray(x.data.sum()), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def tmean(x: Tensor) -> Tensor:
    n = x.data.size
    return _unary(
        x, np.asarray(x.data.mean()), lambda g: (np.broadcast_to(g / n, x.shape).copy(),)
    )


def col_mean(x: Tensor) -> Tensor:
    """Mean over rows, returning a length-d vector."""
    if x.data.ndim != 2:
        raise ShapeError(f"col_mean expects a matrix, got {x.shape}")
    n = x.shape[0]
    return _unary(
        x, x.data.mean(axis=0), lambda g: (np.broadcast_to(g / n, x.shape).copy(),)
    )


def row_mean(x: Tensor) -> Tensor:
    """Mean over columns, returning a length-n vector."""
    if x.data.ndim != 2:
        raise ShapeError(f"row_mean expects a matrix, got {x.shape}")
    d = x.shape[1]

    def bwd(g):
        return (np.repeat(g[:, None] / d, d, axis=1),)

    return _unary(x, x.data.mean(axis=1), bwd)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    return _unary(x, x.data.reshape(shape), lambda g: (g.reshape(x.shape),))


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Rows x[idx]; the adjoint scatter-adds back into x."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("gather_rows index must be 1-D")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError("gather_rows index out of range")

    def bwd(g):
        gx = np.zeros(x.shape, dtype=np.float64)
        np.add.at(gx, idx, g)
        return (gx,)

    return _unary(x, x.data[idx], bwd)


def scatter_add_rows(x: Tensor, idx: np.ndarray, num_rows: int) -> Tensor:
    """out[i] = sum of rows k of x with idx[k] == i; adjoint is gather."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != (x.shape[0],):
        raise ShapeError("scatter_add_rows index must match the row count")
    if idx.size and (idx.min() < 0 or idx.max() >= num_rows):
        raise IndexError("scatter_add_rows index out of range")
    out = np.zeros((num_rows,) + x.shape[1:], dtype=np.float64)
    np.add.at(out, idx, x.data)
    return _unary(x, out, lambda g: (g[idx],))


def take_per_row(x: Tensor, cols: np.ndarray) -> Tensor:
    """Vector of x[i, cols[i]]."""
    cols = np.asarray(cols, dtype=np.int64)
    if x.data.ndim != 2 or cols.shape != (x.shape[0],):
        raise ShapeError("take_per_row needs one column index per row")
    if cols.size and (cols.min() < 0 or cols.max() >= x.shape[1]):
        raise IndexError("take_per_row column out of range")
    rows = np.arange(x.shape[0])

    def bwd(g):
        gx = np.zeros(x.shape, dtype=np.float64)
        gx[rows, cols] = g
        return (gx,)

    return _unary(x, x.data[rows, cols], bwd)


def sparse_matmul(mat, mat_t, x: Tensor) -> Tensor:
    """y = mat @ x for a constant scipy sparse matrix; mat_t must be its
    transpose (used by the adjoint). Only x is differentiated."""
    if x.data.ndim != 2 or mat.shape[1] != x.shape[0]:
        raise ShapeError(f"sparse_matmul shapes {mat.shape} x {x.shape}")
    if mat_t.shape != (mat.shape[1], mat.shape[0]):
        raise ShapeError("sparse_matmul transpose has wrong shape")
    return _unary(x, mat @ x.data, lambda g: (mat_t @ g,))

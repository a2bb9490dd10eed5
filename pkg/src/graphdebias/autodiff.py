"""Reverse-mode automatic differentiation on dense float64 numpy arrays.

The tape is define-by-run: every operation records its inputs and a
vector-Jacobian-product closure, and ``backward`` on a scalar walks the
recorded graph in reverse topological order. Operations are deliberately
restricted to what the graph encoders, the edge masker, and the training
losses need; there is no broadcasting-general ndarray algebra beyond that.

Gradient flow can be cut explicitly with ``detach`` (value-preserving,
gradient-annihilating), which is how the cross-branch stop-gradient rule
of the two-branch model is implemented.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numba
import numpy as np
from scipy import sparse
from scipy.special import expit

# Floor for logarithm / fractional-power arguments. Probabilities can
# underflow long before parameters blow up, so the floor keeps the losses
# finite without touching well-conditioned values.
CLAMP_MIN = 1e-12

_grad_enabled = True
_finite_checks = True


class AutodiffError(RuntimeError):
    """Raised on shape mismatches, non-finite values, or misuse of the tape."""


@contextmanager
def no_grad():
    """Disable provenance recording inside the block (cheap inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextmanager
def finite_checks(enabled: bool):
    """Toggle per-operation finiteness validation inside the block.

    Checks are on by default. The training loop disables them for speed and
    instead validates the loss and the parameter gradients once per step.
    """
    global _finite_checks
    prev = _finite_checks
    _finite_checks = enabled
    try:
        yield
    finally:
        _finite_checks = prev


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return arr


class Tensor:
    """A float64 array plus the provenance needed for reverse-mode gradients."""

    __slots__ = ("data", "grad", "op", "_inputs", "_vjp", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._inputs: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Value-identical tensor through which no gradient flows."""
        out = Tensor(self.data)
        out.op = "detach"
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable tensor
        that requires them. Tensors outside the graph are left untouched."""
        if self.data.shape != ():
            raise AutodiffError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        if not np.isfinite(self.data):
            raise AutodiffError("backward called on a non-finite loss")

        order = _toposort(self)
        pending: dict[int, np.ndarray] = {id(self): np.ones((), dtype=np.float64)}
        for node in order:
            out_grad = pending.pop(id(node), None)
            if out_grad is None:
                continue
            if node._vjp is None:
                # Leaf: persist the gradient (accumulating across backwards).
                node.grad = out_grad.copy() if node.grad is None else node.grad + out_grad
                continue
            input_grads = node._vjp(out_grad)
            for inp, g in zip(node._inputs, input_grads):
                if g is None or not inp.requires_grad:
                    continue
                if id(inp) in pending:
                    pending[id(inp)] = pending[id(inp)] + g
                else:
                    pending[id(inp)] = g

    # operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __pow__(self, exponent):
        return pow_scalar(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape})"


def _toposort(root: Tensor) -> list[Tensor]:
    # Iterative DFS; batched graphs are shallow but wide, and recursion
    # limits are not worth tripping over.
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
        for inp in node._inputs:
            if inp.requires_grad and id(inp) not in seen:
                stack.append((inp, False))
    order.reverse()
    return order


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _make(
    data: np.ndarray,
    op: str,
    inputs: tuple[Tensor, ...],
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    if _finite_checks and not np.all(np.isfinite(data)):
        raise AutodiffError(f"non-finite output from op {op!r}")
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._inputs = inputs
        out._vjp = vjp
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise AutodiffError(
            f"shape mismatch in op {op!r}: {a.shape} vs {b.shape}"
        ) from None


# element-wise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.data, b.data)

    def vjp(g):
        return (
            _unbroadcast(g, a.data.shape) if a.requires_grad else None,
            _unbroadcast(g, b.data.shape) if b.requires_grad else None,
        )

    return _make(a.data + b.data, "add", (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a.data, b.data)

    def vjp(g):
        return (
            _unbroadcast(g, a.data.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.data.shape) if b.requires_grad else None,
        )

    return _make(a.data - b.data, "sub", (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a.data, b.data)

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None,
        )

    return _make(a.data * b.data, "mul", (a, b), vjp)


def pow_scalar(a, exponent: float) -> Tensor:
    """Element-wise power with a fixed real exponent.

    Fractional exponents clamp the base to ``CLAMP_MIN`` (bases at or below
    the floor get zero gradient); integer exponents are exact on any sign.
    """
    a = as_tensor(a)
    p = float(exponent)
    if p == int(p):
        base = a.data
        active = None
    else:
        active = a.data > CLAMP_MIN
        base = np.maximum(a.data, CLAMP_MIN)

    def vjp(g):
        local = p * base ** (p - 1.0)
        if active is not None:
            local = np.where(active, local, 0.0)
        return (g * local,)

    return _make(base**p, "pow", (a,), vjp)


def log(a) -> Tensor:
    """Natural log with the argument clamped to ``CLAMP_MIN``."""
    a = as_tensor(a)
    active = a.data > CLAMP_MIN
    safe = np.maximum(a.data, CLAMP_MIN)

    def vjp(g):
        return (np.where(active, g / safe, 0.0),)

    return _make(np.log(safe), "log", (a,), vjp)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = expit(a.data)  # overflow-safe on both tails

    def vjp(g):
        local = 1.0 - out
        np.multiply(local, out, out=local)
        np.multiply(local, g, out=local)
        return (local,)

    return _make(out, "sigmoid", (a,), vjp)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def vjp(g):
        return (g * mask,)

    return _make(np.where(mask, a.data, 0.0), "relu", (a,), vjp)


# shape ops --------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise AutodiffError(
            f"shape mismatch in op 'matmul': {a.data.shape} @ {b.data.shape}"
        )

    def vjp(g):
        return (
            g @ b.data.T if a.requires_grad else None,
            a.data.T @ g if b.requires_grad else None,
        )

    return _make(a.data @ b.data, "matmul", (a, b), vjp)


def concat_cols(a, b) -> Tensor:
    """Concatenate two matrices side by side (same row count)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.data.shape[0] != b.data.shape[0]:
        raise AutodiffError(
            f"shape mismatch in op 'concat_cols': {a.data.shape} vs {b.data.shape}"
        )
    split = a.data.shape[1]

    def vjp(g):
        return (
            g[:, :split] if a.requires_grad else None,
            g[:, split:] if b.requires_grad else None,
        )

    return _make(np.concatenate((a.data, b.data), axis=1), "concat_cols", (a, b), vjp)


def concat_rows(a, b) -> Tensor:
    """Stack two matrices vertically (same column count)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise AutodiffError(
            f"shape mismatch in op 'concat_rows': {a.data.shape} vs {b.data.shape}"
        )
    split = a.data.shape[0]

    def vjp(g):
        return (
            g[:split] if a.requires_grad else None,
            g[split:] if b.requires_grad else None,
        )

    return _make(np.concatenate((a.data, b.data), axis=0), "concat_rows", (a, b), vjp)


def softmax_rows(a) -> Tensor:
    """Row-wise softmax with max-subtraction for stability."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise AutodiffError(f"softmax_rows expects a matrix, got shape {a.data.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - inner),)

    return _make(out, "softmax_rows", (a,), vjp)


def log_softmax_rows(a) -> Tensor:
    """Row-wise log-softmax computed from logits.

    Unlike log(softmax(x)), the gradient never saturates on confidently
    wrong rows, so cross entropy built on this keeps pulling them back.
    """
    a = as_tensor(a)
    if a.ndim != 2:
        raise AutodiffError(f"log_softmax_rows expects a matrix, got shape {a.data.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = shifted - np.log(e.sum(axis=1, keepdims=True))
    soft = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (g - soft * g.sum(axis=1, keepdims=True),)

    return _make(out, "log_softmax_rows", (a,), vjp)


def mean(a) -> Tensor:
    """Mean over all elements, producing a scalar."""
    a = as_tensor(a)
    n = a.data.size
    if n == 0:
        raise AutodiffError("mean of an empty tensor")

    def vjp(g):
        return (np.full(a.data.shape, float(g) / n),)

    return _make(np.asarray(a.data.mean()), "mean", (a,), vjp)


# gather / scatter -------------------------------------------------------


def _scatter_rows(data: np.ndarray, ids: np.ndarray, num: int) -> np.ndarray:
    """Sum rows of ``data`` into ``num`` buckets given by ``ids``."""
    out_shape = (num,) + data.shape[1:]
    out = np.zeros(out_shape, dtype=np.float64)
    if data.shape[0] == 0:
        return out
    if np.all(ids[1:] >= ids[:-1]):
        sorted_ids, sorted_data = ids, data
    else:
        perm = np.argsort(ids, kind="stable")
        sorted_ids, sorted_data = ids[perm], data[perm]
    starts = np.concatenate(([0], np.flatnonzero(np.diff(sorted_ids)) + 1))
    out[sorted_ids[starts]] = np.add.reduceat(sorted_data, starts, axis=0)
    return out


def segment_sum(a, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Sum rows of ``a`` grouped by an integer segment-id vector.

    Empty segments produce zero rows. Used for graph readout, degree
    accumulation, and any grouped reduction over a batch.
    """
    a = as_tensor(a)
    ids = np.asarray(segment_ids)
    if ids.ndim != 1 or ids.shape[0] != a.data.shape[0]:
        raise AutodiffError(
            f"shape mismatch in op 'segment_sum': data {a.data.shape}, ids {ids.shape}"
        )
    if ids.size and (ids.min() < 0 or ids.max() >= num_segments):
        raise AutodiffError("segment_sum: segment id out of range")

    def vjp(g):
        return (g[ids],)

    return _make(_scatter_rows(a.data, ids, num_segments), "segment_sum", (a,), vjp)


def gather_rows(a, indices: np.ndarray) -> Tensor:
    """Select rows of ``a`` by index; backward scatters with accumulation."""
    a = as_tensor(a)
    idx = np.asarray(indices)
    if idx.ndim != 1:
        raise AutodiffError(f"gather_rows expects 1-D indices, got shape {idx.shape}")
    n = a.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise AutodiffError("gather_rows: index out of range")

    def vjp(g):
        return (_scatter_rows(g, idx, n),)

    return _make(a.data[idx], "gather_rows", (a,), vjp)


@numba.njit(cache=True, fastmath=False)
def _rowwise_dots(a, b, rows, cols, out):  # pragma: no cover - compiled
    for k in range(rows.shape[0]):
        s = 0.0
        r = rows[k]
        c = cols[k]
        for j in range(a.shape[1]):
            s += a[r, j] * b[c, j]
        out[k] = s


class SparsePattern:
    """Fixed sparsity structure for sparse-times-dense products.

    Holds CSR templates for the matrix and its transpose; per-call values are
    written into the templates, so repeated products over the same structure
    (message passing over one batch) pay no construction cost.
    """

    def __init__(self, rows: np.ndarray, cols: np.ndarray, shape: tuple[int, int]):
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        if rows.shape != cols.shape or rows.ndim != 1:
            raise AutodiffError("SparsePattern: rows and cols must be equal-length vectors")
        self.rows = rows
        self.cols = cols
        self.shape = shape
        self.nnz = rows.shape[0]
        self._fwd_perm, self._fwd = self._template(rows, cols, shape)
        self._bwd_perm, self._bwd = self._template(cols, rows, (shape[1], shape[0]))

    @staticmethod
    def _template(rows, cols, shape):
        order = np.lexsort((cols, rows))
        indptr = np.searchsorted(rows[order], np.arange(shape[0] + 1))
        mat = sparse.csr_matrix(
            (np.zeros(rows.shape[0]), cols[order], indptr), shape=shape
        )
        return order, mat

    def matvec(self, values: np.ndarray, dense: np.ndarray) -> np.ndarray:
        self._fwd.data = values[self._fwd_perm]
        return self._fwd @ dense

    def rmatvec(self, values: np.ndarray, dense: np.ndarray) -> np.ndarray:
        self._bwd.data = values[self._bwd_perm]
        return self._bwd @ dense


def sparse_mm(pattern: SparsePattern, values, dense) -> Tensor:
    """Multiply a sparse matrix (fixed pattern, differentiable values) by a
    dense matrix. The workhorse of weighted message passing."""
    values, dense = as_tensor(values), as_tensor(dense)
    vals = values.data.reshape(-1)
    if vals.shape[0] != pattern.nnz:
        raise AutodiffError(
            f"shape mismatch in op 'sparse_mm': {values.data.shape} values for "
            f"{pattern.nnz} pattern entries"
        )
    if dense.ndim != 2 or dense.data.shape[0] != pattern.shape[1]:
        raise AutodiffError(
            f"shape mismatch in op 'sparse_mm': dense {dense.data.shape} vs "
            f"pattern {pattern.shape}"
        )

    def vjp(g):
        grad_vals = None
        if values.requires_grad:
            # d/d values[k] is the row-column dot g[rows_k] . dense[cols_k].
            grad_vals = np.empty(pattern.nnz)
            _rowwise_dots(
                np.ascontiguousarray(g),
                np.ascontiguousarray(dense.data),
                pattern.rows,
                pattern.cols,
                grad_vals,
            )
            grad_vals = grad_vals.reshape(values.data.shape)
        grad_dense = pattern.rmatvec(vals, g) if dense.requires_grad else None
        return (grad_vals, grad_dense)

    return _make(pattern.matvec(vals, dense.data), "sparse_mm", (values, dense), vjp)


def reshape_column(a) -> Tensor:
    """View a vector as a one-column matrix, preserving gradients."""
    a = as_tensor(a)
    if a.ndim == 2 and a.data.shape[1] == 1:
        return a
    if a.ndim != 1:
        raise AutodiffError(f"reshape_column expects a vector, got shape {a.data.shape}")

    def vjp(g):
        return (g.reshape(a.data.shape),)

    return _make(a.data.reshape(-1, 1), "reshape_column", (a,), vjp)


def detach(a) -> Tensor:
    return as_tensor(a).detach()


# parameters and Adam ----------------------------------------------------


class Parameter:
    """A named trainable tensor carrying its Adam moment state."""

    __slots__ = ("name", "tensor", "m", "v", "step")

    def __init__(self, name: str, data):
        self.name = name
        self.tensor = Tensor(data, requires_grad=True)
        self.m = np.zeros_like(self.tensor.data)
        self.v = np.zeros_like(self.tensor.data)
        self.step = 0

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.data.shape})"


class Adam:
    """Adam with bias correction; moments live on the parameters themselves."""

    def __init__(
        self,
        params: Iterable[Parameter],
        lr: float = 0.01,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps

    def zero_grad(self) -> None:
        for p in self.params:
            p.tensor.grad = None

    def step(self) -> None:
        for p in self.params:
            g = p.tensor.grad
            if g is None:
                g = np.zeros_like(p.tensor.data)
            elif not np.all(np.isfinite(g)):
                raise AutodiffError(f"non-finite gradient for parameter {p.name!r}")
            p.step += 1
            p.m = self.beta1 * p.m + (1.0 - self.beta1) * g
            p.v = self.beta2 * p.v + (1.0 - self.beta2) * g * g
            m_hat = p.m / (1.0 - self.beta1**p.step)
            v_hat = p.v / (1.0 - self.beta2**p.step)
            p.tensor.data = p.tensor.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def adam_step(
    params: Iterable[Parameter],
    lr: float = 0.01,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One standalone Adam update using the gradients currently on ``params``."""
    Adam(params, lr=lr, betas=betas, eps=eps).step()


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    eps: float = 1e-5,
) -> float:
    """Max relative disagreement between reverse-mode and central-difference
    gradients of the scalar ``f()`` over every coordinate of ``params``.

    The relative error divides by ``max(|ad|, |fd|, 1)`` so coordinates with
    near-zero gradient are judged on absolute error.
    """
    for p in params:
        p.tensor.grad = None
    loss = f()
    loss.backward()
    grads = []
    for p in params:
        g = p.tensor.grad
        grads.append(np.zeros_like(p.tensor.data) if g is None else g.copy())

    worst = 0.0
    with no_grad():
        for p, ad in zip(params, grads):
            flat = p.tensor.data.reshape(-1)
            ad_flat = ad.reshape(-1)
            for i in range(flat.shape[0]):
                orig = flat[i]
                flat[i] = orig + eps
                hi = float(f().data)
                flat[i] = orig - eps
                lo = float(f().data)
                flat[i] = orig
                fd = (hi - lo) / (2.0 * eps)
                denom = max(abs(ad_flat[i]), abs(fd), 1.0)
                worst = max(worst, abs(ad_flat[i] - fd) / denom)
    return worst

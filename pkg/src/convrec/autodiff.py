"""Dense-tensor reverse-mode automatic differentiation.

Every operation that touches a gradient-requiring input records a backward
closure on the produced tensor; ``backward`` replays the closures in reverse
topological order. Shapes are explicit: there is no broadcasting, and shape
mismatches raise :class:`~convrec.errors.ShapeError` naming both operands.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse as sp

from .errors import NumericError, ShapeError

Arrayish = "np.ndarray | float | Sequence[float]"


class Tensor:
    """A dense array plus an optional gradient buffer and tape node.

    ``grad`` is allocated lazily by :func:`backward` (or eagerly for trainable
    parameters, see :class:`convrec.optim.ParamStore`) and always matches
    ``values`` in shape.
    """

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def item(self) -> float:
        return float(self.values)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"

    # Operator sugar for the common elementwise cases.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)


def constant(values) -> Tensor:
    """A tensor that never receives gradients."""
    return Tensor(values, requires_grad=False)


def _record(out: Tensor, parents: tuple[Tensor, ...], fn: Callable[[np.ndarray], None]) -> Tensor:
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = fn
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.values)
    t.grad += g


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.values.shape != b.values.shape:
        raise ShapeError(f"{op}: shapes {a.values.shape} and {b.values.shape} differ")


def backward(root: Tensor) -> None:
    """Populate gradients of everything reachable from a scalar ``root``.

    Gradients of all tape nodes reached in this call are reset before
    accumulation, so repeated calls on the same tape are bitwise reproducible.
    """
    if root.values.ndim != 0:
        raise ShapeError(f"backward root must be scalar, got shape {root.values.shape}")

    # Iterative topological sort; recursion would overflow on deep tapes.
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    for node in topo:
        node.grad = np.zeros_like(node.values)
    root.grad = np.ones_like(root.values)
    for node in reversed(topo):
        if node._backward_fn is not None:
            node._backward_fn(node.grad)


# ---------------------------------------------------------------------------
# elementwise and affine primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    out = Tensor(a.values + b.values)

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, g)

    return _record(out, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    out = Tensor(a.values - b.values)

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, -g)

    return _record(out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    _same_shape(a, b, "mul")
    out = Tensor(a.values * b.values)

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g * b.values)
        if b.requires_grad:
            _accum(b, g * a.values)

    return _record(out, (a, b), bw)


def mul_scalar(s: Tensor, x: Tensor) -> Tensor:
    """Broadcast-multiply a 0-d tensor onto a tensor of any shape."""
    if s.values.ndim != 0:
        raise ShapeError(f"mul_scalar: first operand must be scalar, got shape {s.values.shape}")
    out = Tensor(s.values * x.values)

    def bw(g: np.ndarray) -> None:
        if s.requires_grad:
            _accum(s, np.sum(g * x.values))
        if x.requires_grad:
            _accum(x, g * s.values)

    return _record(out, (s, x), bw)


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.values * c)

    def bw(g: np.ndarray) -> None:
        _accum(a, g * c)

    return _record(out, (a,), bw)


def add_const(a: Tensor, c) -> Tensor:
    """Add a non-differentiable constant (scalar or same-shape array)."""
    c_arr = np.asarray(c)
    if c_arr.ndim != 0 and c_arr.shape != a.values.shape:
        raise ShapeError(f"add_const: shapes {a.values.shape} and {c_arr.shape} differ")
    out = Tensor(a.values + c_arr)

    def bw(g: np.ndarray) -> None:
        _accum(a, g)

    return _record(out, (a,), bw)


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.values, 0))

    def bw(g: np.ndarray) -> None:
        _accum(a, g * (a.values > 0))

    return _record(out, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.values)
    out = Tensor(y)

    def bw(g: np.ndarray) -> None:
        _accum(a, g * (1.0 - y * y))

    return _record(out, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    # Stable for both signs of the input.
    y = np.where(a.values >= 0, 1.0 / (1.0 + np.exp(-a.values)), np.exp(a.values) / (1.0 + np.exp(a.values)))
    y = y.astype(a.values.dtype, copy=False)
    out = Tensor(y)

    def bw(g: np.ndarray) -> None:
        _accum(a, g * y * (1.0 - y))

    return _record(out, (a,), bw)


def log(a: Tensor) -> Tensor:
    """Natural log; the caller is responsible for keeping inputs positive."""
    out = Tensor(np.log(a.values))

    def bw(g: np.ndarray) -> None:
        _accum(a, g / a.values)

    return _record(out, (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: (n,k)@(k,m) -> (n,m) or matrix-vector (n,k)@(k,) -> (n,)."""
    if a.values.ndim != 2 or b.values.ndim not in (1, 2):
        raise ShapeError(f"matmul: unsupported ranks {a.values.shape} @ {b.values.shape}")
    if a.values.shape[1] != b.values.shape[0]:
        raise ShapeError(f"matmul: inner dims of {a.values.shape} and {b.values.shape} differ")
    out = Tensor(a.values @ b.values)

    def bw(g: np.ndarray) -> None:
        if b.values.ndim == 2:
            if a.requires_grad:
                _accum(a, g @ b.values.T)
            if b.requires_grad:
                _accum(b, a.values.T @ g)
        else:
            if a.requires_grad:
                _accum(a, np.outer(g, b.values))
            if b.requires_grad:
                _accum(b, a.values.T @ g)

    return _record(out, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.values.shape}")
    out = Tensor(a.values.T.copy())

    def bw(g: np.ndarray) -> None:
        _accum(a, g.T)

    return _record(out, (a,), bw)


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 0. All parts must share rank and trailing dims."""
    if not parts:
        raise ShapeError("concat: no inputs")
    ndim = parts[0].values.ndim
    for p in parts:
        if p.values.ndim != ndim or p.values.shape[1:] != parts[0].values.shape[1:]:
            raise ShapeError(
                f"concat: incompatible shapes {[tuple(q.values.shape) for q in parts]}"
            )
    out = Tensor(np.concatenate([p.values for p in parts], axis=0))
    sizes = [p.values.shape[0] for p in parts]

    def bw(g: np.ndarray) -> None:
        off = 0
        for p, n in zip(parts, sizes):
            if p.requires_grad:
                _accum(p, g[off : off + n])
            off += n

    return _record(out, tuple(parts), bw)


def lookup(table: Tensor, indices: Sequence[int]) -> Tensor:
    """Gather rows of a matrix; backward scatter-adds into the table."""
    if table.values.ndim != 2:
        raise ShapeError(f"lookup: expected a matrix, got shape {table.values.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= table.values.shape[0]):
        raise ShapeError(
            f"lookup: index out of range for table with {table.values.shape[0]} rows"
        )
    out = Tensor(table.values[idx])

    def bw(g: np.ndarray) -> None:
        if table.grad is None:
            table.grad = np.zeros_like(table.values)
        np.add.at(table.grad, idx, g)

    return _record(out, (table,), bw)


def take(vec: Tensor, indices: Sequence[int]) -> Tensor:
    """Gather entries of a vector."""
    if vec.values.ndim != 1:
        raise ShapeError(f"take: expected a vector, got shape {vec.values.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    out = Tensor(vec.values[idx])

    def bw(g: np.ndarray) -> None:
        if vec.grad is None:
            vec.grad = np.zeros_like(vec.values)
        np.add.at(vec.grad, idx, g)

    return _record(out, (vec,), bw)


def scatter_rows(src: Tensor, indices: Sequence[int], n_rows: int) -> Tensor:
    """Place rows of ``src`` at ``indices`` of an otherwise-zero (n_rows, d) matrix.

    Indices must be distinct; this is placement, not accumulation.
    """
    if src.values.ndim != 2:
        raise ShapeError(f"scatter_rows: expected a matrix, got shape {src.values.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size != len(set(idx.tolist())):
        raise ShapeError("scatter_rows: duplicate target rows")
    vals = np.zeros((n_rows, src.values.shape[1]), dtype=src.values.dtype)
    vals[idx] = src.values
    out = Tensor(vals)

    def bw(g: np.ndarray) -> None:
        _accum(src, g[idx])

    return _record(out, (src,), bw)


def weighted_sum(weights: Tensor, rows: Tensor) -> Tensor:
    """Combine rows (n,d) with weights (n,) into a single (d,) vector."""
    if weights.values.ndim != 1 or rows.values.ndim != 2:
        raise ShapeError(
            f"weighted_sum: expected (n,) and (n,d), got {weights.values.shape} and {rows.values.shape}"
        )
    if weights.values.shape[0] != rows.values.shape[0]:
        raise ShapeError(
            f"weighted_sum: row counts {weights.values.shape[0]} and {rows.values.shape[0]} differ"
        )
    out = Tensor(weights.values @ rows.values)

    def bw(g: np.ndarray) -> None:
        if weights.requires_grad:
            _accum(weights, rows.values @ g)
        if rows.requires_grad:
            _accum(rows, np.outer(weights.values, g))

    return _record(out, (weights, rows), bw)


def neighbor_sum(
    h: Tensor,
    src_ids: np.ndarray,
    dst_ids: np.ndarray,
    n_out: int,
    norm: np.ndarray | None = None,
) -> Tensor:
    """Structural message aggregation: out[i] = norm[i] * sum of h[j] over edges j->i.

    ``src_ids``/``dst_ids`` are parallel edge arrays indexing rows of ``h`` and
    rows of the output respectively.
    """
    if h.values.ndim != 2:
        raise ShapeError(f"neighbor_sum: expected a matrix, got shape {h.values.shape}")
    acc = np.zeros((n_out, h.values.shape[1]), dtype=h.values.dtype)
    if src_ids.size:
        np.add.at(acc, dst_ids, h.values[src_ids])
    if norm is not None:
        acc *= norm[:, None]
    out = Tensor(acc)

    def bw(g: np.ndarray) -> None:
        if h.grad is None:
            h.grad = np.zeros_like(h.values)
        gn = g if norm is None else g * norm[:, None]
        if src_ids.size:
            np.add.at(h.grad, src_ids, gn[dst_ids])

    return _record(out, (h,), bw)


def spmm(a: sp.spmatrix, x: Tensor) -> Tensor:
    """Multiply by a constant sparse matrix: out = a @ x."""
    if x.values.ndim != 2 or a.shape[1] != x.values.shape[0]:
        raise ShapeError(f"spmm: shapes {a.shape} and {x.values.shape} incompatible")
    at = a.T.tocsr()
    out = Tensor(np.asarray(a @ x.values))

    def bw(g: np.ndarray) -> None:
        _accum(x, np.asarray(at @ g))

    return _record(out, (x,), bw)


# ---------------------------------------------------------------------------
# reductions and normalizations


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.values.sum())

    def bw(g: np.ndarray) -> None:
        _accum(a, np.full_like(a.values, g))

    return _record(out, (a,), bw)


def mean_all(a: Tensor) -> Tensor:
    n = a.values.size
    out = Tensor(a.values.sum() / n)

    def bw(g: np.ndarray) -> None:
        _accum(a, np.full_like(a.values, g / n))

    return _record(out, (a,), bw)


def softmax(a: Tensor) -> Tensor:
    """Softmax of a vector (max-shifted for stability)."""
    if a.values.ndim != 1:
        raise ShapeError(f"softmax: expected a vector, got shape {a.values.shape}")
    shifted = a.values - a.values.max()
    e = np.exp(shifted)
    y = e / e.sum()
    out = Tensor(y)

    def bw(g: np.ndarray) -> None:
        _accum(a, y * (g - np.dot(g, y)))

    return _record(out, (a,), bw)


def cross_entropy(logits: Tensor, labels: int | Sequence[int]) -> Tensor:
    """Mean negative log-softmax of the label entries of a logit vector."""
    if logits.values.ndim != 1:
        raise ShapeError(f"cross_entropy: expected a vector, got shape {logits.values.shape}")
    idx = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    z = logits.values
    m = z.max()
    lse = m + np.log(np.exp(z - m).sum())
    out = Tensor(np.asarray(lse - z[idx].mean()))
    p = np.exp(z - lse)

    def bw(g: np.ndarray) -> None:
        d = p.copy()
        np.add.at(d, idx, -1.0 / idx.size)
        _accum(logits, g * d)

    return _record(out, (logits,), bw)


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(
    f: Callable[..., Tensor],
    store,
    *,
    eps: float = 1e-4,
    coords: Iterable[tuple[str, int]] | None = None,
    samples_per_param: int = 2,
    seed: int = 0,
) -> float:
    """Compare analytic gradients of ``f(store)`` against central differences.

    Returns the max over checked coordinates of
    ``|analytic - numeric| / (|numeric| + 1e-12)``. ``coords`` is an iterable
    of (parameter name, flat index) pairs; when omitted, ``samples_per_param``
    coordinates are sampled per parameter with the given seed.

    The default step balances truncation against roundoff for loss values of
    order one in double precision; coordinates with near-zero gradients are
    the binding case.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")

    def run() -> float:
        y = f(store)
        v = float(y.values)
        if not np.isfinite(v):
            raise NumericError(f"objective is not finite: {v}")
        return v

    store.zero_grads()
    y = f(store)
    if not np.isfinite(float(y.values)):
        raise NumericError(f"objective is not finite: {float(y.values)}")
    backward(y)
    analytic = {name: t.grad.copy() for name, t in store.items()}

    if coords is None:
        rng = np.random.default_rng(seed)
        picked: list[tuple[str, int]] = []
        for name, t in store.items():
            size = t.values.size
            k = min(samples_per_param, size)
            for i in rng.choice(size, size=k, replace=False):
                picked.append((name, int(i)))
        coords = picked

    worst = 0.0
    for name, flat_idx in coords:
        t = store[name]
        pos = np.unravel_index(flat_idx, t.values.shape)
        orig = t.values[pos]
        t.values[pos] = orig + eps
        f_plus = run()
        t.values[pos] = orig - eps
        f_minus = run()
        t.values[pos] = orig
        numeric = (f_plus - f_minus) / (2.0 * eps)
        a = float(analytic[name][pos])
        rel = abs(a - numeric) / (abs(numeric) + 1e-12)
        worst = max(worst, rel)
    return worst

"""Minimal reverse-mode autodiff on float64 numpy arrays.

The engine supports double backward: when ``backward`` is called with
``retain_graph=True``, the gradients it returns are themselves graph nodes
and can be differentiated again.  This works because every derivative rule
is written in terms of the same differentiable primitives, so the backward
pass is traced like any other computation.

Shapes are strict.  The only implicit broadcast is adding a bias row
(``[m, n] + [n]``); every other mismatch raises :class:`ShapeError`.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager, nullcontext
from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NumericError",
    "GradientError",
    "DeterminismError",
    "no_grad",
    "add",
    "sub",
    "neg",
    "mul",
    "smul",
    "div",
    "matmul",
    "transpose",
    "tanh",
    "relu",
    "exp",
    "log",
    "row_sum",
    "col_sum",
    "tile_cols",
    "tile_rows",
    "sum_all",
    "spread",
    "mean",
    "concat_cols",
    "slice_cols",
    "grad_reverse",
    "embed_lookup_mean",
    "frobenius_sq",
    "softmax_cross_entropy",
    "backward",
    "finite_diff_check",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for the named op."""


class NumericError(ArithmeticError):
    """An op produced NaN or Inf."""


class GradientError(ValueError):
    """Backward-pass contract violation (non-scalar root, freed graph, ...)."""


class DeterminismError(RuntimeError):
    """A loss closure returned different values on repeated evaluation."""


class _GradMode(threading.local):
    def __init__(self) -> None:
        self.enabled = True


_MODE = _GradMode()


@contextmanager
def no_grad():
    """Disable graph recording within the block (per thread)."""
    prev = _MODE.enabled
    _MODE.enabled = False
    try:
        yield
    finally:
        _MODE.enabled = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op}: produced non-finite values")


class Tensor:
    """Dense float64 array, optionally tracked in a computation graph.

    Leaf tensors own their values; op results additionally carry their
    parents and a derivative rule.  ``_version`` is a shared single-element
    list so detached views see in-place updates of the same buffer; it lets
    ``backward`` detect values mutated after graph construction.
    """

    __slots__ = ("data", "requires_grad", "op", "_parents", "_vjp", "_version", "_pversions", "_freed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, order="C")
        _check_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self._version = [0]
        self._pversions: tuple[int, ...] = ()
        self._freed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor has {self.data.size} elements")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Leaf view of the same buffer, cut out of the graph."""
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.requires_grad = False
        t.op = "leaf"
        t._parents = ()
        t._vjp = None
        t._version = self._version  # shared cell: mutation stays visible
        t._pversions = ()
        t._freed = False
        return t

    def assign(self, values) -> None:
        """In-place value replacement; only valid on leaf tensors."""
        if self._vjp is not None or self._parents or self._freed:
            raise GradientError("assign: only leaf tensors may be updated in place")
        arr = np.asarray(values, dtype=np.float64)
        if arr.shape != self.data.shape:
            raise ShapeError(f"assign: shape {arr.shape} != {self.data.shape}")
        _check_finite(arr, "assign")
        self.data[...] = arr
        self._version[0] += 1

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{flag})"

    # arithmetic sugar; strict-shape ops underneath
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return smul(self, float(other))

    def __rmul__(self, other):
        return smul(self, float(other))

    def __matmul__(self, other):
        return matmul(self, other)


def _result(arr: np.ndarray, op: str, parents: tuple[Tensor, ...], vjp: Callable | None) -> Tensor:
    arr = np.asarray(arr, dtype=np.float64, order="C")  # keeps 0-d; copies views
    _check_finite(arr, op)
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.op = op
    t._version = [0]
    t._freed = False
    if _MODE.enabled and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = parents
        t._vjp = vjp
        t._pversions = tuple(p._version[0] for p in parents)
    else:
        t.requires_grad = False
        t._parents = ()
        t._vjp = None
        t._pversions = ()
    return t


def _shapes(*ts: Tensor) -> str:
    return ", ".join(str(t.shape) for t in ts)


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; also accepts a bias row ``[m, n] + [n]``."""
    if a.shape == b.shape:
        return _result(a.data + b.data, "add", (a, b), lambda out, g: (g, g))
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        return _result(a.data + b.data[None, :], "add", (a, b), lambda out, g: (g, col_sum(g)))
    raise ShapeError(f"add: shapes {_shapes(a, b)} do not conform")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, "neg", (a,), lambda out, g: (neg(g),))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, neg(b))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {_shapes(a, b)} differ")
    return _result(a.data * b.data, "mul", (a, b), lambda out, g: (mul(g, b), mul(g, a)))


def smul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, "smul", (a,), lambda out, g: (smul(g, c),))


def div(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"div: shapes {_shapes(a, b)} differ")
    return _result(
        a.data / b.data,
        "div",
        (a, b),
        lambda out, g: (div(g, b), neg(div(mul(g, a), mul(b, b)))),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {_shapes(a, b)} do not conform")
    return _result(
        a.data @ b.data,
        "matmul",
        (a, b),
        lambda out, g: (matmul(g, transpose(b)), matmul(transpose(a), g)),
    )


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected matrix, got {a.shape}")
    return _result(a.data.T, "transpose", (a,), lambda out, g: (transpose(g),))


def tanh(x: Tensor) -> Tensor:
    def vjp(out, g):
        one = Tensor(np.ones_like(out.data))
        return (mul(g, sub(one, mul(out, out))),)

    return _result(np.tanh(x.data), "tanh", (x,), vjp)


def relu(x: Tensor) -> Tensor:
    # subgradient at 0 is 0; the mask is a constant, so d2 relu = 0
    mask = Tensor((x.data > 0).astype(np.float64))
    return _result(np.maximum(x.data, 0.0), "relu", (x,), lambda out, g: (mul(g, mask),))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        arr = np.exp(x.data)
    return _result(arr, "exp", (x,), lambda out, g: (mul(g, out),))


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        arr = np.log(x.data)
    return _result(arr, "log", (x,), lambda out, g: (div(g, x),))


def row_sum(x: Tensor) -> Tensor:
    """Sum over columns: ``[m, n] -> [m]``."""
    if x.data.ndim != 2:
        raise ShapeError(f"row_sum: expected matrix, got {x.shape}")
    n = x.shape[1]
    return _result(x.data.sum(axis=1), "row_sum", (x,), lambda out, g: (tile_cols(g, n),))


def col_sum(x: Tensor) -> Tensor:
    """Sum over rows: ``[m, n] -> [n]``."""
    if x.data.ndim != 2:
        raise ShapeError(f"col_sum: expected matrix, got {x.shape}")
    m = x.shape[0]
    return _result(x.data.sum(axis=0), "col_sum", (x,), lambda out, g: (tile_rows(g, m),))


def tile_cols(v: Tensor, n: int) -> Tensor:
    """Repeat a vector as columns: ``[m] -> [m, n]``."""
    if v.data.ndim != 1:
        raise ShapeError(f"tile_cols: expected vector, got {v.shape}")
    return _result(np.repeat(v.data[:, None], n, axis=1), "tile_cols", (v,), lambda out, g: (row_sum(g),))


def tile_rows(v: Tensor, m: int) -> Tensor:
    """Repeat a vector as rows: ``[n] -> [m, n]``."""
    if v.data.ndim != 1:
        raise ShapeError(f"tile_rows: expected vector, got {v.shape}")
    return _result(np.repeat(v.data[None, :], m, axis=0), "tile_rows", (v,), lambda out, g: (col_sum(g),))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.asarray(x.data.sum()), "sum_all", (x,), lambda out, g: (spread(g, shape),))


def spread(s: Tensor, shape: tuple[int, ...]) -> Tensor:
    if s.data.size != 1:
        raise ShapeError(f"spread: expected scalar, got {s.shape}")
    return _result(np.full(shape, float(s.data.reshape(()))), "spread", (s,), lambda out, g: (sum_all(g),))


def mean(x: Tensor) -> Tensor:
    """Mean over all elements."""
    if x.data.size == 0:
        raise ShapeError("mean: empty tensor")
    return smul(sum_all(x), 1.0 / x.data.size)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat_cols: no operands")
    if any(p.data.ndim != 2 for p in parts) or len({p.shape[0] for p in parts}) != 1:
        raise ShapeError(f"concat_cols: shapes {_shapes(*parts)} do not conform")
    widths = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def vjp(out, g):
        return tuple(slice_cols(g, int(offsets[i]), int(offsets[i + 1])) for i in range(len(parts)))

    return _result(np.concatenate([p.data for p in parts], axis=1), "concat_cols", parts, vjp)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= start <= stop <= x.shape[1]):
        raise ShapeError(f"slice_cols: [{start}:{stop}] invalid for {x.shape}")
    m, n = x.shape

    def vjp(out, g):
        blocks = []
        if start > 0:
            blocks.append(Tensor(np.zeros((m, start))))
        blocks.append(g)
        if stop < n:
            blocks.append(Tensor(np.zeros((m, n - stop))))
        return (concat_cols(blocks) if len(blocks) > 1 else g,)

    return _result(x.data[:, start:stop], "slice_cols", (x,), vjp)


def grad_reverse(x: Tensor, lam: float) -> Tensor:
    """Identity forward; upstream gradient scaled by ``-lam`` on the way back."""
    lam = float(lam)
    return _result(x.data.copy(), "grad_reverse", (x,), lambda out, g: (smul(g, -lam),))


# ---------------------------------------------------------------------------
# composites


def embed_lookup_mean(emb: Tensor, seqs: Sequence[Sequence[int]]) -> Tensor:
    """Mean of embedding rows per token sequence: ``[V, e] x seqs -> [batch, e]``.

    Linear in the embedding, so it is expressed as a constant indicator
    matrix times ``emb`` and inherits exact derivatives of any order.
    """
    if emb.data.ndim != 2:
        raise ShapeError(f"embed_lookup_mean: embedding must be a matrix, got {emb.shape}")
    vocab = emb.shape[0]
    weights = np.zeros((len(seqs), vocab))
    for i, seq in enumerate(seqs):
        if len(seq) == 0:
            raise ShapeError(f"embed_lookup_mean: sequence {i} is empty")
        w = 1.0 / len(seq)
        for tok in seq:
            tok = int(tok)
            if not 0 <= tok < vocab:
                raise ShapeError(f"embed_lookup_mean: token id {tok} outside [0, {vocab})")
            weights[i, tok] += w
    return matmul(Tensor(weights), emb)


def frobenius_sq(x: Tensor) -> Tensor:
    """Sum of squared entries."""
    return sum_all(mul(x, x))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Per-sample cross entropy between row softmax and integer labels: ``[m]``.

    Stabilised with a constant row-max shift; shift invariance of softmax
    keeps values and derivatives of every order exact.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be [batch, classes], got {logits.shape}")
    m, c = logits.shape
    lab = np.asarray(labels, dtype=np.int64)
    if lab.shape != (m,):
        raise ShapeError(f"softmax_cross_entropy: {lab.shape} labels for batch {m}")
    if lab.size and (lab.min() < 0 or lab.max() >= c):
        bad = int(lab[(lab < 0) | (lab >= c)][0])
        raise ValueError(f"softmax_cross_entropy: label {bad} outside [0, {c})")

    rowmax = Tensor(logits.data.max(axis=1))
    shifted = sub(logits, tile_cols(rowmax, c))
    lse = add(log(row_sum(exp(shifted))), rowmax)
    onehot = np.zeros((m, c))
    onehot[np.arange(m), lab] = 1.0
    picked = row_sum(mul(logits, Tensor(onehot)))
    return sub(lse, picked)


# ---------------------------------------------------------------------------
# backward


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    order.reverse()  # consumers before producers
    return order


def backward(scalar: Tensor, wrt: Mapping[str, Tensor], retain_graph: bool = False) -> dict[str, Tensor]:
    """Gradients of a scalar w.r.t. named parameters.

    Returns a map containing only parameters actually reachable from the
    scalar; a missing key means the gradient is exactly zero.  With
    ``retain_graph=True`` the graph is kept and the returned tensors are
    further differentiable; otherwise the tape is freed.
    """
    if scalar.data.size != 1:
        raise GradientError(f"backward: root must be a scalar, got shape {scalar.shape}")
    if not wrt:
        raise GradientError("backward: wrt is empty")
    if not scalar.requires_grad:
        return {}

    nodes = _toposort(scalar)
    for node in nodes:
        if node._freed:
            raise GradientError("backward: graph was freed by a previous backward (use retain_graph=True)")
        for p, v in zip(node._parents, node._pversions):
            if p._version[0] != v:
                raise GradientError(f"backward: value behind op {node.op!r} changed after graph construction")

    grads: dict[int, Tensor] = {id(scalar): Tensor(np.ones_like(scalar.data))}
    ctx = nullcontext() if retain_graph else no_grad()
    with ctx:
        for node in nodes:
            g = grads.get(id(node))
            if g is None or node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(node, g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else add(prev, pg)

    if not retain_graph:
        for node in nodes:
            if node._vjp is not None:
                node._parents = ()
                node._vjp = None
                node._pversions = ()
                node._freed = True

    return {pid: grads[id(t)] for pid, t in wrt.items() if id(t) in grads}


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    The closure is evaluated twice up front; disagreement raises
    :class:`DeterminismError`.  Relative error uses the denominator
    ``max(|analytic|, |numeric|, 1e-8)``.
    """
    if eps <= 0:
        raise ValueError("finite_diff_check: eps must be positive")
    base = loss_fn()
    repeat = loss_fn()
    if not np.array_equal(base.data, repeat.data):
        raise DeterminismError("finite_diff_check: loss closure is not deterministic")

    analytic = backward(base, params)
    worst = 0.0
    for pid, p in params.items():
        got = analytic.get(pid)
        ana = np.zeros_like(p.data) if got is None else got.data
        flat = p.data.reshape(-1)
        ana_flat = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            p._version[0] += 1
            f_plus = loss_fn().item()
            flat[i] = orig - eps
            p._version[0] += 1
            f_minus = loss_fn().item()
            flat[i] = orig
            p._version[0] += 1
            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = abs(float(ana_flat[i]) - numeric) / max(abs(float(ana_flat[i])), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst

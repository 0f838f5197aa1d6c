"""Dense float64 tensors with reverse-mode gradients on an explicit tape.

Just enough machinery for LSTMs, additive attention, maxout readouts and
cross-entropy training. Every operation takes the tape as its first
argument; passing ``tape=None`` runs the identical forward math without
recording anything, which is how inference avoids autograd overhead while
staying bit-compatible with the training path.

Tensors whose forward values are complete are treated as immutable and may
be shared freely between workers. A Tape is single-owner: never use one
from two workers at once.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .errors import ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "tensor",
    "zeros",
    "assert_all_finite",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "activation",
    "tanh",
    "sigmoid",
    "softmax",
    "log_softmax",
    "maxout",
    "concat",
    "slice1d",
    "index_row",
    "stack_rows",
    "add_rowvec",
    "outer",
    "lstm_cell",
    "cross_entropy",
]


class Tensor:
    """A dense float64 array plus an optional gradient of the same shape."""

    __slots__ = ("values", "requires_grad", "grad")

    def __init__(self, values, requires_grad: bool = False, validate: bool = True):
        arr = np.asarray(values, dtype=np.float64)
        if validate and not np.all(np.isfinite(arr)):
            raise ValueError("tensor values must be finite (no NaN/Inf)")
        self.values = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        return float(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def validate(self) -> "Tensor":
        """Re-check finiteness of values (and grad, when present)."""
        assert_all_finite(self)
        return self

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def tensor(values, requires_grad: bool = False) -> Tensor:
    return Tensor(values, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad, validate=False)


def assert_all_finite(t: Tensor) -> None:
    """Validation pass flagging NaN/Inf in values or an existing grad."""
    if not np.all(np.isfinite(t.values)):
        raise ValueError("tensor holds non-finite values")
    if t.grad is not None and not np.all(np.isfinite(t.grad)):
        raise ValueError("tensor holds a non-finite gradient")


def _accum(t: Tensor, delta: np.ndarray) -> None:
    # += rather than overwrite so shared parameters (embeddings) accumulate.
    if t.grad is None:
        t.grad = np.zeros_like(t.values)
    t.grad += delta


class Tape:
    """Ordered record of executed differentiable operations.

    ``backward`` replays the record in exact reverse execution order,
    accumulating gradients into every ``requires_grad`` input of every
    recorded op. Forward values are never touched.
    """

    __slots__ = ("_records",)

    def __init__(self):
        # (output tensor, inputs that require grad, backward closure)
        self._records: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Tensor, grad_inputs: tuple[Tensor, ...], fn) -> None:
        if grad_inputs:
            out.requires_grad = True
            self._records.append((out, grad_inputs, fn))

    def backward(self, root: Tensor, seed: np.ndarray | None = None) -> None:
        """Propagate d(root)/d(inputs) back through the recorded ops.

        ``seed`` defaults to 1 and must be given for non-scalar roots.
        """
        if seed is None:
            if root.values.size != 1:
                raise ValueError("seed gradient required for non-scalar root")
            seed = np.ones_like(root.values)
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != root.values.shape:
            raise ShapeError(f"seed shape {seed.shape} != root shape {root.values.shape}")
        _accum(root, seed)
        for out, grad_inputs, fn in reversed(self._records):
            for t in grad_inputs:
                if t.grad is None:
                    t.grad = np.zeros_like(t.values)
            if out.grad is not None:
                fn(out.grad)


def _result(tape: Tape | None, values: np.ndarray, inputs: Sequence[Tensor], fn_factory) -> Tensor:
    """Wrap op output; record backward closure when a tape is listening."""
    out = Tensor(values, validate=False)
    if tape is not None:
        grad_inputs = tuple(t for t in inputs if t.requires_grad)
        if grad_inputs:
            tape.record(out, grad_inputs, fn_factory(out))
    return out


def matmul(tape: Tape | None, a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: (m,k)@(k,n), (m,k)@(k,) or (k,)@(k,n)."""
    av, bv = a.values, b.values
    ok = (
        (av.ndim == 2 and bv.ndim == 2 and av.shape[1] == bv.shape[0])
        or (av.ndim == 2 and bv.ndim == 1 and av.shape[1] == bv.shape[0])
        or (av.ndim == 1 and bv.ndim == 2 and av.shape[0] == bv.shape[0])
    )
    if not ok:
        raise ShapeError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")
    vals = av @ bv

    def fn_factory(out):
        def fn(g):
            if av.ndim == 2 and bv.ndim == 2:
                if a.requires_grad:
                    _accum(a, g @ bv.T)
                if b.requires_grad:
                    _accum(b, av.T @ g)
            elif bv.ndim == 1:  # (m,k)@(k,) -> (m,)
                if a.requires_grad:
                    _accum(a, np.outer(g, bv))
                if b.requires_grad:
                    _accum(b, av.T @ g)
            else:  # (k,)@(k,n) -> (n,)
                if a.requires_grad:
                    _accum(a, bv @ g)
                if b.requires_grad:
                    _accum(b, np.outer(av, g))
        return fn

    return _result(tape, vals, (a, b), fn_factory)


def _binary_shapes(name: str, a: Tensor, b: Tensor) -> None:
    # Same shape, or either side a 0-d scalar.
    if a.shape != b.shape and a.values.ndim != 0 and b.values.ndim != 0:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}")


def add(tape: Tape | None, a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("add", a, b)
    vals = a.values + b.values

    def fn_factory(out):
        def fn(g):
            if a.requires_grad:
                _accum(a, g.sum() if a.values.ndim == 0 and g.ndim != 0 else g)
            if b.requires_grad:
                _accum(b, g.sum() if b.values.ndim == 0 and g.ndim != 0 else g)
        return fn

    return _result(tape, vals, (a, b), fn_factory)


def sub(tape: Tape | None, a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("sub", a, b)
    vals = a.values - b.values

    def fn_factory(out):
        def fn(g):
            if a.requires_grad:
                _accum(a, g.sum() if a.values.ndim == 0 and g.ndim != 0 else g)
            if b.requires_grad:
                _accum(b, -(g.sum()) if b.values.ndim == 0 and g.ndim != 0 else -g)
        return fn

    return _result(tape, vals, (a, b), fn_factory)


def mul(tape: Tape | None, a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("mul", a, b)
    av, bv = a.values, b.values
    vals = av * bv

    def fn_factory(out):
        def fn(g):
            if a.requires_grad:
                d = g * bv
                _accum(a, d.sum() if av.ndim == 0 and d.ndim != 0 else d)
            if b.requires_grad:
                d = g * av
                _accum(b, d.sum() if bv.ndim == 0 and d.ndim != 0 else d)
        return fn

    return _result(tape, vals, (a, b), fn_factory)


def scale(tape: Tape | None, a: Tensor, k: float) -> Tensor:
    k = float(k)
    vals = a.values * k

    def fn_factory(out):
        def fn(g):
            if a.requires_grad:
                _accum(a, g * k)
        return fn

    return _result(tape, vals, (a,), fn_factory)


def activation(tape: Tape | None, x: Tensor, kind: str) -> Tensor:
    """Elementwise tanh or (logistic) sigmoid."""
    if kind == "tanh":
        vals = np.tanh(x.values)

        def fn_factory(out):
            y = out.values

            def fn(g):
                if x.requires_grad:
                    _accum(x, g * (1.0 - y * y))
            return fn

    elif kind == "sigmoid":
        vals = 1.0 / (1.0 + np.exp(-x.values))

        def fn_factory(out):
            y = out.values

            def fn(g):
                if x.requires_grad:
                    _accum(x, g * y * (1.0 - y))
            return fn

    else:
        raise ValueError(f"unknown activation kind: {kind!r}")
    return _result(tape, vals, (x,), fn_factory)


def tanh(tape: Tape | None, x: Tensor) -> Tensor:
    return activation(tape, x, "tanh")


def sigmoid(tape: Tape | None, x: Tensor) -> Tensor:
    return activation(tape, x, "sigmoid")


def _log_softmax_values(x: np.ndarray, axis: int) -> np.ndarray:
    # Max-subtraction keeps exp in range for inputs up to ~1e3 in magnitude.
    m = x.max(axis=axis, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    return z - lse


def log_softmax(tape: Tape | None, x: Tensor, axis: int = -1) -> Tensor:
    vals = _log_softmax_values(x.values, axis)

    def fn_factory(out):
        y = np.exp(out.values)

        def fn(g):
            if x.requires_grad:
                _accum(x, g - y * g.sum(axis=axis, keepdims=True))
        return fn

    return _result(tape, vals, (x,), fn_factory)


def softmax(tape: Tape | None, x: Tensor, axis: int = -1) -> Tensor:
    # exp of the stabilized log-softmax, so both share one numeric path.
    vals = np.exp(_log_softmax_values(x.values, axis))

    def fn_factory(out):
        y = out.values

        def fn(g):
            if x.requires_grad:
                _accum(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))
        return fn

    return _result(tape, vals, (x,), fn_factory)


def maxout(tape: Tape | None, x: Tensor) -> Tensor:
    """Pairwise max over adjacent pairs of the last axis (pool size 2).

    Ties route the full gradient to the lower index.
    """
    n = x.shape[-1]
    if n % 2 != 0:
        raise ShapeError(f"maxout: last extent must be even, got shape {x.shape}")
    pair_shape = x.shape[:-1] + (n // 2, 2)
    xr = x.values.reshape(pair_shape)
    idx = xr.argmax(axis=-1)  # argmax picks the first (lower) index on ties
    vals = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]

    def fn_factory(out):
        def fn(g):
            if x.requires_grad:
                gx = np.zeros(pair_shape)
                np.put_along_axis(gx, idx[..., None], g[..., None], axis=-1)
                _accum(x, gx.reshape(x.shape))
        return fn

    return _result(tape, vals, (x,), fn_factory)


def concat(tape: Tape | None, parts: Iterable[Tensor]) -> Tensor:
    parts = list(parts)
    for p in parts:
        if p.values.ndim != 1:
            raise ShapeError(f"concat: expects 1-D parts, got shape {p.shape}")
    vals = np.concatenate([p.values for p in parts])
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])

    def fn_factory(out):
        def fn(g):
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    _accum(p, g[lo:hi])
        return fn

    return _result(tape, vals, tuple(parts), fn_factory)


def slice1d(tape: Tape | None, x: Tensor, start: int, stop: int) -> Tensor:
    if x.values.ndim != 1 or not (0 <= start <= stop <= x.shape[0]):
        raise ShapeError(f"slice1d: bad range [{start}:{stop}] for shape {x.shape}")
    vals = x.values[start:stop].copy()

    def fn_factory(out):
        def fn(g):
            if x.requires_grad:
                if x.grad is None:
                    x.grad = np.zeros_like(x.values)
                x.grad[start:stop] += g
        return fn

    return _result(tape, vals, (x,), fn_factory)


def index_row(tape: Tape | None, m: Tensor, i: int) -> Tensor:
    """Row lookup (embedding fetch); gradient scatter-adds into the table."""
    if m.values.ndim != 2:
        raise ShapeError(f"index_row: expects a matrix, got shape {m.shape}")
    if not 0 <= i < m.shape[0]:
        raise IndexError(f"row index {i} out of range for shape {m.shape}")
    vals = m.values[i].copy()

    def fn_factory(out):
        def fn(g):
            if m.requires_grad:
                if m.grad is None:
                    m.grad = np.zeros_like(m.values)
                m.grad[i] += g
        return fn

    return _result(tape, vals, (m,), fn_factory)


def stack_rows(tape: Tape | None, rows: Sequence[Tensor]) -> Tensor:
    rows = list(rows)
    if not rows:
        raise ShapeError("stack_rows: need at least one row")
    width = rows[0].shape
    for r in rows:
        if r.values.ndim != 1 or r.shape != width:
            raise ShapeError(f"stack_rows: row shape {r.shape} != {width}")
    vals = np.stack([r.values for r in rows])

    def fn_factory(out):
        def fn(g):
            for j, r in enumerate(rows):
                if r.requires_grad:
                    _accum(r, g[j])
        return fn

    return _result(tape, vals, tuple(rows), fn_factory)


def add_rowvec(tape: Tape | None, m: Tensor, v: Tensor) -> Tensor:
    """Add a vector to every row of a matrix."""
    if m.values.ndim != 2 or v.values.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ShapeError(f"add_rowvec: incompatible shapes {m.shape} and {v.shape}")
    vals = m.values + v.values

    def fn_factory(out):
        def fn(g):
            if m.requires_grad:
                _accum(m, g)
            if v.requires_grad:
                _accum(v, g.sum(axis=0))
        return fn

    return _result(tape, vals, (m, v), fn_factory)


def outer(tape: Tape | None, u: Tensor, v: Tensor) -> Tensor:
    if u.values.ndim != 1 or v.values.ndim != 1:
        raise ShapeError(f"outer: expects vectors, got {u.shape} and {v.shape}")
    uv, vv = u.values, v.values
    vals = np.outer(uv, vv)

    def fn_factory(out):
        def fn(g):
            if u.requires_grad:
                _accum(u, g @ vv)
            if v.requires_grad:
                _accum(v, uv @ g)
        return fn

    return _result(tape, vals, (u, v), fn_factory)


def lstm_cell(
    tape: Tape | None,
    x: Tensor,
    h_prev: Tensor,
    c_prev: Tensor,
    w: Tensor,
    b: Tensor,
) -> tuple[Tensor, Tensor]:
    """One LSTM step with fused gate weights.

    ``w`` has shape (dx+dh, 4*dh) and ``b`` shape (4*dh,), gate order
    input, forget, candidate, output. Returns (h, cell).
    """
    dh = h_prev.shape[0]
    dx = x.shape[0]
    if w.shape != (dx + dh, 4 * dh) or b.shape != (4 * dh,) or c_prev.shape != (dh,):
        raise ShapeError(
            f"lstm_cell: widths inconsistent: x{x.shape} h{h_prev.shape} "
            f"c{c_prev.shape} w{w.shape} b{b.shape}"
        )
    inp = concat(tape, [x, h_prev])
    pre = add(tape, matmul(tape, inp, w), b)
    gi = sigmoid(tape, slice1d(tape, pre, 0, dh))
    gf = sigmoid(tape, slice1d(tape, pre, dh, 2 * dh))
    gc = tanh(tape, slice1d(tape, pre, 2 * dh, 3 * dh))
    go = sigmoid(tape, slice1d(tape, pre, 3 * dh, 4 * dh))
    cell = add(tape, mul(tape, gf, c_prev), mul(tape, gi, gc))
    h = mul(tape, go, tanh(tape, cell))
    return h, cell


def cross_entropy(tape: Tape | None, logprobs: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean negative log-probability of the targets; exp(loss) is perplexity."""
    lp = logprobs.values
    if lp.ndim != 2:
        raise ShapeError(f"cross_entropy: expects (n, V) log-probs, got {logprobs.shape}")
    n, v = lp.shape
    t = np.asarray(list(targets), dtype=np.int64)
    if t.shape != (n,):
        raise ShapeError(f"cross_entropy: {len(t)} targets for {n} rows")
    if t.size and (t.min() < 0 or t.max() >= v):
        raise IndexError(f"target id out of range [0, {v}) in {t.tolist()}")
    rows = np.arange(n)
    vals = np.asarray(-lp[rows, t].mean())

    def fn_factory(out):
        def fn(g):
            if logprobs.requires_grad:
                if logprobs.grad is None:
                    logprobs.grad = np.zeros_like(lp)
                logprobs.grad[rows, t] -= float(g) / n
        return fn

    return _result(tape, vals, (logprobs,), fn_factory)

"""Dense real tensors with reverse-mode automatic differentiation.

A ``Tape`` records operations as they execute; ``backward`` replays the
record in reverse to accumulate gradients. Tensors that are not attached
to a tape are plain immutable values, so evaluation-mode forward passes
cost nothing extra. One tape is a single-writer structure: never record
onto the same tape from two threads; independent workers each get their
own tape.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
_F32 = np.dtype(np.float32)
_F64 = np.dtype(np.float64)


class ShapeError(ValueError):
    """Operand shapes (or ranks) are incompatible with the operation."""


class MaskError(ValueError):
    """A mask leaves no entry for a group that must be normalized or pooled."""


class TapeError(RuntimeError):
    """Tensor/tape wiring is wrong (detached loss, mixed tapes, ...)."""


class Tensor:
    """N-dimensional real array, optionally attached to a tape node.

    ``data`` is a numpy array (float32 by default, float64 in gradient-check
    mode). ``requires_grad`` marks trainable leaves; a tensor with
    ``requires_grad=False`` never accumulates a gradient. ``tape``/``node``
    are set once the tensor is recorded on a tape.
    """

    __slots__ = ("data", "requires_grad", "tape", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None and type(data) is np.ndarray:
            dt = data.dtype
            self.data = data if (dt == _F32 or dt == _F64) else data.astype(DEFAULT_DTYPE)
        elif dtype is not None:
            self.data = np.asarray(data, dtype=dtype)
        elif isinstance(data, np.generic):
            arr = np.asarray(data)
            self.data = arr if arr.dtype in (_F32, _F64) else arr.astype(DEFAULT_DTYPE)
        else:
            self.data = np.asarray(data, dtype=DEFAULT_DTYPE)
        self.requires_grad = requires_grad
        self.tape: Tape | None = None
        self.node: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class _Node:
    """One recorded operation: parent handles plus per-parent gradient rules."""

    __slots__ = ("parents", "grad_fns", "shape")

    def __init__(self, parents: tuple[int, ...], grad_fns, shape):
        self.parents = parents
        self.grad_fns = grad_fns
        self.shape = shape


class Tape:
    """Append-only record of operations; parents always precede children."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def watch(self, t: Tensor) -> Tensor:
        """Register ``t`` as a leaf on this tape so gradients reach it."""
        if not t.requires_grad:
            raise TapeError("cannot watch a tensor with requires_grad=False")
        if t.tape is self:
            return t
        if t.tape is not None:
            raise TapeError("tensor is already recorded on a different tape")
        t.tape = self
        t.node = self._append(_Node((), (), t.data.shape))
        return t

    def _append(self, node: _Node) -> int:
        self._nodes.append(node)
        return len(self._nodes) - 1

    def backward(self, loss: Tensor) -> "GradientMap":
        """Reverse-accumulate gradients of a scalar loss over this tape."""
        if loss.data.ndim != 0:
            raise ShapeError(f"loss must be a scalar, got shape {loss.data.shape}")
        if loss.tape is not self or loss.node is None:
            raise TapeError("loss is not recorded on this tape")
        slots: dict[int, np.ndarray] = {loss.node: np.ones((), dtype=loss.data.dtype)}
        for idx in range(loss.node, -1, -1):
            grad = slots.get(idx)
            if grad is None:
                continue
            node = self._nodes[idx]
            for parent, fn in zip(node.parents, node.grad_fns):
                g = fn(grad)
                if g is None:
                    continue
                pshape = self._nodes[parent].shape
                if g.shape != pshape:
                    raise TapeError(
                        f"gradient shape {g.shape} does not match node shape {pshape}"
                    )
                if parent in slots:
                    slots[parent] = slots[parent] + g
                else:
                    slots[parent] = g
        return GradientMap(self, slots)


class GradientMap:
    """Gradients keyed by tape node, addressable by the tensors themselves."""

    def __init__(self, tape: Tape, slots: dict[int, np.ndarray]):
        self._tape = tape
        self._slots = slots

    def __contains__(self, t: Tensor) -> bool:
        return t.tape is self._tape and t.node in self._slots

    def __getitem__(self, t: Tensor) -> np.ndarray:
        if t.tape is not self._tape or t.node is None:
            raise TapeError("tensor is not recorded on the tape this map came from")
        return self._slots[t.node]

    def get(self, t: Tensor, default=None):
        return self[t] if t in self else default


def backward(loss: Tensor, tape: Tape) -> GradientMap:
    """Accumulate gradients of the scalar ``loss`` for every reachable leaf."""
    return tape.backward(loss)


def _find_tape(inputs: Sequence[Tensor]) -> Tape | None:
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise TapeError("operands are recorded on different tapes")
    return tape


def _record(out: Tensor, inputs: Sequence[Tensor], grad_fns: Sequence[Callable | None]) -> Tensor:
    """Record an op if any input lives on a tape; lazily watch grad leaves."""
    tape = _find_tape(inputs)
    if tape is None:
        return out
    for t in inputs:
        if t.requires_grad and t.node is None:
            tape.watch(t)
    parents = []
    fns = []
    for t, fn in zip(inputs, grad_fns):
        if t.node is not None and fn is not None:
            parents.append(t.node)
            fns.append(fn)
    out.requires_grad = True
    out.tape = tape
    out.node = tape._append(_Node(tuple(parents), tuple(fns), out.data.shape))
    return out


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)
    ad, bd = a.data, b.data
    return _record(out, (a, b), (lambda g: g @ bd.T, lambda g: ad.T @ g))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; a rank-1 ``b`` broadcasts as a bias over rows of ``a``."""
    if a.shape == b.shape:
        out = Tensor(a.data + b.data)
        return _record(out, (a, b), (lambda g: g, lambda g: g))
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        out = Tensor(a.data + b.data)
        return _record(out, (a, b), (lambda g: g, lambda g: g.sum(axis=0)))
    raise ShapeError(f"add: incompatible shapes {a.shape} + {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: incompatible shapes {a.shape} - {b.shape}")
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), (lambda g: g, lambda g: -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product of same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} * {b.shape}")
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data
    return _record(out, (a, b), (lambda g: g * bd, lambda g: g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a non-trainable scalar constant."""
    out = Tensor(a.data * a.data.dtype.type(c))
    return _record(out, (a,), (lambda g: g * a.data.dtype.type(c),))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along ``axis`` (last axis by default; axis 0 stacks rows)."""
    parts = list(parts)
    if not parts:
        raise ShapeError("concat: need at least one part")
    ndim = parts[0].data.ndim
    ax = axis if axis >= 0 else ndim + axis
    if not 0 <= ax < ndim:
        raise ShapeError(f"concat: axis {axis} out of range for rank {ndim}")
    for p in parts[1:]:
        if p.data.ndim != ndim:
            raise ShapeError(
                f"concat: rank mismatch {parts[0].shape} vs {p.shape}"
            )
        for d in range(ndim):
            if d != ax and p.shape[d] != parts[0].shape[d]:
                raise ShapeError(
                    f"concat: incompatible shapes {parts[0].shape} vs {p.shape}"
                )
    out = Tensor(np.concatenate([p.data for p in parts], axis=ax))
    sizes = [p.shape[ax] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_fn(i):
        lo, hi = offsets[i], offsets[i + 1]

        def fn(g):
            index = [slice(None)] * ndim
            index[ax] = slice(lo, hi)
            return g[tuple(index)]

        return fn

    return _record(out, parts, tuple(make_fn(i) for i in range(len(parts))))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(a.shape, dtype=np.int64)) != int(np.prod(shape, dtype=np.int64)):
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}")
    in_shape = a.shape
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), (lambda g: g.reshape(in_shape),))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected rank 2, got shape {a.shape}")
    out = Tensor(a.data.T.copy())
    return _record(out, (a,), (lambda g: g.T,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    y = y.astype(x.dtype)
    out = Tensor(y)
    return _record(out, (a,), (lambda g: g * y * (1.0 - y),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor(y)
    return _record(out, (a,), (lambda g: g * (1.0 - y * y),))


def log(a: Tensor, floor: float | None = None) -> Tensor:
    """Natural log; with ``floor`` the input is clamped below at ``floor``.

    In the clamped region the gradient is zero, consistent with the
    clamped forward value.
    """
    x = a.data
    if floor is not None:
        clamped = np.maximum(x, x.dtype.type(floor))
        active = x >= floor
    else:
        clamped = x
        active = None
    out = Tensor(np.log(clamped))

    def fn(g):
        base = g / clamped
        return base if active is None else base * active

    return _record(out, (a,), (fn,))


def dropout(a: Tensor, rate: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: scales survivors by 1/(1-rate); identity in eval mode."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(a.shape) >= rate).astype(a.data.dtype)
    factor = keep / a.data.dtype.type(1.0 - rate)
    out = Tensor(a.data * factor)
    return _record(out, (a,), (lambda g: g * factor,))


def _prepare_mask(mask, shape, axis):
    m = np.asarray(mask)
    if m.dtype != np.bool_:
        raise ShapeError("mask must be boolean")
    if m.shape == shape:
        return m
    if m.ndim == 1 and m.shape[0] == shape[axis] and axis == len(shape) - 1:
        return np.broadcast_to(m, shape)
    raise ShapeError(f"mask shape {m.shape} does not fit tensor shape {shape}")


def softmax(a: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Normalized exponentials along ``axis``, computed with max-subtraction.

    ``mask`` marks entries to keep (True); masked positions come out exactly
    zero and each unmasked group sums to one. A fully masked group is an
    error rather than a NaN.
    """
    x = a.data
    ax = axis if axis >= 0 else x.ndim + axis
    if not 0 <= ax < x.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for shape {x.shape}")
    if mask is not None:
        m = _prepare_mask(mask, x.shape, ax)
        if not m.any(axis=ax).all():
            raise MaskError("softmax: a group is fully masked")
        neg = np.array(-np.inf, dtype=x.dtype)
        shifted = np.where(m, x, neg) - np.where(m, x, neg).max(axis=ax, keepdims=True)
        e = np.where(m, np.exp(np.where(m, shifted, 0.0)), 0.0).astype(x.dtype)
    else:
        shifted = x - x.max(axis=ax, keepdims=True)
        e = np.exp(shifted)
    y = e / e.sum(axis=ax, keepdims=True)
    out = Tensor(y)

    def fn(g):
        return y * (g - (g * y).sum(axis=ax, keepdims=True))

    return _record(out, (a,), (fn,))


def mean_pool(a: Tensor, mask=None) -> Tensor:
    """Arithmetic mean over the rows of a rank-2 tensor, skipping masked rows."""
    if a.data.ndim != 2:
        raise ShapeError(f"mean_pool: expected rank 2, got shape {a.shape}")
    n = a.shape[0]
    if mask is not None:
        m = np.asarray(mask)
        if m.dtype != np.bool_ or m.shape != (n,):
            raise ShapeError(f"mean_pool: mask must be boolean of shape ({n},)")
        count = int(m.sum())
        if count == 0:
            raise MaskError("mean_pool: every row is masked")
        weights = m.astype(a.data.dtype) / a.data.dtype.type(count)
    else:
        weights = np.full(n, 1.0 / n, dtype=a.data.dtype)
    out = Tensor(weights @ a.data)
    return _record(out, (a,), (lambda g: np.outer(weights, g),))


def sum_all(a: Tensor) -> Tensor:
    """Sum of every element, as a scalar tensor."""
    out = Tensor(a.data.sum())
    shape, dtype = a.shape, a.data.dtype
    return _record(out, (a,), (lambda g: np.full(shape, g, dtype=dtype),))


def sum_squares(parts: Sequence[Tensor]) -> Tensor:
    """Sum of squared elements over a list of tensors, as one scalar node."""
    parts = list(parts)
    if not parts:
        raise ShapeError("sum_squares: need at least one tensor")
    total = 0.0
    for p in parts:
        total += (p.data * p.data).sum()
    out = Tensor(np.asarray(total, dtype=parts[0].data.dtype))

    def make_fn(p):
        return lambda g: g * 2.0 * p.data

    return _record(out, parts, tuple(make_fn(p) for p in parts))


def take_row(a: Tensor, i: int) -> Tensor:
    """Row ``i`` of a rank-2 tensor, kept as a 1 x d matrix."""
    if a.data.ndim != 2:
        raise ShapeError(f"take_row: expected rank 2, got shape {a.shape}")
    if not 0 <= i < a.shape[0]:
        raise ShapeError(f"take_row: row {i} out of range for shape {a.shape}")
    out = Tensor(a.data[i : i + 1].copy())

    def fn(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[i : i + 1] = g
        return full

    return _record(out, (a,), (fn,))


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    """Column slice [start, stop) of a rank-2 tensor."""
    if a.data.ndim != 2:
        raise ShapeError(f"slice_cols: expected rank 2, got shape {a.shape}")
    if not 0 <= start < stop <= a.shape[1]:
        raise ShapeError(f"slice_cols: [{start}, {stop}) out of range for shape {a.shape}")
    out = Tensor(a.data[:, start:stop].copy())

    def fn(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[:, start:stop] = g
        return full

    return _record(out, (a,), (fn,))


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` by integer id; gradients scatter-add back."""
    if table.data.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be rank 2, got {table.shape}")
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("embedding_lookup: ids must be a flat index list")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding_lookup: id out of range for table with {table.shape[0]} rows"
        )
    out = Tensor(table.data[idx])

    def fn(g):
        full = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return full

    return _record(out, (table,), (fn,))


def squash_rows(a: Tensor) -> Tensor:
    """Capsule squash per row: v = (|s|^2 / (1 + |s|^2)) * s / |s|.

    Output row norms lie in [0, 1) and directions are preserved; a zero
    input row maps to a zero output row (with zero gradient there).
    """
    if a.data.ndim != 2:
        raise ShapeError(f"squash_rows: expected rank 2, got shape {a.shape}")
    s = a.data
    u = (s * s).sum(axis=1, keepdims=True)
    nonzero = u > 0
    safe_u = np.where(nonzero, u, 1.0)
    coef = np.where(nonzero, np.sqrt(safe_u) / (1.0 + safe_u), 0.0).astype(s.dtype)
    out = Tensor(coef * s)

    # d(coef)/d(u) for the chain through u = |s|^2
    dcoef = np.where(
        nonzero, (1.0 - safe_u) / (2.0 * np.sqrt(safe_u) * (1.0 + safe_u) ** 2), 0.0
    ).astype(s.dtype)

    def fn(g):
        inner = (g * s).sum(axis=1, keepdims=True)
        return coef * g + 2.0 * dcoef * inner * s

    return _record(out, (a,), (fn,))

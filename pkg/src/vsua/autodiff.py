"""Small reverse-mode autodiff over numpy arrays.

Every primitive returns a new :class:`Tensor`.  When a :class:`Tape` is
active and at least one input requires a gradient, the primitive appends a
record to the tape; :func:`backward` walks the records in reverse.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = tsum(x * x)
    >>> backward(tape, loss)[x]
    array([2., 4.])
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "backward", "finite_diff_check",
    "matmul", "add", "mul", "scale", "concat", "stack", "tanh", "sigmoid",
    "relu", "softmax", "log_softmax", "mean", "tsum", "embedding", "take_rows",
    "dropout", "reshape", "slice_last", "pick"
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for a primitive."""


_ACTIVE: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind not in "fc":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of executed primitives.

    Use as a context manager; records appended inside the block belong to
    this tape.  ``clear()`` drops them so the tape can be reused next step.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, inputs: tuple[Tensor, ...], grad_fn: Callable) -> Tensor:
    # grad_fn maps d(out) to a tuple of d(input) (None where not needed)
    if _ACTIVE and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE[-1].records.append((out, inputs, grad_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# primitives

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """numpy-style matmul of operands with at least 2 dims; batch dims broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, (a, b), grad_fn)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)
    out = Tensor(a.data + b.data)
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)
    out = Tensor(a.data * b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                           _unbroadcast(g * a.data, b.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data * c)
    return _record(out, (x,), lambda g: (g * c,))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along the last axis (other axes must agree)."""
    xs = [_as_tensor(x) for x in xs]
    lead = {x.shape[:-1] for x in xs}
    if len(lead) != 1:
        raise ShapeError(f"concat: leading shapes differ {[x.shape for x in xs]}")
    out = Tensor(np.concatenate([x.data for x in xs], axis=-1))
    bounds = np.cumsum([0] + [x.shape[-1] for x in xs])

    def grad_fn(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return _record(out, tuple(xs), grad_fn)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    if len({x.shape for x in xs}) != 1:
        raise ShapeError(f"stack: shapes differ {[x.shape for x in xs]}")
    out = Tensor(np.stack([x.data for x in xs], axis=axis))

    def grad_fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return _record(out, tuple(xs), grad_fn)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _record(Tensor(y), (x,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _record(Tensor(y), (x,), lambda g: (g * y * (1.0 - y),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _record(Tensor(np.where(pos, x.data, 0.0)), (x,), lambda g: (g * pos,))


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` (broadcastable, truthy = keep) zeroes excluded entries; a row
    with nothing kept yields all zeros instead of NaN.
    """
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        z = np.where(mask, z, -np.inf)
    m = np.max(z, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(z - m)
    s = e.sum(axis=-1, keepdims=True)
    y = np.divide(e, s, out=np.zeros_like(e), where=s > 0)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record(Tensor(y), (x,), grad_fn)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data
    m = z.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))
    y = z - lse

    def grad_fn(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _record(Tensor(y), (x,), grad_fn)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    out = Tensor(np.mean(x.data, axis=axis))

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape) / n,)

    return _record(out, (x,), grad_fn)


def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    out = Tensor(np.sum(x.data, axis=axis))

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(out, (x,), grad_fn)


def take_rows(table: Tensor, idx) -> Tensor:
    """Gather rows of a 2-D table; ``idx`` may have any integer shape."""
    idx = np.asarray(idx, dtype=np.intp)
    if table.ndim != 2:
        raise ShapeError(f"take_rows: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"take_rows: index out of range for {table.shape[0]} rows")
    out = Tensor(table.data[idx])

    def grad_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _record(out, (table,), grad_fn)


embedding = take_rows


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; the exact identity when not training or ``p == 0``."""
    if not train or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _record(Tensor(x.data * keep), (x,), lambda g: (g * keep,))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = Tensor(x.data.reshape(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    return _record(out, (x,), lambda g: (g.reshape(x.shape),))


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor(x.data[..., start:stop])

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        gx[..., start:stop] = g
        return (gx,)

    return _record(out, (x,), grad_fn)


def pick(x: Tensor, idx) -> Tensor:
    """``x[..., idx]`` per leading position: (..., V) with int (...) -> (...)."""
    idx = np.asarray(idx, dtype=np.intp)
    if idx.shape != x.shape[:-1]:
        raise ShapeError(f"pick: index shape {idx.shape} vs tensor {x.shape}")
    out = Tensor(np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0])

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=-1)
        return (gx,)

    return _record(out, (x,), grad_fn)


# ---------------------------------------------------------------------------

def backward(tape: Tape, loss: Tensor, params: Sequence[Tensor] | None = None
             ) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss) back through ``tape``.

    Returns a map from every tensor that requires grad (plus everything in
    ``params``) to its gradient; tensors the loss does not reach get zeros.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for out, inputs, grad_fn in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, gi in zip(inputs, grad_fn(g)):
            if not t.requires_grad or gi is None:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.array(gi, dtype=t.data.dtype)
            leaves.setdefault(key, t)
    result: dict[Tensor, np.ndarray] = {}
    for key, t in leaves.items():
        if key in grads:
            result[t] = grads[key]
    for p in params or ():
        if p not in result:
            result[p] = np.zeros_like(p.data)
    return result


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor],
                      eps: float = 1e-5, max_coords: int | None = None,
                      rng: np.random.Generator | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` must be deterministic and read ``params`` afresh on every call.
    ``max_coords`` optionally subsamples coordinates per parameter.  Values
    keep the parameters' dtype, so an extended-precision model yields an
    extended-precision difference quotient.
    """
    with Tape() as tape:
        loss = f()
    g_ad = backward(tape, loss, params)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        if not np.shares_memory(flat, p.data):
            raise ValueError(f"finite_diff_check: parameter {p!r} is not contiguous")
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            rng = rng or np.random.default_rng(0)
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        ga = g_ad[p].reshape(-1)
        for i in coords:
            old = flat[i]
            flat[i] = old + eps
            fp = f().data[()]
            flat[i] = old - eps
            fm = f().data[()]
            flat[i] = old
            gf = (fp - fm) / (2 * eps)
            err = abs(ga[i] - gf) / max(1e-8, abs(ga[i]) + abs(gf))
            worst = max(worst, float(err))
    return worst

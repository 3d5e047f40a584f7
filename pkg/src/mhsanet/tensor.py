"""Minimal dense tensor engine with tape-based reverse-mode autodiff.

All values are float64 numpy arrays. Operations executed while a :class:`Tape`
is active (and with at least one input requiring gradients) are recorded in
execution order; :func:`backward` replays them in exact reverse order and
accumulates gradients into every leaf that requires them.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "NumericError",
    "ContractError",
    "Tensor",
    "Tape",
    "tensor",
    "backward",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "matmul",
    "transpose",
    "permute",
    "reshape",
    "repeat_rows",
    "concat",
    "sum",
    "mean",
    "relu",
    "square",
    "softmax_rows",
    "log_softmax",
    "layer_norm",
    "batch_norm",
    "l2_normalize_rows",
    "pairwise_sq_dist",
    "minimum_const",
    "frobenius_norm",
    "masked_max",
    "masked_min",
    "sqrt",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A NaN or Inf was produced or supplied."""


class ContractError(RuntimeError):
    """An API precondition was violated (e.g. non-scalar loss)."""


class Tensor:
    """A float64 array that may participate in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite value in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations run inside the ``with`` block are
    recorded if any input requires gradients.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self.nodes: list[_Node] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    @classmethod
    def current(cls) -> "Tape | None":
        return cls._stack[-1] if cls._stack else None

    def record(self, op, inputs, output, backward_fn) -> None:
        self.nodes.append(_Node(op, inputs, output, backward_fn))
        self._produced.add(id(output))

    def owns(self, t: Tensor) -> bool:
        return id(t) in self._produced


@contextlib.contextmanager
def no_tape():
    """Temporarily suspend recording."""
    saved = Tape._stack[:]
    Tape._stack.clear()
    try:
        yield
    finally:
        Tape._stack.extend(saved)


# Hook used by the gradient-check self test: maps op name -> callable that
# receives and returns the list of input gradients of that op.
_GRAD_HOOKS: dict[str, Callable[[list], list]] = {}


def _make(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    if not np.all(np.isfinite(out_data)):
        raise NumericError(f"{op} produced a non-finite value")
    needs = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.name = None
    tape = Tape.current()
    out.requires_grad = needs and tape is not None
    if out.requires_grad:
        tape.record(op, tuple(inputs), out, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss: Tensor, tape: Tape | None = None, params: Iterable[Tensor] = ()) -> dict[int, np.ndarray]:
    """Backpropagate a scalar loss through ``tape``.

    Gradients are added to ``.grad`` of every leaf tensor that requires them.
    Tensors in ``params`` that the loss does not reach get a zero gradient.
    Returns the mapping ``id(tensor) -> gradient`` for the leaves reached.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        tape = Tape.current()
    grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    if tape is not None and tape.owns(loss):
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(tape.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward_fn(g)
            hook = _GRAD_HOOKS.get(node.op)
            if hook is not None:
                in_grads = hook(list(in_grads))
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                gi = _unbroadcast(np.asarray(gi, dtype=np.float64), t.shape)
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if not tape.owns(t):
                    leaves[key] = t
    elif loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        leaves[id(loss)] = loss
    for key, t in leaves.items():
        g = grads[key]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {t.name or 'tensor'}")
        t.grad = g.copy() if t.grad is None else t.grad + g
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    return grads


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make("square", ad * ad, (a,), lambda g: (2.0 * g * ad,))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError("sqrt of a non-positive value")
    out = np.sqrt(a.data)
    return _make("sqrt", out, (a,), lambda g: (g / (2.0 * out),))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make("relu", np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def minimum_const(a: Tensor, c: float) -> Tensor:
    """Elementwise ``min(a, c)``; gradient flows only where ``a < c``."""
    below = a.data < c
    return _make("minimum_const", np.minimum(a.data, c), (a,), lambda g: (g * below,))


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    ad, bd = a.data, b.data

    def bw(g):
        return (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g)

    return _make("matmul", ad @ bd, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise DimensionError(f"transpose needs rank >= 2, got {a.shape}")
    return _make("transpose", np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make("permute", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(src),))


def repeat_rows(a: Tensor, n: int) -> Tensor:
    """Broadcast a ``(..., D)`` tensor to ``(..., n, D)``."""
    out = np.repeat(a.data[..., None, :], n, axis=-2)
    return _make("repeat_rows", out, (a,), lambda g: (g.sum(axis=-2),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    return _make("concat", out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


# ---------------------------------------------------------------- reductions


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make("sum", a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape
    n = a.data.size if axis is None else int(np.prod([src[i] for i in np.atleast_1d(axis)]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src) / n,)

    return _make("mean", a.data.mean(axis=axis, keepdims=keepdims), (a,), bw)


def _masked_extreme(a: Tensor, mask: np.ndarray, axis: int, largest: bool, op: str) -> Tensor:
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    if not np.all(mask.any(axis=axis)):
        raise ContractError(f"{op}: a slice has no admissible entries")
    fill = -np.inf if largest else np.inf
    work = np.where(mask, a.data, fill)
    idx = np.argmax(work, axis=axis) if largest else np.argmin(work, axis=axis)
    out = np.take_along_axis(work, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
    src = a.shape

    def bw(g):
        full = np.zeros(src)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _make(op, out, (a,), bw)


def masked_max(a: Tensor, mask, axis: int = -1) -> Tensor:
    """Max over ``axis`` restricted to ``mask``; gradient goes to the first argmax."""
    return _masked_extreme(a, mask, axis, True, "masked_max")


def masked_min(a: Tensor, mask, axis: int = -1) -> Tensor:
    """Min over ``axis`` restricted to ``mask``; gradient goes to the first argmin."""
    return _masked_extreme(a, mask, axis, False, "masked_min")


def frobenius_norm(a: Tensor) -> Tensor:
    """Frobenius norm over the last two axes; the subgradient at a zero matrix is 0."""
    ad = a.data
    out = np.sqrt((ad * ad).sum(axis=(-2, -1)))
    safe = np.where(out > 0, out, 1.0)

    def bw(g):
        return (ad * np.where(out > 0, g / safe, 0.0)[..., None, None],)

    return _make("frobenius_norm", out, (a,), bw)


# ---------------------------------------------------------------- normalizations


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    if a.shape[-1] < 1:
        raise DimensionError("softmax over an empty axis")
    if not np.all(np.isfinite(a.data)):
        raise NumericError("softmax_rows: non-finite input")
    e = np.exp(a.data - a.data.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make("softmax_rows", s, (a,), bw)


def log_softmax(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    s = np.exp(out)

    def bw(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return _make("log_softmax", out, (a,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each last-axis slice with population variance, then affine."""
    d = x.shape[-1]
    if d < 2:
        raise DimensionError(f"layer_norm needs last dimension >= 2, got {d}")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs D={d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    if eps <= 0 and np.any(var == 0):
        raise NumericError("layer_norm: zero variance with eps=0")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def bw(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return (dx, (g * xhat).sum(axis=lead), g.sum(axis=lead))

    return _make("layer_norm", xhat * gd + bias.data, (x, gain, bias), bw)


def batch_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each column of a ``B x D`` batch with batch statistics, then affine."""
    if x.ndim != 2:
        raise DimensionError(f"batch_norm expects a B x D batch, got {x.shape}")
    d = x.shape[1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"batch_norm: gain/bias {gain.shape}/{bias.shape} vs D={d}")
    mu = x.data.mean(axis=0)
    xc = x.data - mu
    var = (xc * xc).mean(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def bw(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=0) - xhat * (gx * xhat).mean(axis=0))
        return (dx, (g * xhat).sum(axis=0), g.sum(axis=0))

    return _make("batch_norm", xhat * gd + bias.data, (x, gain, bias), bw)


def l2_normalize_rows(a: Tensor) -> Tensor:
    """Scale each last-axis slice to unit L2 norm."""
    norms = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    if np.any(norms == 0):
        raise NumericError("l2_normalize_rows: zero row")
    u = a.data / norms

    def bw(g):
        return ((g - u * (g * u).sum(axis=-1, keepdims=True)) / norms,)

    return _make("l2_normalize_rows", u, (a,), bw)


def pairwise_sq_dist(a: Tensor, b: Tensor) -> Tensor:
    """``d[..., i, j] = ||a[..., i, :] - b[..., j, :]||^2``."""
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"pairwise_sq_dist: feature dims {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    diff = ad[..., :, None, :] - bd[..., None, :, :]
    out = (diff * diff).sum(axis=-1)

    def bw(g):
        w = 2.0 * g[..., None] * diff
        return (w.sum(axis=-2), -w.sum(axis=-3))

    return _make("pairwise_sq_dist", out, (a, b), bw)

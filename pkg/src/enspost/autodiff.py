"""Small reverse-mode differentiation engine over numpy arrays.

Only the operations needed by the ensemble transformer and its CRPS losses
are provided. Recording happens on a :class:`Tape`; every operation executed
while a tape is active and touching a watched tensor is appended to it, and
:meth:`Tape.gradient` replays the records backwards exactly once.

Example
-------
>>> x = Tensor([1.0, 2.0])
>>> with Tape() as tape:
...     tape.watch(x)
...     loss = (x * x).sum()
>>> tape.gradient(loss, [x])[0]
array([2., 4.])
"""

from __future__ import annotations

import contextvars
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtr

__all__ = [
    "Tensor",
    "Tape",
    "TapeError",
    "NonFiniteError",
    "AdamState",
    "adam_step",
    "contract",
    "softmax",
    "layer_normalize",
    "gelu",
    "reshape",
    "transpose",
    "abs_",
    "relu",
    "sqrt",
    "custom_op",
]

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "enspost_active_tape", default=None
)


class TapeError(RuntimeError):
    """Raised on misuse of a recording tape."""


class NonFiniteError(FloatingPointError):
    """Raised when NaN or Inf shows up in an activation."""


class Tensor:
    """Immutable n-dimensional float array that can take part in recording."""

    __slots__ = ("data",)
    __array_priority__ = 100

    def __init__(self, data, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        arr.setflags(write=False)
        self.data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr)
        if not arr.flags.c_contiguous:
            arr = arr.copy()
        arr.setflags(write=False)
        t.data = arr
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return _add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return _sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return _sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return _mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _div(self, _as_tensor(other, self.dtype))

    def __rtruediv__(self, other):
        return _div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return _mul(self, _as_tensor(-1.0, self.dtype))

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else int(np.prod([self.shape[a] for a in _axes(axis, self.ndim)]))
        return _sum(self, axis, keepdims) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------


@dataclass
class _Record:
    out: int
    inputs: tuple[int | None, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Single-use record of a forward pass.

    Use as a context manager, :meth:`watch` the leaves to differentiate, then
    call :meth:`gradient` once.
    """

    def __init__(self):
        self._slot_of: dict[int, int] = {}
        self._keep: list[Tensor] = []
        self._records: list[_Record] = []
        self._token = None
        self._consumed = False

    def __enter__(self) -> "Tape":
        if self._consumed:
            raise TapeError("tape already consumed")
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def watch(self, tensor: Tensor) -> Tensor:
        if self._consumed:
            raise TapeError("tape already consumed")
        self._slot(tensor)
        return tensor

    def is_tracked(self, tensor: Tensor) -> bool:
        return id(tensor) in self._slot_of

    def _slot(self, tensor: Tensor) -> int:
        key = id(tensor)
        slot = self._slot_of.get(key)
        if slot is None:
            slot = len(self._keep)
            self._slot_of[key] = slot
            self._keep.append(tensor)
        return slot

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward) -> None:
        slots = tuple(self._slot_of.get(id(t)) for t in inputs)
        if all(s is None for s in slots):
            return
        self._records.append(_Record(self._slot(out), slots, backward))

    def gradient(self, loss: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of scalar ``loss`` with respect to each of ``sources``.

        Sources that do not influence the loss get zero gradients.
        """
        if self._consumed:
            raise TapeError("tape already consumed; record a new forward pass")
        if loss.data.size != 1:
            raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
        self._consumed = True
        grads: list[np.ndarray | None] = [None] * len(self._keep)
        loss_slot = self._slot_of.get(id(loss))
        if loss_slot is not None:
            grads[loss_slot] = np.ones_like(loss.data)
        for rec in reversed(self._records):
            g = grads[rec.out]
            if g is None:
                continue
            parts = rec.backward(g)
            for slot, part in zip(rec.inputs, parts):
                if slot is None or part is None:
                    continue
                if grads[slot] is None:
                    grads[slot] = part
                else:
                    grads[slot] = grads[slot] + part
        out = []
        for src in sources:
            slot = self._slot_of.get(id(src))
            g = grads[slot] if slot is not None else None
            out.append(np.zeros_like(src.data) if g is None else np.asarray(g, dtype=src.dtype).reshape(src.shape))
        self._records.clear()
        return out


def _emit(arr: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    out = Tensor._wrap(arr)
    tape = _ACTIVE_TAPE.get()
    if tape is not None:
        tape.record(out, inputs, backward)
    return out


def custom_op(value: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    """Register a fused operation.

    ``backward(g)`` receives the upstream gradient and returns one array (or
    None) per entry of ``inputs``.
    """
    return _emit(np.asarray(value), inputs, backward)


# ---------------------------------------------------------------------------
# elementwise and structural operations
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _add(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def _sub(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def _mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    return _emit(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def _div(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    out = ad / bd
    return _emit(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def _sum(a: Tensor, axis, keepdims: bool) -> Tensor:
    shape = a.shape
    axes = _axes(axis, a.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _emit(a.data.sum(axis=axes, keepdims=keepdims), (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def abs_(a: Tensor) -> Tensor:
    # sign(0) == 0 is the subgradient used at the kink
    sgn = np.sign(a.data)
    return _emit(np.abs(a.data), (a,), lambda g: (g * sgn,))


def relu(a: Tensor) -> Tensor:
    mask = (a.data > 0).astype(a.dtype)
    return _emit(a.data * mask, (a,), lambda g: (g * mask,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _emit(out, (a,), lambda g: (g * 0.5 / out,))


# ---------------------------------------------------------------------------
# contraction
# ---------------------------------------------------------------------------


def _parse_spec(spec: str) -> tuple[str, str, str]:
    try:
        lhs, out = spec.replace(" ", "").split("->")
        sa, sb = lhs.split(",")
    except ValueError:
        raise ValueError(f"contraction spec must look like 'ij,jk->ik', got {spec!r}") from None
    for name, sub in (("first", sa), ("second", sb), ("output", out)):
        if len(set(sub)) != len(sub):
            raise ValueError(f"repeated axis label in {name} operand of {spec!r}")
    for label in out:
        if label not in sa and label not in sb:
            raise ValueError(f"output axis {label!r} does not appear in any operand of {spec!r}")
    for sub, other in ((sa, sb), (sb, sa)):
        for label in sub:
            if label not in other and label not in out:
                raise ValueError(
                    f"axis {label!r} of {spec!r} is neither paired nor kept; sum it explicitly"
                )
    return sa, sb, out


def _pair_product(sa: str, sb: str, so: str, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Two-operand einsum lowered onto one batched matmul."""
    batch = [c for c in so if c in sa and c in sb]
    summed = [c for c in sa if c in sb and c not in so]
    free_a = [c for c in sa if c not in sb]
    free_b = [c for c in sb if c not in sa]
    ext = dict(zip(sa, x.shape))
    ext.update(zip(sb, y.shape))
    size = lambda labels: int(np.prod([ext[c] for c in labels], dtype=np.int64))
    xt = x.transpose([sa.index(c) for c in batch + free_a + summed])
    yt = y.transpose([sb.index(c) for c in batch + summed + free_b])
    nb, na, ns, nf = size(batch), size(free_a), size(summed), size(free_b)
    prod = np.matmul(xt.reshape(nb, na, ns), yt.reshape(nb, ns, nf))
    got = batch + free_a + free_b
    prod = prod.reshape([ext[c] for c in got])
    return prod.transpose([got.index(c) for c in so])


def contract(a: Tensor, b: Tensor, spec: str) -> Tensor:
    """Sum of products over the axes paired in an einsum-style ``spec``.

    Every label must be shared by both operands (paired and summed), or kept
    in the output. Paired axes must have equal extents.

    >>> contract(Tensor([[1., 2.], [3., 4.]]), Tensor([[5.], [6.]]), "ij,jk->ik").data
    array([[17.],
           [39.]])
    """
    sa, sb, so = _parse_spec(spec)
    if len(sa) != a.ndim or len(sb) != b.ndim:
        raise ValueError(
            f"spec {spec!r} expects ranks {len(sa)} and {len(sb)}, got {a.ndim} and {b.ndim}"
        )
    extents: dict[str, int] = {}
    for sub, arr, which in ((sa, a, "first"), (sb, b, "second")):
        for label, n in zip(sub, arr.shape):
            if label in extents and extents[label] != n:
                raise ValueError(
                    f"axis {label!r} has extent {extents[label]} in the first operand "
                    f"but {n} in the {which} operand"
                )
            extents[label] = n
    ad, bd = a.data, b.data
    out = _pair_product(sa, sb, so, ad, bd)

    def backward(g):
        return _pair_product(so, sb, sa, g, bd), _pair_product(so, sa, sb, g, ad)

    return _emit(np.asarray(out, dtype=np.result_type(ad, bd)), (a, b), backward)


# ---------------------------------------------------------------------------
# network primitives
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} out of range for rank {x.ndim}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _emit(p, (x,), backward)


def layer_normalize(
    x: Tensor,
    axis: int = -1,
    epsilon: float = 1e-5,
    gain: Tensor | None = None,
    shift: Tensor | None = None,
) -> Tensor:
    """Zero-mean, unit-variance normalization along ``axis`` with optional affine.

    ``gain`` and ``shift`` are 1-d with the extent of ``axis``.
    """
    axis = axis % x.ndim
    n = x.shape[axis]
    for name, p in (("gain", gain), ("shift", shift)):
        if p is not None and p.shape != (n,):
            raise ValueError(f"{name} has shape {p.shape}, expected ({n},)")
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + epsilon)
    xhat = xc * inv
    bshape = [1] * x.ndim
    bshape[axis] = n
    gd = gain.data.reshape(bshape) if gain is not None else None
    out = xhat * gd if gd is not None else xhat
    if shift is not None:
        out = out + shift.data.reshape(bshape)
    red = tuple(i for i in range(x.ndim) if i != axis)

    def backward(g):
        gh = g * gd if gd is not None else g
        gx = inv * (
            gh
            - gh.mean(axis=axis, keepdims=True)
            - xhat * (gh * xhat).mean(axis=axis, keepdims=True)
        )
        ggain = (g * xhat).sum(axis=red) if gain is not None else None
        gshift = g.sum(axis=red) if shift is not None else None
        return gx, ggain, gshift

    inputs = (x, gain if gain is not None else _NONE, shift if shift is not None else _NONE)
    return _emit(out.astype(x.dtype, copy=False), inputs, backward)


_NONE = Tensor._wrap(np.zeros(()))

_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GeLU, ``x * Phi(x)``."""
    xd = x.data
    cdf = ndtr(xd)
    pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
    return _emit((xd * cdf).astype(x.dtype, copy=False), (x,), lambda g: (g * (cdf + xd * pdf),))


def check_finite(x: Tensor, where: str) -> Tensor:
    if not np.isfinite(x.data).all():
        raise NonFiniteError(f"non-finite activation in {where}")
    return x


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros_like(cls, param, **kwargs) -> "AdamState":
        arr = param.data if isinstance(param, Tensor) else np.asarray(param)
        return cls(np.zeros_like(arr), np.zeros_like(arr), **kwargs)


def adam_step(param, grad, state: AdamState, lr: float):
    """One bias-corrected Adam update.

    Returns ``(new_param, new_state)``; the inputs are left untouched.
    """
    p = param.data if isinstance(param, Tensor) else np.asarray(param)
    g = np.asarray(grad)
    if p.shape != g.shape:
        raise ValueError(f"parameter shape {p.shape} does not match gradient shape {g.shape}")
    if state.first_moment.shape != p.shape:
        raise ValueError(f"optimizer state shape {state.first_moment.shape} does not match {p.shape}")
    step = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * g
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1**step)
    v_hat = v / (1.0 - state.beta2**step)
    new = (p - lr * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(p.dtype, copy=False)
    new_state = AdamState(
        m.astype(p.dtype, copy=False),
        v.astype(p.dtype, copy=False),
        step,
        state.beta1,
        state.beta2,
        state.epsilon,
    )
    out = Tensor._wrap(new) if isinstance(param, Tensor) else new
    return out, new_state

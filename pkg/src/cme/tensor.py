"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Operations are recorded on the innermost active :class:`Tape` whenever at
least one input requires a gradient. Outside a tape nothing is recorded, which
is how inference and finite-difference probes run without bookkeeping.

    >>> x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    >>> with Tape():
    ...     loss = sum(square(x))
    >>> backward(loss)
    >>> x.grad.tolist()
    [2.0, -4.0, 6.0]
"""

from __future__ import annotations

import os
import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# CME_FLOAT=32 selects single precision at import time; gradient checks assume 64.
DTYPE = np.float32 if os.environ.get("CME_FLOAT") == "32" else np.float64


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[_Record] = None

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.grad = None
        t._node = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the values."""
        return self.data.reshape(-1)

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)


def _raise_scalar(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Tape


@dataclass(eq=False)
class _Record:
    out: Tensor
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    tape: "Tape"
    pos: int


class Tape:
    """Ordered log of differentiable operations.

    Records are appended in execution order, so inputs always precede the
    operations consuming them and a reverse sweep is a valid topological order.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        stack.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: tuple, backward_fn) -> _Record:
        rec = _Record(out, inputs, backward_fn, self, len(self.records))
        self.records.append(rec)
        return rec

    def clear(self) -> None:
        for rec in self.records:
            rec.out._node = None
        self.records.clear()


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _make(data: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    tape = current_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, requires_grad=needs)
    if needs:
        out._node = tape.record(out, inputs, backward_fn)
    return out


def backward(loss: Tensor, inputs: Sequence[Tensor] = ()) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every requires_grad leaf.

    Leaves listed in ``inputs`` that the loss does not depend on receive a zero
    gradient, as do requires_grad leaves recorded on the tape but off the path.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    leaves: dict[int, Tensor] = {}
    for t in inputs:
        if t.requires_grad and t.is_leaf:
            leaves[id(t)] = t
    if loss._node is None:
        if loss.requires_grad:
            leaves[id(loss)] = loss
            _accumulate(loss, np.ones_like(loss.data))
        _zero_fill(leaves.values())
        return

    tape = loss._node.tape
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records[: loss._node.pos + 1]):
        for t in rec.inputs:
            if t.requires_grad and t.is_leaf:
                leaves.setdefault(id(t), t)
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        in_grads = rec.backward(g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.is_leaf:
                _accumulate(t, gi)
            else:
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
    _zero_fill(leaves.values())


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.data.dtype).reshape(t.data.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def _zero_fill(leaves) -> None:
    for t in leaves:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)


def zero_grad(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# elementwise and structural ops


def _check_same(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} differ")


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data + c, (a,), lambda g: (g,))
    a = as_tensor(a)
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    a = as_tensor(a)
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data * c, (a,), lambda g: (g * c,))
    a = as_tensor(a)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / float(b))
    a = as_tensor(a)
    _check_same(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b), lambda g: (g / bd, -g * out / bd))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    out = a.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out), (a,), bw)


def expand_rows(a: Tensor, n: int) -> Tensor:
    """Repeat a vector ``a`` of shape (D,) into an (n, D) matrix."""
    if a.ndim != 1:
        raise ShapeError(f"expand_rows expects a vector, got shape {a.shape}")
    return _make(np.tile(a.data, (n, 1)), (a,), lambda g: (g.sum(axis=0),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]
    return _make(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(out, tensors, bw)


def sigmoid(a: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bw)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Elementwise binary cross-entropy of ``sigmoid(logits)`` against constant targets."""
    t = np.asarray(targets, dtype=logits.data.dtype)
    if t.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: targets {t.shape} vs logits {logits.shape}")
    x = logits.data
    out = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))

    def bw(g):
        return (g * (0.5 * (1.0 + np.tanh(0.5 * x)) - t),)

    return _make(out, (logits,), bw)


def pairwise_sq_dists(m: Tensor) -> Tensor:
    """(C, D) rows to the (C, C) matrix of squared Euclidean distances."""
    if m.ndim != 2:
        raise ShapeError(f"pairwise_sq_dists expects a matrix, got {m.shape}")
    diff = m.data[:, None, :] - m.data[None, :, :]
    out = (diff * diff).sum(axis=2)

    def bw(g):
        gs = g + g.T
        return (2.0 * (gs[:, :, None] * diff).sum(axis=1),)

    return _make(out, (m,), bw)


def min_offdiag(d: Tensor) -> Tensor:
    """Per-row minimum excluding the diagonal; ties go to the lowest column."""
    n = d.shape[0]
    if d.ndim != 2 or d.shape[1] != n or n < 2:
        raise ShapeError(f"min_offdiag expects a square matrix with n >= 2, got {d.shape}")
    masked = d.data.copy()
    np.fill_diagonal(masked, np.inf)
    cols = masked.argmin(axis=1)
    rows = np.arange(n)
    out = d.data[rows, cols]

    def bw(g):
        full = np.zeros_like(d.data)
        full[rows, cols] = g
        return (full,)

    return _make(out, (d,), bw)


# ---------------------------------------------------------------------------
# network ops


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in [0, 1), got {slope}")
    xd = x.data
    out = np.maximum(xd, slope * xd)
    return _make(out, (x,), lambda g: (np.where(xd > 0, g, slope * g),))


def _as_batch(x: Tensor, name: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ShapeError(f"{name}: expected [C,H,W] or [N,C,H,W], got {x.shape}")


def conv2d(x: Tensor, w: Tensor, b: Tensor, padding: int = 0) -> Tensor:
    """Cross-correlation with stride 1. Accepts [C,H,W] or a batch [N,C,H,W]."""
    xd, single = _as_batch(x, "conv2d")
    if w.ndim != 4 or w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
        raise ShapeError(f"conv2d: weights must be [C_out,C_in,k,k] with odd k, got {w.shape}")
    c_out, c_in, k, _ = w.shape
    if xd.shape[1] != c_in:
        raise ShapeError(f"conv2d: input has {xd.shape[1]} channels, weights expect {c_in}")
    if b.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {b.shape}, expected ({c_out},)")
    if padding < 0:
        raise ShapeError(f"conv2d: padding must be >= 0, got {padding}")
    n, _, h, wd = xd.shape
    ho, wo = h + 2 * padding - k + 1, wd + 2 * padding - k + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {h}x{wd}")

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    # columns laid out [C*k*k, N*Ho*Wo] so every copy runs along contiguous rows
    if k == 1:
        cols = xp.transpose(1, 0, 2, 3).reshape(c_in, n * ho * wo)
    else:
        win = sliding_window_view(xp, (k, k), axis=(2, 3))  # N,C,Ho,Wo,k,k
        cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c_in * k * k, n * ho * wo)
    wmat = w.data.reshape(c_out, -1)
    out = np.empty((n, c_out, ho, wo), dtype=np.result_type(wmat, cols))
    np.add((wmat @ cols).reshape(c_out, n, ho, wo).transpose(1, 0, 2, 3), b.data[:, None, None], out=out)
    if single:
        out = out[0]

    def bw(g):
        g4 = g[None] if single else g
        gt = g4.transpose(1, 0, 2, 3).reshape(c_out, n * ho * wo)
        gw = (gt @ cols.T).reshape(w.shape) if w.requires_grad else None
        gb = gt.sum(axis=1) if b.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ gt).reshape(c_in, k, k, n, ho, wo)
            dxp = np.zeros((n, c_in) + xp.shape[2:], dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + ho, j:j + wo] += dcols[:, i, j].transpose(1, 0, 2, 3)
            if padding:
                dxp = dxp[:, :, padding:padding + h, padding:padding + wd]
            gx = dxp[0].copy() if single else dxp
        return gx, gw, gb

    return _make(out, (x, w, b), bw)


def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; gradient goes to the first row-major maximum."""
    xd, single = _as_batch(x, "max_pool2")
    n, c, h, w = xd.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2: spatial dims must be even, got {h}x{w}")
    r = xd.reshape(n, c, h // 2, 2, w // 2, 2)
    rows = np.maximum(r[:, :, :, 0], r[:, :, :, 1])
    out = np.maximum(rows[..., 0], rows[..., 1])

    def bw(g):
        g4 = g[None] if single else g
        hit = r == out[:, :, :, None, :, None]
        gx = np.empty(r.shape, dtype=g.dtype)
        if np.count_nonzero(hit) == out.size:
            gx[...] = g4[:, :, :, None, :, None]
            gx *= hit
        else:
            taken = np.zeros(out.shape, dtype=bool)
            # visit window positions in row-major order so only the first maximum receives the gradient
            for di in (0, 1):
                for dj in (0, 1):
                    first = hit[:, :, :, di, :, dj] & ~taken
                    gx[:, :, :, di, :, dj] = np.where(first, g4, 0.0)
                    taken |= first
        gx = gx.reshape(n, c, h, w)
        return (gx[0] if single else gx,)

    return _make(out[0] if single else out, (x,), bw)


def global_max_pool(x: Tensor) -> Tensor:
    """Per-channel spatial maximum: [C,H,W] -> [C] or [N,C,H,W] -> [N,C]."""
    xd, single = _as_batch(x, "global_max_pool")
    n, c, h, w = xd.shape
    flat = xd.reshape(n, c, h * w)
    idx = flat.argmax(axis=-1)[..., None]
    out = np.take_along_axis(flat, idx, axis=-1)[..., 0]
    if single:
        out = out[0]

    def bw(g):
        g2 = g[None] if single else g
        full = np.zeros((n, c, h * w), dtype=g.dtype)
        np.put_along_axis(full, idx, g2[..., None], axis=-1)
        full = full.reshape(n, c, h, w)
        return (full[0] if single else full,)

    return _make(out, (x,), bw)


def fully_connected(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map ``w @ x + b`` for a vector [D_in] or a batch of rows [N, D_in]."""
    if w.ndim != 2 or b.shape != (w.shape[0],):
        raise ShapeError(f"fully_connected: weights {w.shape} and bias {b.shape} disagree")
    if x.ndim not in (1, 2) or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"fully_connected: input {x.shape} does not match weights {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd.T + b.data

    def bw(g):
        if xd.ndim == 1:
            gw = np.outer(g, xd)
            gb = g
        else:
            gw = g.T @ xd
            gb = g.sum(axis=0)
        return g @ wd, gw, gb

    return _make(out, (x, w, b), bw)


def channel_scale(feature: Tensor, vector: Tensor) -> Tensor:
    """Multiply channel ``c`` of a [C,H,W] (or [N,C,H,W]) map by ``vector[c]``."""
    fd, single = _as_batch(feature, "channel_scale")
    if vector.shape != (fd.shape[1],):
        raise ShapeError(f"channel_scale: vector {vector.shape} vs {fd.shape[1]} channels")
    v = vector.data[:, None, None]
    out = feature.data * v

    def bw(g):
        g4 = g[None] if single else g
        gv = (g4 * fd).sum(axis=(0, 2, 3))
        return g * v, gv

    return _make(out, (feature, vector), bw)


# ---------------------------------------------------------------------------
# gradient checking


def finite_difference_check(fn: Callable[[Tensor], Tensor], point, step: float = 1e-6,
                            indices: Optional[Sequence[int]] = None) -> float:
    """Largest relative gap between backward's gradient and central differences.

    The relative error of an element is ``|a - n| / max(|a|, |n|, 1e-8)``.
    ``indices`` restricts the comparison to those flat coordinates.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    base = np.array(as_tensor(point).data, dtype=DTYPE)
    x = Tensor(base, requires_grad=True)
    with Tape() as tape:
        y = fn(x)
    backward(y, inputs=[x])
    tape.clear()

    flat = base.reshape(-1)
    coords = np.arange(flat.size) if indices is None else np.asarray(indices, dtype=np.int64)
    analytic = x.grad.reshape(-1)[coords]
    numeric = np.empty(coords.size, dtype=DTYPE)
    for k, i in enumerate(coords):
        orig = flat[i]
        hi, lo = orig + step, orig - step
        flat[i] = hi
        f_plus = fn(Tensor(base)).item()
        flat[i] = lo
        f_minus = fn(Tensor(base)).item()
        flat[i] = orig
        # divide by the step actually taken after rounding of orig +/- step
        numeric[k] = (f_plus - f_minus) / (hi - lo)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if coords.size else 0.0

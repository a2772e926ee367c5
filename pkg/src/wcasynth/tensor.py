"""Dense tensors with tape-based reverse-mode differentiation.

Values live in numpy arrays (float32 by default). While a :class:`Tape` is
active, every op whose inputs require gradients appends a node to the tape;
:func:`backward` sweeps the recorded nodes in reverse. Outside a tape, ops run
in inference mode and record nothing.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import expit

from .errors import NumericalError, ShapeError

DEFAULT_DTYPE = np.float32
MAX_RANK = 4

_state = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


class Tensor:
    """A rank <= 4 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"tensor rank {arr.ndim} exceeds {MAX_RANK}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self._node: int | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"tensor rank {arr.ndim} exceeds {MAX_RANK}")
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t._tape = None
        t._node = None
        t.name = None
        return t

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def backward(self) -> None:
        if self._tape is None:
            raise ValueError("tensor was not produced on a tape")
        backward(self, self._tape)

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported; multiply by its reciprocal")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        if exponent != 2:
            raise NotImplementedError("only squaring is supported")
        return square(self)

    def __matmul__(self, other):
        return batched_matmul(self, other)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of differentiable ops.

    Nodes are appended as ops execute, so the list is already topologically
    sorted; the backward sweep walks it once in reverse.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple, Callable]] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tapes.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        """Drop recorded nodes so the graph's buffers are freed right away.

        Recorded outputs point back at their tape, so without this the graph
        lives until the cyclic collector runs.
        """
        for out, _, _ in self.nodes:
            out._tape = None
            out._node = None
        self.nodes.clear()

    def record(self, out: Tensor, inputs: tuple, fn: Callable) -> None:
        out.requires_grad = True
        out._tape = self
        out._node = len(self.nodes)
        self.nodes.append((out, inputs, fn))


class no_grad:
    """Context manager that suspends recording on every active tape."""

    def __enter__(self):
        self._saved = getattr(_state, "tapes", None)
        _state.tapes = []
        return self

    def __exit__(self, *exc):
        _state.tapes = self._saved


def _tracked(*xs) -> bool:
    return any(isinstance(x, Tensor) and x.requires_grad for x in xs)


def _finish(out_arr: np.ndarray, inputs: tuple, fn: Callable) -> Tensor:
    out = Tensor._wrap(out_arr)
    tape = _active_tape()
    if tape is not None and _tracked(*inputs):
        tape.record(out, inputs, fn)
    return out


def _needs(x) -> bool:
    return isinstance(x, Tensor) and x.requires_grad


def backward(loss: Tensor, tape: Tape | None = None, params=None) -> None:
    """Accumulate d(loss)/d(leaf) into the ``grad`` buffer of every tracked leaf.

    Gradients accumulate; callers zero them between steps.
    """
    tape = tape if tape is not None else loss._tape
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None or loss._tape is not tape or loss._node is None:
        raise ValueError("loss was not recorded on this tape")
    grads: dict[int, np.ndarray] = {loss._node: np.ones_like(loss.data)}
    for idx in range(loss._node, -1, -1):
        g = grads.pop(idx, None)
        if g is None:
            continue
        out, inputs, fn = tape.nodes[idx]
        in_grads = fn(g)
        for x, gx in zip(inputs, in_grads):
            if gx is None or not _needs(x):
                continue
            if x._tape is tape and x._node is not None:
                prev = grads.get(x._node)
                grads[x._node] = gx if prev is None else prev + gx
            else:
                gx = np.asarray(gx, dtype=x.data.dtype).reshape(x.shape)
                x.grad = gx.copy() if x.grad is None else x.grad + gx
    if params is not None:
        for _, p in params.items():
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.data)


# -- broadcasting -------------------------------------------------------

def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    if a.ndim == b.ndim == 4 and a.shape[0] == b.shape[0] and a.shape[2:] == b.shape[2:]:
        if a.shape[1] == 1 or b.shape[1] == 1:
            return
    if a.ndim == 4 and b.ndim == 4 and a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"spatial dims differ: {a.shape[2:]} vs {b.shape[2:]} (no spatial broadcasting)")
    raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(dtype=np.float64), dtype=g.dtype)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def _operand(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=DEFAULT_DTYPE)


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    ad, bd = _operand(a), _operand(b)
    _check_pair(ad, bd)

    def fn(g):
        return (_unbroadcast(g, ad.shape) if _needs(a) else None,
                _unbroadcast(g, bd.shape) if _needs(b) else None)

    return _finish(ad + bd, (a, b), fn)


def sub(a, b) -> Tensor:
    ad, bd = _operand(a), _operand(b)
    _check_pair(ad, bd)

    def fn(g):
        return (_unbroadcast(g, ad.shape) if _needs(a) else None,
                _unbroadcast(-g, bd.shape) if _needs(b) else None)

    return _finish(ad - bd, (a, b), fn)


def mul(a, b) -> Tensor:
    ad, bd = _operand(a), _operand(b)
    _check_pair(ad, bd)

    def fn(g):
        return (_unbroadcast(g * bd, ad.shape) if _needs(a) else None,
                _unbroadcast(g * ad, bd.shape) if _needs(b) else None)

    return _finish(ad * bd, (a, b), fn)


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _finish(ad * ad, (a,), lambda g: (2.0 * ad * g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _finish(out, (a,), lambda g: (g * out,))


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data)
    return _finish(out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a: Tensor) -> Tensor:
    ad = a.data
    s = expit(ad)
    return _finish(ad * s, (a,), lambda g: (g * (s * (1.0 + ad * (1.0 - s))),))


def channel_shift(x: Tensor, shift: Tensor) -> Tensor:
    """Add a per-(batch, channel) offset ``shift[B, C]`` to ``x[B, C, H, W]``."""
    if x.ndim != 4 or shift.shape != x.shape[:2]:
        raise ShapeError(f"channel_shift expects shift {x.shape[:2]}, got {shift.shape}")
    sd = shift.data[:, :, None, None]

    def fn(g):
        return (g if _needs(x) else None,
                g.sum(axis=(2, 3), dtype=np.float64).astype(g.dtype) if _needs(shift) else None)

    return _finish(x.data + sd, (x, shift), fn)


def concat_channels(*xs: Tensor) -> Tensor:
    return concat(list(xs), axis=1)


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    arrs = [x.data for x in xs]
    ref = arrs[0].shape
    for a in arrs[1:]:
        if a.ndim != len(ref) or any(d1 != d2 for i, (d1, d2) in enumerate(zip(a.shape, ref)) if i != axis % a.ndim):
            raise ShapeError(f"cannot concatenate {a.shape} with {ref} along axis {axis}")
    splits = np.cumsum([a.shape[axis] for a in arrs])[:-1]

    def fn(g):
        parts = np.split(g, splits, axis=axis)
        return tuple(p if _needs(x) else None for p, x in zip(parts, xs))

    return _finish(np.concatenate(arrs, axis=axis), tuple(xs), fn)


# -- reductions -----------------------------------------------------------

def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    ad = a.data
    out = np.asarray(ad.sum(axis=axis, dtype=np.float64), dtype=ad.dtype)

    def fn(g):
        if axis is None:
            return (np.broadcast_to(g, ad.shape).astype(ad.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis), ad.shape).astype(ad.dtype),)

    return _finish(out, (a,), fn)


def mean(a: Tensor, axis=None) -> Tensor:
    ad = a.data
    n = ad.size if axis is None else int(np.prod([ad.shape[i] for i in np.atleast_1d(axis)]))
    out = np.asarray(ad.mean(axis=axis, dtype=np.float64), dtype=ad.dtype)

    def fn(g):
        g = g / n
        if axis is None:
            return (np.broadcast_to(g, ad.shape).astype(ad.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis), ad.shape).astype(ad.dtype),)

    return _finish(out, (a,), fn)


# -- shape ---------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _finish(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, perm: Sequence[int]) -> Tensor:
    inv = np.argsort(perm)
    return _finish(np.ascontiguousarray(a.data.transpose(perm)), (a,),
                   lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def upsample_nearest2x(a: Tensor) -> Tensor:
    ad = a.data
    out = ad.repeat(2, axis=2).repeat(2, axis=3)

    def fn(g):
        B, C, H, W = ad.shape
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return _finish(out, (a,), fn)


def window_partition(t: Tensor, ws: int) -> Tensor:
    """Split ``[B, C, H, W]`` into non-overlapping ``ws x ws`` windows.

    Returns ``[B * (H/ws) * (W/ws), ws*ws, C]``; windows are ordered row-major
    over (batch, window row, window column) and tokens row-major inside each
    window.
    """
    if t.ndim != 4:
        raise ShapeError(f"window_partition expects [B, C, H, W], got {t.shape}")
    if ws < 2:
        raise ShapeError(f"window size must be >= 2, got {ws}")
    B, C, H, W = t.shape
    if H % ws or W % ws:
        raise ShapeError(
            f"spatial size {H}x{W} is not divisible by window size {ws}; "
            "choose a resolution that is a multiple of the window size")
    nh, nw = H // ws, W // ws
    out = (t.data.reshape(B, C, nh, ws, nw, ws)
           .transpose(0, 2, 4, 3, 5, 1)
           .reshape(B * nh * nw, ws * ws, C))

    def fn(g):
        return (g.reshape(B, nh, nw, ws, ws, C).transpose(0, 5, 1, 3, 2, 4).reshape(B, C, H, W),)

    return _finish(out, (t,), fn)


def window_merge(tokens: Tensor, ws: int, shape: Sequence[int]) -> Tensor:
    """Exact inverse of :func:`window_partition` for the given original shape."""
    B, C, H, W = shape
    if ws < 2 or H % ws or W % ws:
        raise ShapeError(f"window size {ws} incompatible with spatial size {H}x{W}")
    nh, nw = H // ws, W // ws
    if tokens.shape != (B * nh * nw, ws * ws, C):
        raise ShapeError(
            f"token tensor {tokens.shape} does not match shape {tuple(shape)} with window {ws}")
    out = (tokens.data.reshape(B, nh, nw, ws, ws, C)
           .transpose(0, 5, 1, 3, 2, 4)
           .reshape(B, C, H, W))

    def fn(g):
        return (g.reshape(B, C, nh, ws, nw, ws).transpose(0, 2, 4, 3, 5, 1).reshape(B * nh * nw, ws * ws, C),)

    return _finish(out, (tokens,), fn)


# -- linear algebra --------------------------------------------------------

def batched_matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError("batched_matmul needs operands of rank >= 2")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"inner dimensions differ: {ad.shape[-1]} vs {bd.shape[-2]}")
    if ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"leading dimensions differ: {ad.shape[:-2]} vs {bd.shape[:-2]}")

    def fn(g):
        return (g @ np.swapaxes(bd, -1, -2) if _needs(a) else None,
                np.swapaxes(ad, -1, -2) @ g if _needs(b) else None)

    return _finish(ad @ bd, (a, b), fn)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x[B, in] @ w[out, in].T + b[out]``."""
    xd, wd = x.data, w.data
    if xd.ndim != 2 or wd.ndim != 2 or xd.shape[1] != wd.shape[1]:
        raise ShapeError(f"linear: input {xd.shape} incompatible with weight {wd.shape}")
    out = xd @ wd.T
    if b is not None:
        out = out + b.data

    def fn(g):
        return (g @ wd if _needs(x) else None,
                g.T @ xd if _needs(w) else None,
                g.sum(axis=0) if b is not None and _needs(b) else None)

    return _finish(out, (x, w, b), fn)


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    td = t.data
    if not -td.ndim <= axis < td.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {td.shape}")
    z = td - td.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _finish(out, (t,), fn)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits[B, K]``."""
    ld = logits.data
    labels = np.asarray(labels, dtype=np.int64)
    if ld.ndim != 2 or labels.shape != (ld.shape[0],):
        raise ShapeError(f"cross_entropy: logits {ld.shape} vs labels {labels.shape}")
    z = ld - ld.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = ld.shape[0]
    out = np.asarray(-logp[np.arange(n), labels].mean(dtype=np.float64), dtype=ld.dtype)

    def fn(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return ((g / n) * p,)

    return _finish(out, (logits,), fn)


def embedding(table: Tensor, index: np.ndarray) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 1:
        raise ShapeError("embedding index must be 1-D")
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise ShapeError(f"embedding index out of range [0, {table.shape[0]})")

    def fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, index, g)
        return (full,)

    return _finish(table.data[index], (table,), fn)


# -- convolution ------------------------------------------------------------

def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x[B, Cin, H, W]`` with ``kernel[Cout, Cin, kh, kw]``."""
    xd, wd = x.data, kernel.data
    if xd.ndim != 4:
        raise ShapeError(f"conv2d input must be [B, C, H, W], got {xd.shape}")
    if wd.ndim != 4:
        raise ShapeError(f"conv2d kernel must be [Cout, Cin, kh, kw], got {wd.shape}")
    B, C, H, W = xd.shape
    O, Ci, kh, kw = wd.shape
    if Ci != C:
        raise ShapeError(f"conv2d channel mismatch: input has {C} channels (dim 1), kernel expects {Ci}")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if kh > H + 2 * padding or kw > W + 2 * padding:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {H + 2 * padding}x{W + 2 * padding}")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"conv2d bias must have shape ({O},), got {bias.shape}")
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0

    # im2col in channels-last layout: rows (b, y, x), columns (i, j, c)
    xt = xd.transpose(0, 2, 3, 1)
    if pointwise:
        cols = xt.reshape(B * H * W, C)
    else:
        xpt = np.zeros((B, H + 2 * padding, W + 2 * padding, C), dtype=xd.dtype)
        xpt[:, padding:padding + H, padding:padding + W, :] = xt
        cols = np.empty((B, Ho, Wo, kh, kw, C), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, :, i, j, :] = xpt[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride, :]
        cols = cols.reshape(B * Ho * Wo, kh * kw * C)
    w2 = wd.transpose(0, 2, 3, 1).reshape(O, kh * kw * C)
    out = cols @ w2.T
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))

    def fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gx = gw = gb = None
        if _needs(kernel):
            gw = np.ascontiguousarray((g2.T @ cols).reshape(O, kh, kw, C).transpose(0, 3, 1, 2))
        if bias is not None and _needs(bias):
            gb = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(g.dtype)
        if _needs(x):
            dcols = g2 @ w2
            if pointwise:
                gx = np.ascontiguousarray(dcols.reshape(B, H, W, C).transpose(0, 3, 1, 2))
            else:
                dcols = dcols.reshape(B, Ho, Wo, kh, kw, C)
                dxp = np.zeros((B, H + 2 * padding, W + 2 * padding, C), dtype=dcols.dtype)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride, :] += dcols[:, :, :, i, j, :]
                gx = np.ascontiguousarray(dxp[:, padding:padding + H, padding:padding + W, :].transpose(0, 3, 1, 2))
        return gx, gw, gb

    return _finish(out, (x, kernel, bias), fn)


# -- normalization -----------------------------------------------------------

def group_norm(t: Tensor, groups: int, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    td = t.data
    if td.ndim != 4:
        raise ShapeError(f"group_norm expects [B, C, H, W], got {td.shape}")
    B, C, H, W = td.shape
    if groups < 1 or C % groups:
        raise ShapeError(f"channels ({C}) not divisible by groups ({groups})")
    if gain.shape != (C,) or bias.shape != (C,):
        raise ShapeError(f"group_norm gain/bias must have shape ({C},)")
    xg = td.reshape(B, groups, -1).astype(np.float64)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(B, C, H, W)
    out = (xhat * gain.data[None, :, None, None] + bias.data[None, :, None, None]).astype(td.dtype)

    def fn(g):
        g64 = g.astype(np.float64)
        gx = ggain = gbias = None
        if _needs(gain):
            ggain = (g64 * xhat).sum(axis=(0, 2, 3)).astype(gain.data.dtype)
        if _needs(bias):
            gbias = g64.sum(axis=(0, 2, 3)).astype(bias.data.dtype)
        if _needs(t):
            dxhat = (g64 * gain.data[None, :, None, None]).reshape(B, groups, -1)
            xh = xhat.reshape(B, groups, -1)
            gx = inv * (dxhat - dxhat.mean(axis=2, keepdims=True)
                        - xh * (dxhat * xh).mean(axis=2, keepdims=True))
            gx = gx.reshape(B, C, H, W).astype(td.dtype)
        return gx, ggain, gbias

    return _finish(out, (t, gain, bias), fn)


# -- parameters & optimizers -------------------------------------------------

class ParamStore:
    """Named trainable tensors, iterated in lexicographic name order."""

    def __init__(self, items: dict[str, Tensor] | None = None):
        self._params: dict[str, Tensor] = {}
        for k, v in (items or {}).items():
            self[k] = v

    def __setitem__(self, name: str, value) -> None:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        t.name = name
        self._params[name] = t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self.names())

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> list[tuple[str, Tensor]]:
        return [(k, self._params[k]) for k in self.names()]

    def values(self) -> list[Tensor]:
        return [self._params[k] for k in self.names()]

    def subset(self, prefix: str) -> "ParamStore":
        """View of the parameters whose names start with ``prefix`` (shared tensors)."""
        sub = ParamStore()
        for k, v in self.items():
            if k.startswith(prefix):
                sub._params[k] = v
        return sub

    def merge(self, other: "ParamStore") -> "ParamStore":
        out = ParamStore()
        for store in (self, other):
            for k, v in store.items():
                if k in out._params:
                    raise KeyError(f"duplicate parameter name {k!r}")
                out._params[k] = v
        return out

    def set_trainable(self, flag: bool) -> None:
        for p in self._params.values():
            p.requires_grad = flag

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(k, p) for k, p in self.items() if p.requires_grad]

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.items()}

    def load(self, arrays: dict[str, np.ndarray]) -> None:
        for k, arr in arrays.items():
            p = self._params[k]
            if p.shape != arr.shape:
                raise ShapeError(f"parameter {k!r}: expected shape {p.shape}, got {arr.shape}")
            p.data = np.array(arr, dtype=p.data.dtype)

    def num_elements(self, trainable_only: bool = False) -> int:
        return int(np.sum([p.size for p in self._params.values()
                           if p.requires_grad or not trainable_only], dtype=np.int64))


def _check_finite_grads(params: Sequence[tuple[str, Tensor]]) -> None:
    for name, p in params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}; step aborted")


def optimizer_step(params: ParamStore, lr: float) -> None:
    """One step of plain gradient descent over the trainable parameters."""
    live = [(k, p) for k, p in params.trainable() if p.grad is not None]
    _check_finite_grads(live)
    for _, p in live:
        p.data = (p.data - lr * p.grad).astype(p.data.dtype)


class Adam:
    """Adaptive moment estimation with bias-corrected first/second moments."""

    def __init__(self, params: ParamStore, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self) -> None:
        live = [(k, p) for k, p in self.params.trainable() if p.grad is not None]
        _check_finite_grads(live)
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in live:
            g = p.grad.astype(np.float32)
            m = self.m.get(k)
            v = self.v.get(k)
            m = (1 - self.beta1) * g if m is None else self.beta1 * m + (1 - self.beta1) * g
            v = (1 - self.beta2) * g * g if v is None else self.beta2 * v + (1 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - self.lr * update).astype(p.data.dtype)

    def zero_grad(self) -> None:
        self.params.zero_grad()


# -- finite differences --------------------------------------------------------

def finite_diff_grad(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3,
                     indices: Sequence[int] | None = None) -> np.ndarray:
    """Central-difference estimate of d f / d x, evaluated in float64.

    ``x`` is temporarily promoted to float64 so the estimate is not dominated
    by float32 round-off; its original values are restored afterwards. With
    ``indices`` (flat positions) only those entries are probed and a 1-D array
    aligned with ``indices`` is returned.
    """
    original = x.data
    work = original.astype(np.float64).copy()
    flat = work.reshape(-1)
    probe = range(flat.size) if indices is None else list(indices)
    out = np.zeros(len(probe), dtype=np.float64)
    try:
        x.data = work
        with no_grad():
            for n, i in enumerate(probe):
                old = flat[i]
                flat[i] = old + eps
                fp = float(np.sum(f(x).data, dtype=np.float64))
                flat[i] = old - eps
                fm = float(np.sum(f(x).data, dtype=np.float64))
                flat[i] = old
                out[n] = (fp - fm) / (2.0 * eps)
    finally:
        x.data = original
    return out.reshape(original.shape) if indices is None else out


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0

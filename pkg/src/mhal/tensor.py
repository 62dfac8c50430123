"""Minimal define-by-run reverse-mode autodiff over float64 numpy arrays.

Operations executed inside an active :class:`Tape` are recorded in execution
order; :func:`backward` replays that record in reverse.  Every primitive the
labeller needs lives here, including a fused masked LSTM whose backward pass is
written out by hand (back-propagation through time), so a whole sequence costs
one tape node instead of dozens per time step.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("mhal_tape", default=None)


class Tensor:
    """Dense float64 array that may take part in a recorded computation."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE) if not isinstance(data, np.ndarray) or data.dtype != DTYPE else data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of executed primitives.

    Used as a context manager; operations run while it is active append a
    :class:`Node`.  Append order is execution order, hence topological.
    """

    nodes: list[Node] = field(default_factory=list)
    _token: contextvars.Token | None = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)


class no_tape:
    """Suspend recording, e.g. for evaluation forward passes."""

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(None)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, backward) -> Tensor:
    out = Tensor(out_data, requires_grad=any(t.requires_grad for t in inputs))
    tape = _ACTIVE_TAPE.get()
    if tape is not None and out.requires_grad:
        tape.nodes.append(Node(op, inputs, out, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", (a, b), a.data + b.data, bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit("sub", (a, b), a.data - b.data, bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit("mul", (a, b), a.data * b.data, bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _emit("div", (a, b), out, bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _emit("square", (a,), a.data * a.data, lambda g: (2.0 * a.data * g,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _emit("sqrt", (a,), out, lambda g: (g / (2.0 * out),))


def maximum(a, floor: float) -> Tensor:
    """Elementwise max against a constant; gradient flows where ``a > floor``."""
    a = as_tensor(a)
    keep = a.data > floor
    return _emit("maximum", (a,), np.where(keep, a.data, floor), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    return _emit("tanh", (x,), t, lambda g: (g * (1.0 - t * t),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _emit("sigmoid", (x,), s, lambda g: (g * s * (1.0 - s),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.data)
    return _emit("exp", (x,), e, lambda g: (g * e,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _emit("log", (x,), np.log(x.data), lambda g: (g / x.data,))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.shape[axis] == 0:
        raise ValueError(f"softmax over an empty axis (shape {x.shape}, axis {axis})")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", (x,), p, bw)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.shape[axis] == 0:
        raise ValueError(f"log_softmax over an empty axis (shape {x.shape}, axis {axis})")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _emit("log_softmax", (x,), out, bw)


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """``a @ b`` with numpy batching rules; ``b`` may be 2-D and shared."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        bt = np.swapaxes(b.data, -1, -2)
        if a.ndim == 1:
            ga = g @ bt
            gb = np.outer(a.data, g) if b.ndim == 2 else None
        else:
            ga = g @ bt
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit("matmul", (a, b), a.data @ b.data, bw)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    return _emit("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(x.shape),))


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    inverse = np.argsort(axes)
    return _emit("transpose", (x,), np.transpose(x.data, axes), lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", ts, np.concatenate([t.data for t in ts], axis=axis), bw)


def take(x, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in backward."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)
    ax = axis % x.ndim

    def bw(g):
        full = np.zeros_like(x.data)
        moved = np.moveaxis(full, ax, 0)
        np.add.at(moved, idx.reshape(-1), np.moveaxis(g, tuple(range(ax, ax + idx.ndim)), tuple(range(idx.ndim))).reshape((-1,) + moved.shape[1:]))
        return (full,)

    return _emit("take", (x,), np.take(x.data, idx, axis=ax), bw)


def pick(x, indices) -> Tensor:
    """``x[..., indices[...]]``: one entry per row of the last axis."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)[..., None]
    if idx.shape[:-1] != x.shape[:-1]:
        raise ValueError(f"pick indices of shape {idx.shape[:-1]} do not match rows of {x.shape}")

    def bw(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, idx, g[..., None], axis=-1)
        return (full,)

    return _emit("pick", (x,), np.take_along_axis(x.data, idx, axis=-1)[..., 0], bw)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("reduce_sum", (x,), np.asarray(out, dtype=DTYPE), bw)


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _emit("reduce_mean", (x,), np.asarray(out, dtype=DTYPE), bw)


def reduce_max(x, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; the gradient goes to the first maximising entry."""
    x = as_tensor(x)
    ax = axis % x.ndim
    arg = np.expand_dims(np.argmax(x.data, axis=ax), ax)
    out = np.take_along_axis(x.data, arg, axis=ax)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        full = np.zeros_like(x.data)
        np.put_along_axis(full, arg, g, axis=ax)
        return (full,)

    return _emit("reduce_max", (x,), out if keepdims else np.squeeze(out, ax), bw)


# ---------------------------------------------------------------------------
# stochastic regularisation
# ---------------------------------------------------------------------------


def dropout_mask(shape: Sequence[int], rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout mask: kept entries are scaled by ``1 / (1 - rate)``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape, dtype=DTYPE)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def dropout(x, rate: float, rng: np.random.Generator | None) -> Tensor:
    x = as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0 or rng is None:
        return x
    return mul(x, dropout_mask(x.shape, rate, rng))


# ---------------------------------------------------------------------------
# fused masked LSTM
# ---------------------------------------------------------------------------


def lstm(x, w_in, w_rec, bias, mask: np.ndarray | None = None, reverse: bool = False) -> Tensor:
    """Run an LSTM over ``x`` of shape (batch, time, in) and return all states.

    Gate layout along the last axis of the weights is ``[input, forget,
    output, candidate]``.  ``mask`` (batch, time) freezes cell and hidden state
    at padded positions, so with right padding the state after the final step
    of a forward pass equals the state at the last real token, and a reversed
    pass starts from zeros at each sequence's true end.
    """
    x, w_in, w_rec, bias = (as_tensor(t) for t in (x, w_in, w_rec, bias))
    B, T, D = x.shape
    Hd = w_rec.shape[0]
    if w_in.shape != (D, 4 * Hd) or w_rec.shape != (Hd, 4 * Hd) or bias.shape != (4 * Hd,):
        raise ValueError(
            f"lstm weight shapes {w_in.shape}, {w_rec.shape}, {bias.shape} do not fit input {x.shape} with hidden {Hd}"
        )
    m = np.ones((B, T), dtype=DTYPE) if mask is None else np.asarray(mask, dtype=DTYPE)
    steps = range(T - 1, -1, -1) if reverse else range(T)

    pre_x = x.data @ w_in.data + bias.data
    gates = np.empty((B, T, 4 * Hd))
    cells = np.empty((B, T, Hd))
    cells_prev = np.empty((B, T, Hd))
    hiddens = np.empty((B, T, Hd))
    hiddens_prev = np.empty((B, T, Hd))
    h = np.zeros((B, Hd))
    c = np.zeros((B, Hd))
    for t in steps:
        g = pre_x[:, t] + h @ w_rec.data
        sig = _sigmoid(g[:, : 3 * Hd])
        cand = np.tanh(g[:, 3 * Hd :])
        gates[:, t, : 3 * Hd] = sig
        gates[:, t, 3 * Hd :] = cand
        c_new = sig[:, Hd : 2 * Hd] * c + sig[:, :Hd] * cand
        h_new = sig[:, 2 * Hd :] * np.tanh(c_new)
        mt = m[:, t : t + 1]
        cells_prev[:, t] = c
        hiddens_prev[:, t] = h
        cells[:, t] = c_new
        c = mt * c_new + (1.0 - mt) * c
        h = mt * h_new + (1.0 - mt) * h
        hiddens[:, t] = h

    def bw(g_out):
        d_gates = np.empty((B, T, 4 * Hd))
        dh = np.zeros((B, Hd))
        dc = np.zeros((B, Hd))
        w_rec_t = w_rec.data.T
        for t in reversed(list(steps)):
            mt = m[:, t : t + 1]
            dh = dh + g_out[:, t]
            dh_new = mt * dh
            dc_new = mt * dc
            dh_keep = (1.0 - mt) * dh
            dc_keep = (1.0 - mt) * dc
            i_g = gates[:, t, :Hd]
            f_g = gates[:, t, Hd : 2 * Hd]
            o_g = gates[:, t, 2 * Hd : 3 * Hd]
            cand = gates[:, t, 3 * Hd :]
            tc = np.tanh(cells[:, t])
            dc_new = dc_new + dh_new * o_g * (1.0 - tc * tc)
            dg = d_gates[:, t]
            dg[:, :Hd] = dc_new * cand * i_g * (1.0 - i_g)
            dg[:, Hd : 2 * Hd] = dc_new * cells_prev[:, t] * f_g * (1.0 - f_g)
            dg[:, 2 * Hd : 3 * Hd] = dh_new * tc * o_g * (1.0 - o_g)
            dg[:, 3 * Hd :] = dc_new * i_g * (1.0 - cand * cand)
            dc = dc_keep + dc_new * f_g
            dh = dh_keep + dg @ w_rec_t
        flat_g = d_gates.reshape(-1, 4 * Hd)
        dx = d_gates @ w_in.data.T
        dw_in = x.data.reshape(-1, D).T @ flat_g
        dw_rec = hiddens_prev.reshape(-1, Hd).T @ flat_g
        db = flat_g.sum(axis=0)
        return dx, dw_in, dw_rec, db

    return _emit("lstm", (x, w_in, w_rec, bias), hiddens, bw)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor, tape: Tape, params: Iterable[Tensor] = ()) -> list[np.ndarray]:
    """Replay ``tape`` in reverse from scalar ``loss``.

    Gradients accumulate additively over fan-out.  Each tensor in ``params``
    gets its ``grad`` set (zeros when it never reached the tape) and the list
    of those gradients is returned in the same order.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    out = []
    for p in params:
        g = grads.get(id(p))
        p.grad = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=DTYPE).reshape(p.shape)
        out.append(p.grad)
    return out


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def numerical_gradient(f: Callable[[], float], x: Tensor, step: float = 1e-5, indices=None) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. the entries of ``x``.

    ``x.data`` is perturbed in place and restored.  ``indices`` restricts the
    sweep to some flat positions (others stay zero).
    """
    flat = x.data.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size) if indices is None else indices:
        orig = flat[i]
        flat[i] = orig + step
        up = f()
        flat[i] = orig - step
        down = f()
        flat[i] = orig
        out[i] = (up - down) / (2.0 * step)
    return out.reshape(x.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=DTYPE).reshape(-1)
    n = np.asarray(numeric, dtype=DTYPE).reshape(-1)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))

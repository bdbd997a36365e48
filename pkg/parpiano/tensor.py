"""Dense tensors with reverse-mode differentiation.

Only the operations the transcription networks need are provided. Every op
builds its output with ``_node`` and a closure mapping the upstream gradient
to one gradient per parent (``None`` where a parent gets nothing).
"""
import threading
from contextlib import contextmanager
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ShapeError

_state = threading.local()

PROB_FLOOR = 1e-12


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable] = None

    # ---- introspection ----
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # ---- autodiff ----
    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)

        order: List[Tensor] = []
        seen = set()
        stack: List[Tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # ---- operators ----
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _lift(other, self)
        return mul(self, reciprocal(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod([self.data.shape[a] for a in np.atleast_1d(axis)])
        return tensor_sum(self, axis, keepdims) * (1.0 / float(n))


class Parameter(Tensor):
    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ------------------------------
# Elementwise
# ------------------------------

def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    out = a.data + b.data
    return _node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    out = a.data * b.data
    return _node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _node(out, (a,), lambda g: (-g * out * out,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node(out, (a,), backward)


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.data)


# ------------------------------
# Shape and indexing
# ------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        if _is_basic_index(index):
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _node(out, (a,), backward)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(out), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _node(out, tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _node(out, tensors, backward)


def pad(a: Tensor, widths: Sequence[Tuple[int, int]]) -> Tensor:
    widths = [tuple(w) for w in widths]
    out = np.pad(a.data, widths)
    window = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return _node(out, (a,), lambda g: (g[window],))


# ------------------------------
# Layers
# ------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    b = _lift(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands with at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _node(out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map over the last axis, broadcast over the leading axes."""
    n_out, n_in = weight.shape
    if x.shape[-1] != n_in:
        raise ShapeError(f"linear expects last dim {n_in}, got shape {x.shape}")
    if bias is not None and bias.shape != (n_out,):
        raise ShapeError(f"linear bias must have shape ({n_out},), got {bias.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, n_out)
        gx = g @ weight.data
        gw = g2.T @ x.data.reshape(-1, n_in)
        if bias is None:
            return (gx, gw)
        return (gx, gw, g2.sum(axis=0))

    return _node(out, parents, backward)


def conv_time_padding(k_time: int) -> Tuple[int, int]:
    """(past, future) zero frames for a time kernel of width k_time."""
    future = k_time // 2
    return k_time - 1 - future, future


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """'Same' 2-D convolution over (freq, time) of a [B,C,F,T] or [C,F,T] input.

    The frequency axis is zero padded symmetrically; the time axis gets
    ``k//2`` future frames and ``k - 1 - k//2`` past frames.
    """
    if x.ndim == 3:
        out = conv2d(x.reshape((1,) + x.shape), weight, bias)
        return out.reshape(out.shape[1:])
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects [B,C,F,T] input and [O,C,kF,kT] weight, got {x.shape}, {weight.shape}")
    n_batch, c_in, n_freq, n_time = x.shape
    c_out, w_in, k_freq, k_time = weight.shape
    if w_in != c_in:
        raise ShapeError(f"conv2d weight expects {w_in} input channels, got {c_in}")
    if k_freq % 2 == 0:
        raise ShapeError("conv2d needs an odd frequency kernel")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d bias must have shape ({c_out},)")

    pad_f = (k_freq - 1) // 2
    past, future = conv_time_padding(k_time)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad_f, pad_f), (past, future)))
    w = weight.data

    acc = np.zeros((c_out, n_batch, n_freq, n_time), dtype=np.result_type(x.data, w))
    for i in range(k_freq):
        for j in range(k_time):
            acc += np.tensordot(w[:, :, i, j], xp[:, :, i:i + n_freq, j:j + n_time], axes=([1], [1]))
    if bias is not None:
        acc += bias.data[:, None, None, None]
    out = np.ascontiguousarray(acc.transpose(1, 0, 2, 3))

    def backward(g):
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3))  # [O,B,F,T]
        gw = np.zeros_like(w)
        gxp = np.zeros((c_in, n_batch) + xp.shape[2:], dtype=g.dtype)
        for i in range(k_freq):
            for j in range(k_time):
                window = xp[:, :, i:i + n_freq, j:j + n_time]
                gw[:, :, i, j] = np.tensordot(gt, window, axes=([1, 2, 3], [0, 2, 3]))
                gxp[:, :, i:i + n_freq, j:j + n_time] += np.tensordot(w[:, :, i, j], gt, axes=([0], [0]))
        gx = gxp.transpose(1, 0, 2, 3)[:, :, pad_f:pad_f + n_freq, past:past + n_time]
        grads = [np.ascontiguousarray(gx), gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, backward)


def maxpool_freq2(x: Tensor) -> Tensor:
    """Halve the frequency axis (second to last) by max over adjacent pairs."""
    n_freq = x.shape[-2]
    if n_freq % 2:
        raise ShapeError(f"maxpool_freq2 needs an even frequency size, got {n_freq}")
    pairs = x.data.reshape(x.shape[:-2] + (n_freq // 2, 2, x.shape[-1]))
    lower, upper = pairs[..., 0, :], pairs[..., 1, :]
    take_lower = lower >= upper
    out = np.where(take_lower, lower, upper)

    def backward(g):
        gp = np.zeros_like(pairs)
        gp[..., 0, :] = g * take_lower
        gp[..., 1, :] = g * ~take_lower
        return (gp.reshape(x.shape),)

    return _node(out, (x,), backward)


def _lstm_cell(x, h, c, w_ih, w_hh, bias):
    n_hidden = h.shape[-1]
    gates = x @ w_ih.T + h @ w_hh.T + bias
    i = _sigmoid(gates[:, :n_hidden])
    f = _sigmoid(gates[:, n_hidden:2 * n_hidden])
    cand = np.tanh(gates[:, 2 * n_hidden:3 * n_hidden])
    o = _sigmoid(gates[:, 3 * n_hidden:])
    c_new = f * c + i * cand
    tc = np.tanh(c_new)
    return (i, f, cand, o, tc), o * tc, c_new


def _lstm_gate_grads(dh, dc, c_prev, acts):
    """Pre-activation gate gradients and the cell gradient passed back in time."""
    i, f, cand, o, tc = acts
    dc = dc + dh * o * (1.0 - tc * tc)
    d_gates = np.concatenate(
        [
            dc * cand * i * (1.0 - i),
            dc * c_prev * f * (1.0 - f),
            dc * i * (1.0 - cand * cand),
            dh * tc * o * (1.0 - o),
        ],
        axis=-1,
    )
    return d_gates, dc * f


def _check_lstm(x: Tensor, h: Tensor, w_ih: Tensor, w_hh: Tensor) -> None:
    n_hidden = h.shape[-1]
    if w_ih.shape != (4 * n_hidden, x.shape[-1]) or w_hh.shape != (4 * n_hidden, n_hidden):
        raise ShapeError(f"lstm weights {w_ih.shape}, {w_hh.shape} do not fit x {x.shape}, h {h.shape}")


def lstm_step(
    x: Tensor,
    h: Tensor,
    c: Tensor,
    w_ih: Tensor,
    w_hh: Tensor,
    bias: Tensor,
) -> Tuple[Tensor, Tensor]:
    """One LSTM step for a batch of rows; gate order (input, forget, cell, output)."""
    _check_lstm(x, h, w_ih, w_hh)
    acts, h_new, c_new = _lstm_cell(x.data, h.data, c.data, w_ih.data, w_hh.data, bias.data)

    def backward(g):
        d_gates, dc_prev = _lstm_gate_grads(g[0], g[1], c.data, acts)
        return (
            d_gates @ w_ih.data,
            d_gates @ w_hh.data,
            dc_prev,
            d_gates.T @ x.data,
            d_gates.T @ h.data,
            d_gates.sum(axis=0),
        )

    both = _node(np.stack([h_new, c_new]), (x, h, c, w_ih, w_hh, bias), backward)
    return both[0], both[1]


def lstm_sequence(
    x: Tensor,
    h0: Tensor,
    c0: Tensor,
    w_ih: Tensor,
    w_hh: Tensor,
    bias: Tensor,
) -> Tensor:
    """Run an LSTM layer over x [T,N,D]; returns the hidden states [T,N,H].

    Each step computes exactly what ``lstm_step`` computes, so the two paths
    agree bit for bit.
    """
    if x.ndim != 3:
        raise ShapeError(f"lstm_sequence expects [T,N,D] input, got {x.shape}")
    _check_lstm(x, h0, w_ih, w_hh)
    n_steps = x.shape[0]
    hs, cs, acts = [h0.data], [c0.data], []
    for t in range(n_steps):
        a, h_new, c_new = _lstm_cell(x.data[t], hs[-1], cs[-1], w_ih.data, w_hh.data, bias.data)
        acts.append(a)
        hs.append(h_new)
        cs.append(c_new)
    out = np.stack(hs[1:]) if n_steps else np.zeros((0,) + h0.shape, dtype=x.dtype)

    def backward(g):
        gx = np.zeros_like(x.data)
        gw_ih = np.zeros_like(w_ih.data)
        gw_hh = np.zeros_like(w_hh.data)
        gb = np.zeros_like(bias.data)
        dh = np.zeros_like(h0.data)
        dc = np.zeros_like(c0.data)
        for t in reversed(range(n_steps)):
            d_gates, dc = _lstm_gate_grads(g[t] + dh, dc, cs[t], acts[t])
            gx[t] = d_gates @ w_ih.data
            gw_ih += d_gates.T @ x.data[t]
            gw_hh += d_gates.T @ hs[t]
            gb += d_gates.sum(axis=0)
            dh = d_gates @ w_hh.data
        return (gx, dh, dc, gw_ih, gw_hh, gb)

    return _node(out, (x, h0, c0, w_ih, w_hh, bias), backward)


# ------------------------------
# Losses
# ------------------------------

def _target_probs(probs: Tensor, targets: np.ndarray) -> np.ndarray:
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != probs.shape[:-1]:
        raise ShapeError(f"targets shape {targets.shape} does not match probs {probs.shape}")
    return np.take_along_axis(probs.data, targets[..., None], axis=-1)[..., 0]


def focal_loss(probs: Tensor, targets, alpha: float = 1.0, gamma: float = 2.0) -> Tensor:
    """Mean of -alpha * (1 - p_t)^gamma * log(p_t) over all cells."""
    targets = np.asarray(targets, dtype=np.int64)
    p = _target_probs(probs, targets)
    pc = np.maximum(p, PROB_FLOOR)
    q = 1.0 - pc
    n = max(1, p.size)
    loss = np.asarray(np.sum(-alpha * q ** gamma * np.log(pc)) / n, dtype=probs.dtype)

    def backward(g):
        dp = q ** gamma / pc
        if gamma != 0:
            dp = dp - gamma * np.where(q > 0, q ** (gamma - 1), 0.0) * np.log(pc)
        dp = -alpha * dp * (p >= PROB_FLOOR) * (g / n)
        full = np.zeros_like(probs.data)
        np.put_along_axis(full, targets[..., None], dp[..., None].astype(full.dtype), axis=-1)
        return (full,)

    return _node(loss, (probs,), backward)


def cross_entropy(probs: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of the target class."""
    targets = np.asarray(targets, dtype=np.int64)
    p = _target_probs(probs, targets)
    pc = np.maximum(p, PROB_FLOOR)
    n = max(1, p.size)
    loss = np.asarray(-np.log(pc).sum() / n, dtype=probs.dtype)

    def backward(g):
        dp = -(p >= PROB_FLOOR).astype(pc.dtype) / pc * (g / n)
        full = np.zeros_like(probs.data)
        np.put_along_axis(full, targets[..., None], dp[..., None].astype(full.dtype), axis=-1)
        return (full,)

    return _node(loss, (probs,), backward)


def masked_l2(pred: Tensor, target, mask) -> Tensor:
    """Squared error summed over mask==1 cells, divided by max(1, mask count)."""
    mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=pred.dtype)
    if mask.shape != pred.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match prediction {pred.shape}")
    diff = pred - _lift(target, pred)
    denom = max(1.0, float(mask.sum()))
    return (diff * diff * mask).sum() * (1.0 / denom)

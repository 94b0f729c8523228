"""Reverse-mode automatic differentiation over float64 NumPy arrays.

The primitive set is deliberately coarse (matmul, softmax, layernorm, gelu,
label gathers) so a transformer forward records tens of tape nodes rather
than thousands.  Each op appends one node to an implicit tape ordered by
creation; ``backward`` walks the reachable part of that tape once in
reverse, accumulating vector-Jacobian products into ``.grad``.

All values are float64.  Every primitive checks its output and raises
:class:`NumericError` naming the op the moment a NaN or infinity appears,
so a diverging run aborts at the first bad value instead of training on
garbage.

Gradients are verified against central finite differences via
:func:`grad_check`; the test suite runs it over every primitive and over
full model losses.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError

_counter = 0
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (used for augmentation passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NumericError(f"non-finite value produced by op '{op}'")


class Tensor:
    """A float64 array plus the tape bookkeeping needed for backward."""

    __slots__ = ("data", "requires_grad", "grad", "_op", "_parents", "_vjp", "_id")

    def __init__(self, data, requires_grad: bool = False):
        global _counter
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        _counter += 1
        self._id = _counter

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, op={self._op!r})"


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...],
          vjp: Callable) -> Tensor:
    _check_finite(data, op)
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._op = op
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad over axes that were broadcast when expanding to grad.shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into .grad for every reachable node.

    The tape is creation-ordered, so walking reachable nodes by descending
    id visits each exactly once with its output gradient complete.
    """
    if loss.data.size != 1:
        raise ValueError("backward expects a scalar loss")
    if not loss.requires_grad:
        raise ValueError("loss does not require grad; nothing to differentiate")
    reachable: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if node._id in reachable:
            continue
        reachable[node._id] = node
        for p in node._parents:
            if p.requires_grad and p._id not in reachable:
                stack.append(p)
    loss.grad = np.ones_like(loss.data)
    for node in sorted(reachable.values(), key=lambda n: n._id, reverse=True):
        if node._vjp is None or node.grad is None:
            continue
        grads = node._vjp(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            _check_finite(g, node._op + ".backward")
            if parent.grad is None:
                parent.grad = g.copy() if g.base is not None or g is node.grad else g
            else:
                parent.grad = parent.grad + g


def zero_grads(tensors: Sequence[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(data, "add", (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), -_unbroadcast(g, b.data.shape)

    return _make(data, "sub", (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def vjp(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _make(data, "mul", (a, b), vjp)


def scale(a: Tensor, s: float) -> Tensor:
    data = a.data * s

    def vjp(g):
        return (g * s,)

    return _make(data, "scale", (a,), vjp)


def add_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Add a non-differentiable constant (broadcastable)."""
    data = a.data + c

    def vjp(g):
        return (_unbroadcast(g, a.data.shape),)

    return _make(data, "add_const", (a,), vjp)


def mul_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Multiply by a non-differentiable constant (broadcastable)."""
    c = np.asarray(c, dtype=np.float64)
    data = a.data * c

    def vjp(g):
        return (_unbroadcast(g * c, a.data.shape),)

    return _make(data, "mul_const", (a,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product."""
    data = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _make(data, "matmul", (a, b), vjp)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over stacked 2-D operands: (B,n,k) @ (B,k,m)."""
    data = np.matmul(a.data, b.data)

    def vjp(g):
        return (np.matmul(g, b.data.transpose(0, 2, 1)),
                np.matmul(a.data.transpose(0, 2, 1), g))

    return _make(data, "bmm", (a, b), vjp)


def bmm_const(w: np.ndarray, a: Tensor) -> Tensor:
    """Batched product with a constant left operand, e.g. merge matrices."""
    data = np.matmul(w, a.data)

    def vjp(g):
        return (np.matmul(w.transpose(0, 2, 1), g),)

    return _make(data, "bmm_const", (a,), vjp)


def transpose(a: Tensor) -> Tensor:
    data = a.data.T

    def vjp(g):
        return (g.T,)

    return _make(data, "transpose", (a,), vjp)


def swap_last(a: Tensor) -> Tensor:
    """Swap the last two axes (attention key transpose for stacked operands)."""
    data = np.swapaxes(a.data, -1, -2)

    def vjp(g):
        return (np.swapaxes(g, -1, -2),)

    return _make(data, "swap_last", (a,), vjp)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    orig = a.data.shape
    data = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(orig),)

    return _make(data, "reshape", (a,), vjp)


def slice_last(a: Tensor, lo: int, hi: int) -> Tensor:
    data = a.data[..., lo:hi]

    def vjp(g):
        full = np.zeros_like(a.data)
        full[..., lo:hi] = g
        return (full,)

    return _make(data, "slice_last", (a,), vjp)


def concat_last(parts: Sequence[Tensor]) -> Tensor:
    data = np.concatenate([p.data for p in parts], axis=-1)
    widths = [p.data.shape[-1] for p in parts]

    def vjp(g):
        out = []
        lo = 0
        for w in widths:
            out.append(g[..., lo:lo + w])
            lo += w
        return out

    return _make(data, "concat_last", tuple(parts), vjp)


def slice_mid(a: Tensor, lo: int, hi: int) -> Tensor:
    """Slice along axis 1 (the sequence axis of (B, S, D) stacks)."""
    data = a.data[:, lo:hi]

    def vjp(g):
        full = np.zeros_like(a.data)
        full[:, lo:hi] = g
        return (full,)

    return _make(data, "slice_mid", (a,), vjp)


def concat_mid(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 1."""
    data = np.concatenate([p.data for p in parts], axis=1)
    widths = [p.data.shape[1] for p in parts]

    def vjp(g):
        out = []
        lo = 0
        for w in widths:
            out.append(g[:, lo:lo + w])
            lo += w
        return out

    return _make(data, "concat_mid", tuple(parts), vjp)


def take_rows(w: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup (token embedding); ids is a constant integer array."""
    data = w.data[ids]

    def vjp(g):
        full = np.zeros_like(w.data)
        np.add.at(full, ids, g)
        return (full,)

    return _make(data, "take_rows", (w,), vjp)


def softmax_last(a: Tensor) -> Tensor:
    """Softmax over the last axis, shift-stabilised."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - inner),)

    return _make(y, "softmax", (a,), vjp)


def layernorm_rows(x: Tensor, gain: Tensor, bias: Tensor,
                   eps: float = 1e-5) -> Tensor:
    """Layer normalisation over the last axis with affine parameters."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data
    d = x.data.shape[-1]

    def vjp(g):
        dxhat = g * gain.data
        gx = inv * (dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True) / d)
        axes = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _make(y, "layernorm", (x, gain, bias), vjp)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    u = _GELU_C * (x.data + 0.044715 * x.data ** 3)
    t = np.tanh(u)
    y = 0.5 * x.data * (1.0 + t)

    def vjp(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x.data ** 2)
        dy = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du
        return (g * dy,)

    return _make(y, "gelu", (x,), vjp)


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), computed without overflow."""
    y = np.logaddexp(0.0, x.data)

    def vjp(g):
        sig = 1.0 / (1.0 + np.exp(-x.data))
        return (g * sig,)

    return _make(y, "softplus", (x,), vjp)


def gather_nll(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Per-row negative log softmax probability of the labelled class.

    logits is (B, C); labels is a constant int array (B,).  Returns (B,).
    """
    z = logits.data
    m = z.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=-1))
    rows = np.arange(z.shape[0])
    out = lse - z[rows, labels]

    def vjp(g):
        p = np.exp(z - m)
        p /= p.sum(axis=-1, keepdims=True)
        gz = p * g[:, None]
        gz[rows, labels] -= g
        return (gz,)

    return _make(out, "gather_nll", (logits,), vjp)


def sum_all(a: Tensor) -> Tensor:
    data = np.asarray(a.data.sum())

    def vjp(g):
        return (np.broadcast_to(g, a.data.shape).astype(np.float64),)

    return _make(data, "sum", (a,), vjp)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    data = np.asarray(a.data.mean())

    def vjp(g):
        return (np.broadcast_to(g / n, a.data.shape).astype(np.float64),)

    return _make(data, "mean", (a,), vjp)


def dot_const(a: Tensor, w: np.ndarray) -> Tensor:
    """Full contraction with a constant weight array: sum(a * w)."""
    w = np.asarray(w, dtype=np.float64)
    data = np.asarray((a.data * w).sum())

    def vjp(g):
        return (g * w,)

    return _make(data, "dot_const", (a,), vjp)


def sum_last(a: Tensor) -> Tensor:
    """Sum over the last axis."""
    data = a.data.sum(axis=-1)

    def vjp(g):
        return (np.repeat(g[..., None], a.data.shape[-1], axis=-1),)

    return _make(data, "sum_last", (a,), vjp)


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------

def grad_check(fn: Callable[[], Tensor], params: Sequence[Tensor],
               samples: int = 50, h: float = 1e-5,
               seed: int = 0) -> float:
    """Worst relative error between tape gradients and central differences.

    ``fn`` recomputes the scalar loss from ``params`` on every call.  A
    fixed number of coordinates is sampled across all parameters; each is
    nudged by +-h while everything else (data, masks, merge plans baked
    into fn's closure) stays fixed.  The relative error denominator is
    floored at 1e-2, appropriate for losses of order one.
    """
    from .rng import Rng

    zero_grads(params)
    loss = fn()
    backward(loss)
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
             for p in params]
    sizes = [p.data.size for p in params]
    total = sum(sizes)
    rng = Rng(seed)
    worst = 0.0
    for _ in range(samples):
        flat = rng.randint(total)
        pi = 0
        while flat >= sizes[pi]:
            flat -= sizes[pi]
            pi += 1
        p = params[pi]
        orig = p.data.flat[flat]
        p.data.flat[flat] = orig + h
        up = fn().item()
        p.data.flat[flat] = orig - h
        down = fn().item()
        p.data.flat[flat] = orig
        fd = (up - down) / (2.0 * h)
        g = grads[pi].flat[flat]
        rel = abs(g - fd) / max(abs(g), abs(fd), 1e-2)
        worst = max(worst, rel)
    return worst

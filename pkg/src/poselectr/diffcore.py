"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable primitive records one node holding its parents and a
closure mapping the output cotangent to input cotangents.  ``backward`` orders
the recorded nodes into a :class:`Tape` (a topological list) and walks it in
reverse, so each node is visited exactly once.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_ids = itertools.count()
_local = threading.local()


@contextmanager
def record_patterns():
    """Collect the branch patterns (ReLU masks, sparsemax supports) of a forward pass.

    Two evaluations with equal logs lie on the same smooth piece of the
    function, which is what central differences need.
    """
    log = []
    prev = getattr(_local, "patterns", None)
    _local.patterns = log
    try:
        yield log
    finally:
        _local.patterns = prev


def note_pattern(mask):
    log = getattr(_local, "patterns", None)
    if log is not None:
        log.append(np.packbits(np.asarray(mask, dtype=bool)).tobytes())


class Tensor:
    """A float64 array that may take part in gradient recording."""

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad=False, *, _parents=(), _backward=None, _op="leaf"):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = tuple(_parents)
        self._backward = _backward
        self._op = _op
        self.id = next(_ids)

    # -- basic accessors -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def op(self):
        return self._op

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data.copy()

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    # -- operator sugar ----------------------------------------------------
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return swap_last(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op):
    """Create an op output; record the node only if some input needs a gradient."""
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, _parents=parents, _backward=backward, _op=op)
    return Tensor(data, _op=op)


def _unbroadcast(grad, shape):
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Tape and backward
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TapeEntry:
    op: str
    inputs: tuple
    output: int


class Tape:
    """Topologically ordered record of the primitives that produced a tensor."""

    def __init__(self, nodes: Sequence[Tensor]):
        self.nodes = list(nodes)
        self.entries = [
            TapeEntry(n._op, tuple(p.id for p in n._parents), n.id) for n in self.nodes if n._parents
        ]

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order, seen = [], set()
        stack = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.id in seen:
                continue
            seen.add(node.id)
            stack.append((node, True))
            for p in node._parents:
                if p.id not in seen and p.requires_grad:
                    stack.append((p, False))
        return cls(order)

    def op_counts(self):
        counts = {}
        for e in self.entries:
            counts[e.op] = counts.get(e.op, 0) + 1
        return dict(sorted(counts.items()))

    def __len__(self):
        return len(self.entries)


def backward(loss: Tensor) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss was not produced on an active tape (no input requires grad)")
    tape = Tape.from_output(loss)
    grads = {loss.id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        if not node._parents:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg
    return tape


# ---------------------------------------------------------------------------
# Elementwise and structural primitives
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), bw, "mul")


def matmul(a, b):
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), bw, "matmul")


def transpose(x, axes):
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def swap_last(x):
    x = as_tensor(x)
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def getitem(x, index):
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _make(x.data[index], (x,), bw, "getitem")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), bw, "sum")


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    note_pattern(mask)
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def softmax_lastdim(x):
    """Row softmax over the last axis with max subtraction."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), bw, "softmax")


def row_norm(x):
    """Euclidean norm over the last axis; the gradient at a zero row is taken as zero."""
    x = as_tensor(x)
    n = np.sqrt((x.data ** 2).sum(axis=-1))

    def bw(g):
        safe = np.where(n > 0, n, 1.0)
        return (np.where((n > 0)[..., None], x.data / safe[..., None], 0.0) * g[..., None],)

    return _make(n, (x,), bw, "row_norm")


# ---------------------------------------------------------------------------
# Sequence primitives (operate along axis -2, channels on axis -1)
# ---------------------------------------------------------------------------


def _out_len(T, w, stride, pad):
    if stride < 1 or pad < 0 or w < 1:
        raise DimensionError(f"invalid window/stride/pad ({w}, {stride}, {pad})")
    if w > T + 2 * pad:
        raise DimensionError(f"window {w} wider than padded input length {T + 2 * pad}")
    return (T + 2 * pad - w) // stride + 1


def conv_output_length(T, w, stride, pad):
    return _out_len(T, w, stride, pad)


def _pad_time(a, pad):
    if pad == 0:
        return a
    width = [(0, 0)] * a.ndim
    width[-2] = (pad, pad)
    return np.pad(a, width)


def conv1d(x, kernel, stride=1, pad=0):
    """Zero-padded 1-D convolution along axis -2.

    ``x`` has shape ``(..., T, c_in)`` and ``kernel`` ``(w, c_in, c_out)``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim < 2 or kernel.ndim != 3 or kernel.shape[1] != x.shape[-1]:
        raise DimensionError(f"conv1d shape mismatch: input {x.shape}, kernel {kernel.shape}")
    T = x.shape[-2]
    w = kernel.shape[0]
    T_out = _out_len(T, w, stride, pad)
    xp = _pad_time(x.data, pad)
    starts = np.arange(T_out) * stride
    idx = starts[:, None] + np.arange(w)[None, :]
    cols = xp[..., idx, :]  # (..., T_out, w, c_in)
    kd = kernel.data
    out = np.einsum("...twc,wco->...to", cols, kd)

    def bw(g):
        lead = "".join("abdefghijk"[: g.ndim - 2])
        gk = np.einsum(f"{lead}twc,{lead}to->wco", cols, g)
        dcols = np.einsum("...to,wco->...twc", g, kd)
        gxp = np.zeros(xp.shape)
        for j in range(w):
            gxp[..., starts + j, :] += dcols[..., :, j, :]
        gx = gxp[..., pad : pad + T, :] if pad else gxp
        return gx, gk

    return _make(out, (x, kernel), bw, "conv1d")


def avg_pool1d(x, window, stride, pad=0):
    """Average pooling along axis -2; padded positions are left out of each mean.

    A window lying entirely in the padding yields zero.
    """
    x = as_tensor(x)
    if x.ndim < 2:
        raise DimensionError(f"avg_pool1d needs (..., T, c) input, got {x.shape}")
    T = x.shape[-2]
    T_out = _out_len(T, window, stride, pad)
    xp = _pad_time(x.data, pad)
    starts = np.arange(T_out) * stride
    lo = np.clip(starts - pad, 0, T)
    hi = np.clip(starts - pad + window, 0, T)
    counts = (hi - lo).astype(np.float64)
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)[:, None]
    total = np.zeros(x.shape[:-2] + (T_out, x.shape[-1]))
    for j in range(window):
        total += xp[..., starts + j, :]
    out = total * inv

    def bw(g):
        gs = g * inv
        gxp = np.zeros(xp.shape)
        for j in range(window):
            gxp[..., starts + j, :] += gs
        return (gxp[..., pad : pad + T, :] if pad else gxp,)

    return _make(out, (x,), bw, "avg_pool1d")


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------


def _relative_errors(analytic, numeric):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def numerical_gradient(f: Callable[[], Tensor], x: Tensor, eps=1e-6, coords=None, guard=False):
    """Central differences of the scalar ``f()`` with respect to ``x.data``.

    With ``guard`` the coordinates whose +-eps evaluations change a branch
    pattern (see :func:`record_patterns`) come back as NaN.
    """
    flat = x.data.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    num = np.zeros(flat.size)
    base = None
    if guard:
        with record_patterns() as base:
            f()
    for i in coords:
        orig = flat[i]
        hi, lo = orig + eps, orig - eps
        flat[i] = hi
        with record_patterns() as lp:
            fp = f().item()
        flat[i] = lo
        with record_patterns() as lm:
            fm = f().item()
        flat[i] = orig
        # divide by the step actually representable, not 2*eps
        num[i] = (fp - fm) / (hi - lo)
        if guard and (lp != base or lm != base):
            num[i] = np.nan
    return num.reshape(x.shape)


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped: int


def grad_check_report(f: Callable[[], Tensor], params: Sequence[Tensor], eps=1e-6, max_coords=None, rng=None, guard=False):
    """Compare autodiff against central differences over ``params``.

    ``f`` takes no arguments and closes over ``params``.  Relative error per
    coordinate is |a - n| / max(|a|, |n|, 1e-8).  When ``max_coords`` is
    given, each parameter is checked on at most that many coordinates drawn
    by ``rng``.  With ``guard`` coordinates straddling a kink are skipped and
    counted.
    """
    for p in params:
        p.grad = None
    backward(f())
    worst, checked, skipped = 0.0, 0, 0
    for p in params:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad
        coords = None
        if max_coords is not None and p.size > max_coords:
            rng = rng if rng is not None else np.random.default_rng(0)
            coords = np.sort(rng.choice(p.size, size=max_coords, replace=False))
        numeric = numerical_gradient(f, p, eps, coords, guard=guard)
        a = analytic.reshape(-1)
        n = numeric.reshape(-1)
        if coords is not None:
            a, n = a[coords], n[coords]
        smooth = ~np.isnan(n)
        skipped += int((~smooth).sum())
        checked += int(smooth.sum())
        if smooth.any():
            worst = max(worst, float(_relative_errors(a[smooth], n[smooth]).max()))
        p.grad = None
    return GradCheckResult(worst, checked, skipped)


def grad_check_params(f: Callable[[], Tensor], params: Sequence[Tensor], eps=1e-6, max_coords=None, rng=None):
    """Max relative error between autodiff and central differences over ``params``."""
    return grad_check_report(f, params, eps, max_coords, rng).max_rel_error


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps=1e-6):
    """Max relative gradient error of scalar ``f(x)`` at ``x``."""
    if not x.requires_grad:
        x.requires_grad = True
    return grad_check_params(lambda: f(x), [x], eps)

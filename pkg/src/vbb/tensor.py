"""Dense float64 tensors with reverse-mode differentiation.

Every differentiable op records its parents and a closure mapping the output
gradient to per-parent gradients. ``backward`` orders the recorded graph
topologically (the "tape") and replays it in reverse.

Matmul and convolution ops report their multiply-add counts to any active
:class:`MacCounter`, which is how the complexity claims are checked against
closed-form formulas.
"""

from __future__ import annotations

import contextlib
import threading
from collections import defaultdict
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from scipy.special import erf

from vbb.errors import ConfigError, ContractError, DeterminismError, ShapeError

DTYPE = np.float64

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (per thread)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operator sugar
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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self) -> None:
        backward(self)


def _raise_item(t: Tensor) -> float:
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    needs = _grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
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
# multiply-add accounting


class MacCounter:
    """Accumulates multiply-add counts by scope name while active.

    >>> with MacCounter() as c:
    ...     _ = matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4))))
    >>> c.total
    24
    """

    def __init__(self):
        self.counts: dict[str, int] = defaultdict(int)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def __getitem__(self, scope: str) -> int:
        return self.counts.get(scope, 0)

    def __enter__(self) -> "MacCounter":
        stack = getattr(_state, "counters", None)
        if stack is None:
            stack = _state.counters = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.counters.remove(self)


@contextlib.contextmanager
def mac_scope(name: str) -> Iterator[None]:
    """Label multiply-adds issued inside the block with ``name``."""
    prev = getattr(_state, "scope", "other")
    _state.scope = name
    try:
        yield
    finally:
        _state.scope = prev


def _count(n: int) -> None:
    stack = getattr(_state, "counters", None)
    if stack:
        scope = getattr(_state, "scope", "other")
        for c in stack:
            c.counts[scope] += int(n)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make(a.data * s, (a,), lambda g: (g * s,), "scale")


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x.data**2) / np.sqrt(2.0 * np.pi)

    def bw(g):
        return (g * (cdf + x.data * pdf),)

    return _make(x.data * cdf, (x,), bw, "gelu")


# ---------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from exc
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose_last2(x: Tensor) -> Tensor:
    if x.ndim < 2:
        raise ShapeError(f"transpose_last2 needs ndim >= 2, got shape {x.shape}")
    out = np.ascontiguousarray(np.swapaxes(x.data, -1, -2))
    return _make(out, (x,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return _make(out, (x,), lambda g: (np.transpose(g, inv),), "permute")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    axis = axis % xs[0].ndim
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), bw, "concat")


def split(x: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    """Split into consecutive pieces of the given sizes along ``axis``."""
    axis = axis % x.ndim
    if sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover axis of length {x.shape[axis]}")
    parts = []
    start = 0
    for n in sizes:
        parts.append(slice_axis(x, start, start + n, axis))
        start += n
    return parts


def slice_axis(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    axis = axis % x.ndim
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def bw(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _make(x.data[index].copy(), (x,), bw, "slice")


def pad(x: Tensor, widths: Sequence[tuple[int, int]]) -> Tensor:
    """Zero-pad; ``widths`` holds one (before, after) pair per axis."""
    widths = tuple((int(a), int(b)) for a, b in widths)
    index = tuple(slice(a, n + a) for (a, _), n in zip(widths, x.shape))
    return _make(np.pad(x.data, widths), (x,), lambda g: (g[index],), "pad")


def index_select(x: Tensor, index: np.ndarray, axis: int = 1) -> Tensor:
    """Per-batch gather along ``axis``.

    ``index`` has shape ``x.shape[:axis] + (m,)`` and is broadcast over the
    trailing dimensions, like ``torch.gather`` with an expanded index.
    """
    axis = axis % x.ndim
    index = np.asarray(index, dtype=np.intp)
    if index.shape[:axis] != x.shape[:axis]:
        raise ShapeError(f"index shape {index.shape} does not match leading dims of {x.shape}")
    full = index.reshape(index.shape + (1,) * (x.ndim - axis - 1))
    full = np.broadcast_to(full, index.shape + x.shape[axis + 1:])
    out = np.take_along_axis(x.data, full, axis=axis)

    def bw(g):
        grad = np.zeros_like(x.data)
        grids = list(np.indices(full.shape, sparse=True))
        grids[axis] = full
        np.add.at(grad, tuple(grids), g)
        return (grad,)

    return _make(out, (x,), bw, "index_select")


# ---------------------------------------------------------------------------
# reductions


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out, dtype=DTYPE), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum_(x, axis, keepdims), 1.0 / float(n))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise ShapeError(f"matmul batch dimensions not broadcastable: {a.shape} @ {b.shape}") from exc
    m, k = a.shape[-2:]
    n = b.shape[-1]
    _count(int(np.prod(batch, dtype=np.int64)) * m * k * n)
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight (+ bias)`` with weight stored as [in, out]."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def depthwise_conv3x3(x: Tensor, kernel: Tensor) -> Tensor:
    """Depthwise 3x3 convolution, stride 1, zero padding 1, on [B, H, W, C].

    ``kernel`` is [3, 3, C]; output spatial size equals input spatial size.
    """
    if x.ndim != 4 or kernel.shape != (3, 3, x.shape[-1]):
        raise ShapeError(f"depthwise_conv3x3 expects [B,H,W,C] and [3,3,C], got {x.shape} and {kernel.shape}")
    B, H, W, C = x.shape
    _count(9 * B * H * W * C)
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.zeros_like(x.data)
    for di in range(3):
        for dj in range(3):
            out += xp[:, di:di + H, dj:dj + W, :] * kernel.data[di, dj]

    def bw(g):
        gx = gk = None
        if x.requires_grad:
            gp = np.zeros_like(xp)
            for di in range(3):
                for dj in range(3):
                    gp[:, di:di + H, dj:dj + W, :] += g * kernel.data[di, dj]
            gx = gp[:, 1:H + 1, 1:W + 1, :]
        if kernel.requires_grad:
            gk = np.empty_like(kernel.data)
            for di in range(3):
                for dj in range(3):
                    gk[di, dj] = np.einsum("bhwc,bhwc->c", xp[:, di:di + H, dj:dj + W, :], g)
        return gx, gk

    return _make(out, (x, kernel), bw, "dwconv3x3")


# ---------------------------------------------------------------------------
# normalisation and losses


def softmax_lastdim(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError(f"softmax needs a non-empty last dimension, got {x.shape}")
    z = x.data - np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / np.sum(e, axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - np.sum(g * p, axis=-1, keepdims=True)),)

    return _make(p, (x,), bw, "softmax")


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalise over the last (channel) dimension."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat if gamma is None else xhat * gamma.data
    if beta is not None:
        out = out + beta.data
    parents = tuple(t for t in (x, gamma, beta) if t is not None)

    def bw(g):
        gh = g if gamma is None else g * gamma.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        if gamma is not None:
            grads.append(_unbroadcast(g * xhat, gamma.shape))
        if beta is not None:
            grads.append(_unbroadcast(g, beta.shape))
        return grads

    return _make(out, parents, bw, "layer_norm")


def cross_entropy_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of [B, K] logits against integer labels."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy expects [B,K] logits and [B] labels, got {logits.shape} and {labels.shape}")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    rows = np.arange(labels.shape[0])
    loss = -logp[rows, labels].mean()

    def bw(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g / labels.shape[0]),)

    return _make(np.asarray(loss, dtype=DTYPE), (logits,), bw, "cross_entropy")


def avg_pool_tokens(x: Tensor, pool: int) -> Tensor:
    """Average consecutive groups of ``pool`` tokens of a [B, L, C] tensor.

    A trailing partial group averages only the tokens it contains.
    """
    if pool < 1:
        raise ConfigError(f"pool size must be >= 1, got {pool}")
    if x.ndim != 3:
        raise ShapeError(f"avg_pool_tokens expects [B,L,C], got {x.shape}")
    B, L, C = x.shape
    if pool == 1:
        return _make(x.data.copy(), (x,), lambda g: (g,), "avg_pool")
    groups = -(-L // pool)
    counts = np.full(groups, float(pool))
    counts[-1] = L - pool * (groups - 1)
    padded = np.pad(x.data, ((0, 0), (0, groups * pool - L), (0, 0)))
    out = padded.reshape(B, groups, pool, C).sum(axis=2) / counts[None, :, None]

    def bw(g):
        per = np.repeat(g / counts[None, :, None], pool, axis=1)
        return (per[:, :L, :],)

    return _make(out, (x,), bw, "avg_pool")


def argsort(x, axis: int = -1) -> np.ndarray:
    """Stable argsort; not differentiable."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    return np.argsort(arr, axis=axis, kind="stable")


# ---------------------------------------------------------------------------
# reverse pass


def build_tape(loss: Tensor) -> list[Tensor]:
    """Recorded ops reachable from ``loss`` in topological order."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return [t for t in order if t._backward is not None]


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every requires_grad tensor."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor with requires_grad=True")
    tape = build_tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        _accumulate(node, g)
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is None:
                _accumulate(parent, pg)
            elif id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=DTYPE).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# finite differences


def numerical_gradient(f: Callable[[], Tensor], param: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f()`` with respect to ``param``."""
    out = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = out.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f().item()
            flat[i] = orig - eps
            fm = f().item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * eps)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    ``f`` must rebuild its graph on each call and be deterministic; two probe
    calls are compared bit-for-bit first.
    """
    params = list(params)
    with no_grad():
        first, second = f().item(), f().item()
    if first != second and not (np.isnan(first) and np.isnan(second)):
        raise DeterminismError(f"f returned {first!r} then {second!r} on identical calls")
    for p in params:
        p.zero_grad()
    backward(f())
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        numeric = numerical_gradient(f, p, eps)
        if analytic.size:
            worst = max(worst, float(relative_error(analytic, numeric).max()))
    for p in params:
        p.zero_grad()
    return worst

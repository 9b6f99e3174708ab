"""Loop-based reference implementations used to check the engine.

Nothing here imports the engine's batched ops; inputs and weights are plain
numpy arrays and every reduction is written out. These are slow on purpose
and only meant for small instances (L <= 64).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from vbb.tensor import MacCounter


@dataclass(frozen=True)
class OracleReport:
    max_abs_diff: float
    max_rel_diff: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_abs_diff <= self.tolerance


def compare(actual, expected, tolerance: float = 1e-9) -> OracleReport:
    a = np.asarray(getattr(actual, "data", actual), dtype=np.float64)
    b = np.asarray(getattr(expected, "data", expected), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    diff = np.abs(a - b)
    rel = diff / np.maximum(np.abs(b), 1e-300)
    return OracleReport(float(diff.max(initial=0.0)), float(rel.max(initial=0.0)), tolerance)


def _dot(u, v) -> float:
    total = 0.0
    for a, b in zip(u, v):
        total += a * b
    return total


def _project(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Row-by-row x @ w for x [N, Cin], w [Cin, Cout]."""
    n, cin = x.shape
    out = np.zeros((n, w.shape[1]))
    for i in range(n):
        for j in range(w.shape[1]):
            out[i, j] = _dot(x[i], w[:, j])
    return out


def _attend(q: np.ndarray, k: np.ndarray, v: np.ndarray, heads: int, scale: float | None) -> np.ndarray:
    """Per-head, per-query softmax attention of projected q [Nq,C], k/v [Nk,C]."""
    nq, c = q.shape
    nk = k.shape[0]
    d = c // heads
    if scale is None:
        scale = 1.0 / math.sqrt(d)
    out = np.zeros((nq, c))
    for h in range(heads):
        cols = slice(h * d, (h + 1) * d)
        for i in range(nq):
            logits = [_dot(q[i, cols], k[j, cols]) * scale for j in range(nk)]
            top = max(logits)
            weights = [math.exp(s - top) for s in logits]
            z = sum(weights)
            for j in range(nk):
                out[i, cols] += (weights[j] / z) * v[j, cols]
    return out


def full_attention_oracle(x, heads: int, qkv, scale: float | None = None) -> np.ndarray:
    """Multi-head self-attention of [B, L, C] tokens with a [C, 3C] qkv weight."""
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    w = np.asarray(getattr(qkv, "data", qkv), dtype=np.float64)
    B, L, C = x.shape
    out = np.zeros_like(x)
    for b in range(B):
        q = _project(x[b], w[:, :C])
        k = _project(x[b], w[:, C:2 * C])
        v = _project(x[b], w[:, 2 * C:])
        out[b] = _attend(q, k, v, heads, scale)
    return out


def rs_win_oracle(x, heads: int, qkv, window_size: int, shuffle: np.ndarray) -> np.ndarray:
    """Materialise shuffled windows explicitly and attend inside each one.

    The last window may be short when L is not a multiple of the window size;
    it then attends only among its real tokens.
    """
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    B, L, C = x.shape
    out = np.zeros_like(x)
    for b in range(B):
        order = [int(i) for i in shuffle[b]]
        for start in range(0, L, window_size):
            members = order[start:start + window_size]
            window = np.stack([x[b, i] for i in members])[None]
            result = full_attention_oracle(window, heads, qkv)[0]
            for slot, token in enumerate(members):
                out[b, token] = result[slot]
    return out


def global_attention_oracle(x, heads: int, qkv, pool_size: int) -> np.ndarray:
    """Queries from every token, keys/values from means of consecutive groups."""
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    w = np.asarray(getattr(qkv, "data", qkv), dtype=np.float64)
    B, L, C = x.shape
    out = np.zeros_like(x)
    for b in range(B):
        groups = []
        for start in range(0, L, pool_size):
            members = range(start, min(start + pool_size, L))
            acc = np.zeros(C)
            for i in members:
                acc += x[b, i]
            groups.append(acc / len(members))
        pooled = np.stack(groups)
        q = _project(x[b], w[:, :C])
        k = _project(pooled, w[:, C:2 * C])
        v = _project(pooled, w[:, 2 * C:])
        out[b] = _attend(q, k, v, heads, None)
    return out


def conv2d_oracle(grid, kernel, zero_pad: bool = True) -> np.ndarray:
    """Depthwise 3x3 convolution by direct summation.

    ``grid`` is [H, W] or [H, W, C]; ``kernel`` is [3, 3] or [3, 3, C].
    Taps that fall outside the grid contribute zero when ``zero_pad`` is set;
    otherwise the output shrinks to the valid region.
    """
    g = np.asarray(grid, dtype=np.float64)
    k = np.asarray(kernel, dtype=np.float64)
    squeeze = g.ndim == 2
    if squeeze:
        g = g[:, :, None]
        k = k[:, :, None]
    H, W, C = g.shape
    if zero_pad:
        rows, cols, off = range(H), range(W), 0
    else:
        rows, cols, off = range(1, H - 1), range(1, W - 1), 1
    out = np.zeros((len(rows), len(cols), C))
    for c in range(C):
        for i in rows:
            for j in cols:
                acc = 0.0
                for di in range(3):
                    for dj in range(3):
                        y, x = i + di - 1, j + dj - 1
                        if 0 <= y < H and 0 <= x < W:
                            acc += g[y, x, c] * k[di, dj, c]
                out[i - off, j - off, c] = acc
    return out[:, :, 0] if squeeze else out


def count_multiply_adds(fn: Callable[[], object]) -> MacCounter:
    """Run ``fn`` once and return the per-scope multiply-add tally."""
    with MacCounter() as counter:
        fn()
    return counter

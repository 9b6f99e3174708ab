"""Multiply-add tables for the complexity comparison."""

from __future__ import annotations

import math

import numpy as np

from vbb import tensor as T
from vbb.attention import ConvParams, conv_branch, flop_count, full_attention, global_attention, rs_win_attention
from vbb.harness.config import RunConfig
from vbb.tensor import MacCounter, Tensor

MECHANISMS = ("conv", "rs_win", "global", "full")
COUNTER_LIMIT = 64
HEADER = ["mechanism", "length", "window_size", "pool_size", "multiply_adds", "projection_multiply_adds", "counter_verified"]


def grid_for(length: int) -> tuple[int, int]:
    h = int(math.isqrt(length))
    while length % h:
        h -= 1
    return h, length // h


def counted(mechanism: str, length: int, channels: int, heads: int, window: int, pool: int) -> tuple[int, int]:
    """(mixing, projection) multiply-adds measured by running the engine once."""
    width = channels if mechanism == "full" else channels // 3
    rng = np.random.default_rng(length)
    x = Tensor(rng.normal(size=(1, length, width)))
    qkv = Tensor(rng.normal(size=(width, 3 * width)))
    with MacCounter() as c, T.no_grad():
        if mechanism == "full":
            full_attention(x, qkv, heads)
        elif mechanism == "rs_win":
            rs_win_attention(x, qkv, heads=heads, window_size=window, rng_seed=0)
        elif mechanism == "global":
            global_attention(x, qkv, heads=heads, pool_size=pool)
        else:
            eye = Tensor(np.eye(width))
            params = ConvParams(eye, Tensor(rng.normal(size=(3, 3, width))), Tensor(np.ones(width)), Tensor(np.zeros(width)), eye)
            conv_branch(x, params, *grid_for(length))
    mixing = c["attn_score"] + c["attn_mix"] + c["conv_spatial"]
    return mixing, c["proj"]


def bench_rows(cfg: RunConfig) -> list[list]:
    """One row per (mechanism, length).

    Global attention keeps ``bench_global_keys`` pooled keys, so its pool size
    grows with the length. Lengths up to 64 are re-counted on the engine;
    ``counter_verified`` is 1 on agreement, 0 on mismatch and empty when not
    measured.
    """
    C, heads = cfg.bench_channels, cfg.bench_heads
    rows = []
    for mech in MECHANISMS:
        for L in cfg.lengths:
            window = min(cfg.bench_window, L)
            pool = max(1, L // cfg.bench_global_keys)
            entry = flop_count(mech, L, C, heads, window_size=window, pool_size=pool)
            verified = ""
            if L <= COUNTER_LIMIT:
                verified = int(counted(mech, L, C, heads, window, pool) == (entry.mixing, entry.projection))
            rows.append([mech, L, window if mech == "rs_win" else "", pool if mech == "global" else "",
                         entry.mixing, entry.projection, verified])
    return rows

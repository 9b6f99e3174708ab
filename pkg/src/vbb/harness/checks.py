"""The invariant suite behind ``vbb check``."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from vbb import oracle
from vbb import tensor as T
from vbb.attention import (
    AttentionConfig,
    ConvParams,
    VbbBlockParams,
    conv_branch,
    global_attention,
    make_permutation,
    rs_win_attention,
    vbb_block,
)
from vbb.backbone import ModelConfig, StageConfig, VBBModel
from vbb.harness.bench import MECHANISMS, counted
from vbb.harness.config import RunConfig
from vbb.attention import flop_count
from vbb.tensor import Tensor

log = logging.getLogger(__name__)

ORACLE_TOL = 1e-9
GRAD_TOL = 1e-4

TINY_MODEL = ModelConfig(
    image_size=8,
    patch_size=2,
    stages=(StageConfig(1, 6, 3, 4, 2, False), StageConfig(1, 12, 3, 2, 2, True)),
    num_classes=3,
)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float


def permutation_roundtrip(cases: int, corrupt: bool = False, seed: int = 0) -> int:
    """Number of failing cases out of ``cases`` random (seed, B, L) draws."""
    rng = np.random.default_rng(seed)
    failures = 0
    for case in range(cases):
        B, L = int(rng.integers(1, 4)), int(rng.integers(1, 65))
        perm = make_permutation(B, L, int(rng.integers(2**31)))
        restore = perm.restore.copy()
        if corrupt and L > 1:
            restore[:, [0, 1]] = restore[:, [1, 0]]
        ident = np.take_along_axis(perm.shuffle, restore, axis=1)
        x = rng.normal(size=(B, L, 3))
        shuffled = np.take_along_axis(x, perm.shuffle[..., None], axis=1)
        back = np.take_along_axis(shuffled, restore[..., None], axis=1)
        ok = np.array_equal(ident, np.broadcast_to(np.arange(L), (B, L))) and np.array_equal(back, x)
        failures += not ok
    return failures


def _inputs(cfg: RunConfig, rng):
    B, L, C = cfg.check_batch, cfg.check_length, cfg.check_channels
    return Tensor(rng.normal(size=(B, L, C))), Tensor(rng.normal(size=(C, 3 * C)) / np.sqrt(C))


def rs_win_error(cfg: RunConfig, window: int, seed: int) -> float:
    rng = np.random.default_rng(seed)
    x, qkv = _inputs(cfg, rng)
    got = rs_win_attention(x, qkv, heads=cfg.check_heads, window_size=window, rng_seed=seed)
    if window == cfg.check_length:
        want = oracle.full_attention_oracle(x, cfg.check_heads, qkv)
    else:
        perm = make_permutation(cfg.check_batch, cfg.check_length, seed)
        want = oracle.rs_win_oracle(x, cfg.check_heads, qkv, window, perm.shuffle)
    return oracle.compare(got, want).max_abs_diff


def global_error(cfg: RunConfig, pool: int, seed: int) -> float:
    rng = np.random.default_rng(seed)
    x, qkv = _inputs(cfg, rng)
    got = global_attention(x, qkv, heads=cfg.check_heads, pool_size=pool)
    if pool == 1:
        want = oracle.full_attention_oracle(x, cfg.check_heads, qkv)
    else:
        want = oracle.global_attention_oracle(x, cfg.check_heads, qkv, pool)
    return oracle.compare(got, want).max_abs_diff


def conv_error(seed: int) -> float:
    rng = np.random.default_rng(seed)
    H, W, C = 5, 4, 3
    x = rng.normal(size=(1, H * W, C))
    kernel = rng.normal(size=(3, 3, C))
    eye = Tensor(np.eye(C))
    params = ConvParams(eye, Tensor(kernel), Tensor(np.ones(C)), Tensor(np.zeros(C)), eye)
    got = conv_branch(Tensor(x), params, H, W, test_mode=True).data.reshape(H, W, C)
    return float(np.abs(got - oracle.conv2d_oracle(x.reshape(H, W, C), kernel)).max())


def block_grad_error(seed: int) -> float:
    rng = np.random.default_rng(seed)
    cfg = AttentionConfig(heads_total=3, window_size=3, pool_size=2, grid_h=2, grid_w=3)
    params = VbbBlockParams.init(6, rng, mlp_ratio=2)
    x = Tensor(rng.normal(size=(2, 6, 6)), requires_grad=True)
    w = rng.normal(size=(2, 6, 6))

    def f():
        return T.sum_(T.mul(vbb_block(x, cfg, params, rng_seed=seed), w))

    return T.grad_check(f, [x] + [t for _, t in params.named_parameters()])


def model_grad_error(seed: int, config: ModelConfig = TINY_MODEL) -> float:
    model = VBBModel(config)
    rng = np.random.default_rng(seed)
    images = rng.normal(size=(1, config.in_channels, config.image_size, config.image_size))
    labels = rng.integers(0, config.num_classes, 1)

    def f():
        return T.cross_entropy_with_logits(model.forward(images, mode="eval"), labels)

    return T.grad_check(f, model.parameters())


def counter_mismatches(lengths=(16, 32, 64), channels: int = 18, heads: int = 3) -> int:
    bad = 0
    for mech in MECHANISMS:
        for L in lengths:
            window, pool = 8, 4
            entry = flop_count(mech, L, channels, heads, window_size=window, pool_size=pool)
            bad += counted(mech, L, channels, heads, window, pool) != (entry.mixing, entry.projection)
    return bad


def run_checks(cfg: RunConfig) -> list[CheckResult]:
    seed = cfg.seed
    corrupt = cfg.inject_fault == "restore"
    results = []

    def record(name, value, tol, passed=None):
        ok = value <= tol if passed is None else passed
        results.append(CheckResult(name, bool(ok), float(value), float(tol)))
        log.info("%s %s value=%.3g tol=%.3g", "PASS" if ok else "FAIL", name, value, tol)

    record("permutation_roundtrip", permutation_roundtrip(cfg.check_cases, corrupt, seed), 0)
    L = cfg.check_length
    record("rs_win_equivalence", rs_win_error(cfg, cfg.check_window_size, seed), ORACLE_TOL)
    record("rs_win_window_loop", rs_win_error(cfg, max(1, L // 3), seed + 1), ORACLE_TOL)
    record("global_equivalence", global_error(cfg, cfg.check_pool_size, seed), ORACLE_TOL)
    record("global_pooled_loop", global_error(cfg, max(2, L // 4), seed + 1), ORACLE_TOL)
    record("conv_oracle", conv_error(seed), 1e-12)
    record("gradcheck_block", block_grad_error(seed), GRAD_TOL)
    if cfg.check_model_gradcheck:
        record("gradcheck_model", model_grad_error(seed), GRAD_TOL)
    record("flop_counter", counter_mismatches(), 0)
    return results

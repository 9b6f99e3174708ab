"""The three parallel VBB mechanisms and the block that merges them.

A block splits its (pre-normed) channels into three contiguous thirds:

* a convolution branch: pointwise mix, 3x3 depthwise conv with zero padding,
  layer norm + GELU, pointwise mix;
* random-sampling-window (RS-Win) attention: tokens are randomly permuted,
  cut into fixed-size windows, attended within each window and restored;
* global attention: full-resolution queries against average-pooled keys and
  values.

Each group output is multiplied by its learnable scale (alpha, beta, lambda),
the three are concatenated, projected by ``w_o`` and added to the residual
stream, followed by a pre-norm MLP.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from vbb import tensor as T
from vbb.errors import ConfigError, ShapeError
from vbb.tensor import Tensor, mac_scope

MECHANISMS = ("conv", "rs_win", "global")


@dataclass(frozen=True)
class PermutationPair:
    """Per-batch shuffle indices and their inverse, both shaped [B, L]."""

    shuffle: np.ndarray
    restore: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return np.take_along_axis(x, _expand_index(self.shuffle, x.ndim), axis=1)

    def undo(self, x: np.ndarray) -> np.ndarray:
        return np.take_along_axis(x, _expand_index(self.restore, x.ndim), axis=1)


def _expand_index(idx: np.ndarray, ndim: int) -> np.ndarray:
    return idx.reshape(idx.shape + (1,) * (ndim - 2))


def make_permutation(batch: int, length: int, rng_seed: int) -> PermutationPair:
    """Sample one uniform random permutation per batch element.

    The shuffle order is the stable argsort of ``length`` uniform draws; the
    restore order is the argsort of the shuffle, so ``shuffle[restore]`` is the
    identity.
    """
    if length < 1:
        raise ConfigError(f"sequence length must be >= 1, got {length}")
    sample_map = np.random.default_rng(rng_seed).random((batch, length))
    shuffle = T.argsort(sample_map, axis=1)
    restore = T.argsort(shuffle, axis=1)
    return PermutationPair(shuffle, restore)


@dataclass(frozen=True)
class AttentionConfig:
    heads_total: int
    window_size: int
    pool_size: int
    grid_h: int
    grid_w: int
    seed_policy: str = "deterministic"

    def __post_init__(self):
        if self.heads_total < 3 or self.heads_total % 3:
            raise ConfigError(f"heads_total must be a positive multiple of 3, got {self.heads_total}")
        if self.window_size < 1:
            raise ConfigError(f"window_size must be >= 1, got {self.window_size}")
        if self.pool_size < 1:
            raise ConfigError(f"pool_size must be >= 1, got {self.pool_size}")
        if self.grid_h < 1 or self.grid_w < 1:
            raise ConfigError(f"grid must be positive, got {self.grid_h}x{self.grid_w}")
        if self.seed_policy not in ("deterministic", "per-step"):
            raise ConfigError(f"unknown seed_policy {self.seed_policy!r}")

    @property
    def length(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def group_heads(self) -> int:
        return self.heads_total // 3


# ---------------------------------------------------------------------------
# shared multi-head core


def _split_heads(x: Tensor, heads: int) -> Tensor:
    # [..., N, C] -> [..., h, N, d]
    *lead, n, c = x.shape
    x = T.reshape(x, (*lead, n, heads, c // heads))
    k = len(lead)
    return T.permute(x, (*range(k), k + 1, k, k + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, d = x.shape
    k = len(lead)
    x = T.permute(x, (*range(k), k + 1, k, k + 2))
    return T.reshape(x, (*lead, n, h * d))


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention of already-projected q/k/v.

    ``q`` is [..., Nq, C]; ``k`` and ``v`` are [..., Nk, C]. ``mask`` is an
    additive logit mask broadcastable to [..., h, Nq, Nk].
    """
    c = q.shape[-1]
    if c % heads:
        raise ConfigError(f"width {c} not divisible by {heads} heads")
    qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))
    with mac_scope("attn_score"):
        scores = T.matmul(qh, T.transpose_last2(kh))
    scores = T.scale(scores, 1.0 / math.sqrt(c // heads))
    if mask is not None:
        scores = T.add(scores, Tensor(mask))
    attn = T.softmax_lastdim(scores)
    with mac_scope("attn_mix"):
        out = T.matmul(attn, vh)
    return _merge_heads(out)


def _check_tokens(x: Tensor) -> None:
    if x.ndim != 3:
        raise ShapeError(f"expected token tensor [B,L,C], got shape {x.shape}")


def _qkv(x: Tensor, qkv: Tensor) -> list[Tensor]:
    c = x.shape[-1]
    if qkv.shape != (c, 3 * c):
        raise ShapeError(f"qkv weight must be {(c, 3 * c)}, got {qkv.shape}")
    with mac_scope("proj"):
        y = T.matmul(x, qkv)
    return T.split(y, [c, c, c], axis=-1)


def full_attention(x: Tensor, qkv: Tensor, heads: int) -> Tensor:
    """Dense multi-head self-attention over all L tokens (quadratic)."""
    _check_tokens(x)
    q, k, v = _qkv(x, qkv)
    return multi_head_attention(q, k, v, heads)


# ---------------------------------------------------------------------------
# mechanisms


def rs_win_attention(
    x: Tensor,
    qkv: Tensor,
    *,
    heads: int,
    window_size: int,
    rng_seed: int,
    perm: PermutationPair | None = None,
) -> Tensor:
    """Random-sampling-window attention on [B, L, C] tokens.

    If L is not a multiple of ``window_size`` the shuffled sequence is padded
    with zero tokens that are masked out of every softmax and dropped again
    before restoring. ``perm`` overrides the sampled permutation.
    """
    _check_tokens(x)
    B, L, C = x.shape
    if window_size < 1 or window_size > L:
        raise ConfigError(f"window_size {window_size} must lie in [1, L={L}]")
    if perm is None:
        perm = make_permutation(B, L, rng_seed)
    xs = T.index_select(x, perm.shuffle, axis=1)
    q, k, v = _qkv(xs, qkv)
    n_win = -(-L // window_size)
    extra = n_win * window_size - L
    mask = None
    if extra:
        widths = ((0, 0), (0, extra), (0, 0))
        q, k, v = (T.pad(t, widths) for t in (q, k, v))
        mask = np.zeros((n_win, window_size))
        mask[-1, window_size - extra:] = -np.inf
        mask = mask[None, :, None, None, :]
    q, k, v = (T.reshape(t, (B, n_win, window_size, C)) for t in (q, k, v))
    out = multi_head_attention(q, k, v, heads, mask)
    out = T.reshape(out, (B, n_win * window_size, C))
    if extra:
        out = T.slice_axis(out, 0, L, axis=1)
    return T.index_select(out, perm.restore, axis=1)


def global_attention(x: Tensor, qkv: Tensor, *, heads: int, pool_size: int) -> Tensor:
    """Full-resolution queries attending to average-pooled keys and values."""
    _check_tokens(x)
    C = x.shape[-1]
    if qkv.shape != (C, 3 * C):
        raise ShapeError(f"qkv weight must be {(C, 3 * C)}, got {qkv.shape}")
    w_q, w_kv = T.split(qkv, [C, 2 * C], axis=-1)
    pooled = T.avg_pool_tokens(x, pool_size)
    with mac_scope("proj"):
        q = T.matmul(x, w_q)
        kv = T.matmul(pooled, w_kv)
    k, v = T.split(kv, [C, C], axis=-1)
    return multi_head_attention(q, k, v, heads)


@dataclass
class ConvParams:
    pw_in: Tensor
    dw_kernel: Tensor
    norm_g: Tensor
    norm_b: Tensor
    pw_out: Tensor

    def tensors(self) -> Iterator[tuple[str, Tensor]]:
        for f in dataclasses.fields(self):
            yield f.name, getattr(self, f.name)


def conv_branch(x: Tensor, params: ConvParams, grid_h: int, grid_w: int, test_mode: bool = False) -> Tensor:
    """Pointwise -> 3x3 depthwise (zero padded) -> norm/GELU -> pointwise.

    ``test_mode`` bypasses the norm and activation so the branch is linear.
    """
    _check_tokens(x)
    B, L, C = x.shape
    if grid_h * grid_w != L:
        raise ConfigError(f"grid {grid_h}x{grid_w} does not match sequence length {L}")
    with mac_scope("proj"):
        y = T.matmul(x, params.pw_in)
    y = T.reshape(y, (B, grid_h, grid_w, C))
    with mac_scope("conv_spatial"):
        y = T.depthwise_conv3x3(y, params.dw_kernel)
    y = T.reshape(y, (B, L, C))
    if not test_mode:
        y = T.gelu(T.layer_norm(y, params.norm_g, params.norm_b))
    with mac_scope("proj"):
        return T.matmul(y, params.pw_out)


# ---------------------------------------------------------------------------
# block


@dataclass
class VbbBlockParams:
    """Learnable state of one block.

    A mechanism removed by ablation has ``None`` in place of its weights and a
    constant, non-trainable zero scale.
    """

    norm1_g: Tensor
    norm1_b: Tensor
    conv: ConvParams | None
    qkv_rs: Tensor | None
    qkv_ga: Tensor | None
    w_o: Tensor
    alpha: Tensor
    beta: Tensor
    lam: Tensor
    norm2_g: Tensor
    norm2_b: Tensor
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor
    disabled: frozenset = field(default_factory=frozenset)

    @property
    def channels(self) -> int:
        return self.w_o.shape[0]

    @classmethod
    def init(
        cls,
        channels: int,
        rng: np.random.Generator,
        mlp_ratio: int = 4,
        disabled: frozenset | set = frozenset(),
    ) -> "VbbBlockParams":
        if channels % 3:
            raise ConfigError(f"channels must be divisible by 3, got {channels}")
        disabled = frozenset(disabled)
        unknown = disabled - set(MECHANISMS)
        if unknown:
            raise ConfigError(f"unknown mechanisms {sorted(unknown)}")
        if len(disabled) == 3:
            raise ConfigError("at least one mechanism must stay enabled")
        C, G, H = channels, channels // 3, channels * mlp_ratio

        def w(fan_in, *shape):
            return Tensor(rng.normal(0.0, 1.0 / math.sqrt(fan_in), shape), requires_grad=True)

        def const(value, *shape, trainable=True):
            return Tensor(np.full(shape, value), requires_grad=trainable)

        conv = None
        if "conv" not in disabled:
            conv = ConvParams(
                pw_in=w(G, G, G),
                dw_kernel=w(9, 3, 3, G),
                norm_g=const(1.0, G),
                norm_b=const(0.0, G),
                pw_out=w(G, G, G),
            )
        qkv_rs = None if "rs_win" in disabled else w(G, G, 3 * G)
        qkv_ga = None if "global" in disabled else w(G, G, 3 * G)

        def scaling(mech):
            on = mech not in disabled
            return const(1.0 if on else 0.0, trainable=on)

        return cls(
            norm1_g=const(1.0, C),
            norm1_b=const(0.0, C),
            conv=conv,
            qkv_rs=qkv_rs,
            qkv_ga=qkv_ga,
            w_o=w(C, C, C),
            alpha=scaling("conv"),
            beta=scaling("rs_win"),
            lam=scaling("global"),
            norm2_g=const(1.0, C),
            norm2_b=const(0.0, C),
            fc1_w=w(C, C, H),
            fc1_b=const(0.0, H),
            fc2_w=w(H, H, C),
            fc2_b=const(0.0, C),
            disabled=disabled,
        )

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        """Trainable tensors in declaration order."""
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, ConvParams):
                for name, t in value.tensors():
                    yield f"conv.{name}", t
            elif isinstance(value, Tensor) and value.requires_grad:
                yield f.name, value

    def scaling_weights(self) -> tuple[float, float, float]:
        return self.alpha.item(), self.beta.item(), self.lam.item()


def vbb_block(
    x: Tensor,
    cfg: AttentionConfig,
    params: VbbBlockParams,
    rng_seed: int,
    test_mode: bool = False,
) -> Tensor:
    """One VBB block on [B, L, C] tokens.

    ``test_mode`` drops both layer norms, the conv-branch norm/activation and
    the MLP, leaving ``x + concat(alpha*conv, beta*rs, lam*ga) @ w_o``.
    """
    _check_tokens(x)
    B, L, C = x.shape
    if C % 3:
        raise ConfigError(f"channels must be divisible by 3, got {C}")
    if L != cfg.length:
        raise ConfigError(f"grid {cfg.grid_h}x{cfg.grid_w} does not match sequence length {L}")
    if C != params.channels:
        raise ShapeError(f"block built for {params.channels} channels, got {C}")
    G = C // 3
    heads = cfg.group_heads
    if G % heads:
        raise ConfigError(f"group width {G} not divisible by {heads} heads per group")

    h = x if test_mode else T.layer_norm(x, params.norm1_g, params.norm1_b)
    x_conv, x_rs, x_ga = T.split(h, [G, G, G], axis=-1)
    zeros = Tensor(np.zeros((B, L, G)))

    if params.conv is None:
        y_conv = zeros
    else:
        y_conv = T.mul(conv_branch(x_conv, params.conv, cfg.grid_h, cfg.grid_w, test_mode), params.alpha)
    if params.qkv_rs is None:
        y_rs = zeros
    else:
        y_rs = rs_win_attention(x_rs, params.qkv_rs, heads=heads, window_size=cfg.window_size, rng_seed=rng_seed)
        y_rs = T.mul(y_rs, params.beta)
    if params.qkv_ga is None:
        y_ga = zeros
    else:
        y_ga = T.mul(global_attention(x_ga, params.qkv_ga, heads=heads, pool_size=cfg.pool_size), params.lam)

    with mac_scope("proj"):
        mixed = T.matmul(T.concat([y_conv, y_rs, y_ga], axis=-1), params.w_o)
    x = T.add(x, mixed)
    if test_mode:
        return x
    h = T.layer_norm(x, params.norm2_g, params.norm2_b)
    with mac_scope("mlp"):
        h = T.gelu(T.linear(h, params.fc1_w, params.fc1_b))
        h = T.linear(h, params.fc2_w, params.fc2_b)
    return T.add(x, h)


# ---------------------------------------------------------------------------
# closed-form multiply-add counts


@dataclass(frozen=True)
class FlopEntry:
    """Multiply-adds of one mechanism on one sequence (batch size 1).

    ``mixing`` is the token-mixing cost (attention scores + weighted sum, or
    the depthwise taps for the conv branch); ``projection`` covers the
    channel projections inside the mechanism.
    """

    mechanism: str
    length: int
    mixing: int
    projection: int

    @property
    def total(self) -> int:
        return self.mixing + self.projection


def flop_count(
    mechanism: str,
    length: int,
    channels: int,
    heads: int = 1,
    window_size: int | None = None,
    pool_size: int | None = None,
) -> FlopEntry:
    """Closed-form multiply-add counts.

    ``channels`` is the full block width C; the VBB mechanisms run on a C/3
    group, full attention on all of C.
    """
    L = int(length)
    if mechanism == "full":
        C = channels
        if C % heads:
            raise ConfigError(f"channels {C} not divisible by {heads} heads")
        return FlopEntry("full", L, 2 * L * L * C, 3 * L * C * C)
    if channels % 3:
        raise ConfigError(f"channels must be divisible by 3, got {channels}")
    G = channels // 3
    if mechanism == "rs_win":
        if window_size is None or window_size < 1:
            raise ConfigError("rs_win needs window_size >= 1")
        padded = -(-L // window_size) * window_size
        return FlopEntry("rs_win", L, 2 * padded * window_size * G, 3 * L * G * G)
    if mechanism == "global":
        if pool_size is None or pool_size < 1:
            raise ConfigError("global needs pool_size >= 1")
        keys = -(-L // pool_size)
        return FlopEntry("global", L, 2 * L * keys * G, L * G * G + 2 * keys * G * G)
    if mechanism == "conv":
        return FlopEntry("conv", L, 9 * L * G, 2 * L * G * G)
    raise ConfigError(f"unknown mechanism {mechanism!r}")

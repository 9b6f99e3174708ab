"""Hierarchical VBB classifier: patch stem, stages of VBB blocks, linear head."""

from __future__ import annotations

import dataclasses
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from vbb import tensor as T
from vbb.attention import AttentionConfig, VbbBlockParams, vbb_block
from vbb.errors import ConfigError
from vbb.tensor import Tensor

MAGIC = b"VBB1"


@dataclass(frozen=True)
class StageConfig:
    depth: int
    channels: int
    heads: int
    window_size: int
    pool_size: int
    downsample: bool = False

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError(f"stage depth must be >= 1, got {self.depth}")
        if self.channels < 3 or self.channels % 3:
            raise ConfigError(f"stage channels must be a positive multiple of 3, got {self.channels}")
        if self.heads < 3 or self.heads % 3:
            raise ConfigError(f"stage heads must be a positive multiple of 3, got {self.heads}")
        if self.channels % self.heads:
            raise ConfigError(f"channels {self.channels} not divisible by heads {self.heads}")
        if self.window_size < 1 or self.pool_size < 1:
            raise ConfigError("window_size and pool_size must be >= 1")


_STAGE_KEYS = {
    "depths": "depth",
    "channels": "channels",
    "heads": "heads",
    "window_sizes": "window_size",
    "pool_sizes": "pool_size",
    "downsample": "downsample",
}


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 4
    stages: tuple[StageConfig, ...] = (
        StageConfig(2, 24, 3, 8, 4, False),
        StageConfig(2, 48, 6, 4, 2, True),
    )
    num_classes: int = 4
    disable_cnn: bool = False
    disable_rswin: bool = False
    disable_ga: bool = False
    positional_encoding: str = "none"
    in_channels: int = 3
    mlp_ratio: int = 4
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if not self.stages:
            raise ConfigError("at least one stage is required")
        if self.patch_size < 1 or self.image_size < 1 or self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.num_classes < 1 or self.in_channels < 1 or self.mlp_ratio < 1:
            raise ConfigError("num_classes, in_channels and mlp_ratio must be positive")
        if self.positional_encoding not in ("none", "absolute"):
            raise ConfigError(f"positional_encoding must be none|absolute, got {self.positional_encoding!r}")
        if self.disable_cnn and self.disable_rswin and self.disable_ga:
            raise ConfigError("at least one mechanism must stay enabled")
        if self.stages[0].downsample:
            raise ConfigError("the first stage cannot downsample")
        grid = self.image_size // self.patch_size
        prev = None
        for i, st in enumerate(self.stages):
            if st.downsample:
                if grid % 2:
                    raise ConfigError(f"stage {i}: cannot downsample odd grid {grid}x{grid}")
                grid //= 2
                if st.channels != 2 * prev:
                    raise ConfigError(f"stage {i}: downsampling stage must double channels ({prev} -> {2 * prev})")
            elif prev is not None and st.channels != prev:
                raise ConfigError(f"stage {i}: channels change ({prev} -> {st.channels}) without downsampling")
            if not self.disable_rswin and st.window_size > grid * grid:
                raise ConfigError(f"stage {i}: window_size {st.window_size} exceeds {grid * grid} tokens")
            prev = st.channels

    @property
    def disabled(self) -> frozenset:
        flags = {"conv": self.disable_cnn, "rs_win": self.disable_rswin, "global": self.disable_ga}
        return frozenset(k for k, v in flags.items() if v)

    def stage_grids(self) -> list[int]:
        grid = self.image_size // self.patch_size
        out = []
        for st in self.stages:
            if st.downsample:
                grid //= 2
            out.append(grid)
        return out

    def to_text(self) -> str:
        """Canonical ``key=value`` lines; the checkpoint header stores this."""
        lines = []
        for f in dataclasses.fields(self):
            if f.name == "stages":
                for key, attr in _STAGE_KEYS.items():
                    values = [int(getattr(s, attr)) for s in self.stages]
                    lines.append(f"{key}={','.join(map(str, values))}")
                continue
            value = getattr(self, f.name)
            lines.append(f"{f.name}={int(value) if isinstance(value, bool) else value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, values: Mapping[str, str]) -> "ModelConfig":
        """Build from string values; unknown keys are ignored."""
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name == "stages" or f.name not in values:
                continue
            raw = values[f.name]
            if f.type in ("bool",):
                kwargs[f.name] = _parse_bool(f.name, raw)
            elif f.type in ("int",):
                kwargs[f.name] = _parse_int(f.name, raw)
            else:
                kwargs[f.name] = raw.strip()
        present = [k for k in _STAGE_KEYS if k in values]
        if present:
            if len(present) != len(_STAGE_KEYS):
                missing = sorted(set(_STAGE_KEYS) - set(present))
                raise ConfigError(f"stage keys incomplete, missing {missing}")
            columns = {k: [v.strip() for v in values[k].split(",")] for k in _STAGE_KEYS}
            n = {len(v) for v in columns.values()}
            if len(n) != 1:
                raise ConfigError("stage lists must all have the same length")
            stages = []
            for i in range(n.pop()):
                st = {}
                for key, attr in _STAGE_KEYS.items():
                    raw = columns[key][i]
                    st[attr] = _parse_bool(key, raw) if attr == "downsample" else _parse_int(key, raw)
                stages.append(StageConfig(**st))
            kwargs["stages"] = tuple(stages)
        return cls(**kwargs)


def _parse_int(key: str, raw: str) -> int:
    try:
        return int(raw.strip())
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None


def _parse_bool(key: str, raw: str) -> bool:
    s = raw.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {raw!r}")


def parse_config_text(text: str) -> dict[str, str]:
    """Parse flat ``key=value`` text; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


# ---------------------------------------------------------------------------
# stem and patch merging


def patch_embed(image: Tensor, patch_size: int, weight: Tensor, bias: Tensor | None = None) -> tuple[Tensor, tuple[int, int]]:
    """Project non-overlapping patches of [B, Cin, H, W] images to tokens."""
    B, Cin, H, W = image.shape
    p = patch_size
    if H % p or W % p:
        raise ConfigError(f"image {H}x{W} not divisible by patch size {p}")
    gh, gw = H // p, W // p
    x = T.reshape(image, (B, Cin, gh, p, gw, p))
    x = T.permute(x, (0, 2, 4, 1, 3, 5))
    x = T.reshape(x, (B, gh * gw, Cin * p * p))
    with T.mac_scope("stem"):
        return T.linear(x, weight, bias), (gh, gw)


def downsample(x: Tensor, grid: tuple[int, int], norm_g: Tensor, norm_b: Tensor, weight: Tensor) -> tuple[Tensor, tuple[int, int]]:
    """2x2 patch merging: concat each 2x2 neighbourhood, norm, project."""
    B, L, C = x.shape
    gh, gw = grid
    if gh * gw != L:
        raise ConfigError(f"grid {gh}x{gw} does not match sequence length {L}")
    if gh % 2 or gw % 2:
        raise ConfigError(f"cannot merge 2x2 patches of odd grid {gh}x{gw}")
    x = T.reshape(x, (B, gh // 2, 2, gw // 2, 2, C))
    x = T.permute(x, (0, 1, 3, 4, 2, 5))
    x = T.reshape(x, (B, L // 4, 4 * C))
    x = T.layer_norm(x, norm_g, norm_b)
    with T.mac_scope("merge"):
        return T.matmul(x, weight), (gh // 2, gw // 2)


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# model


@dataclass
class Stage:
    config: StageConfig
    grid: int
    blocks: list[VbbBlockParams]
    merge: tuple[Tensor, Tensor, Tensor] | None = None

    def attention_config(self) -> AttentionConfig:
        return AttentionConfig(
            heads_total=self.config.heads,
            window_size=self.config.window_size,
            pool_size=self.config.pool_size,
            grid_h=self.grid,
            grid_w=self.grid,
        )


@dataclass
class VBBModel:
    config: ModelConfig
    patch_w: Tensor = field(init=False)
    patch_b: Tensor = field(init=False)
    pos: Tensor | None = field(init=False, default=None)
    stages: list[Stage] = field(init=False, default_factory=list)
    norm_g: Tensor = field(init=False)
    norm_b: Tensor = field(init=False)
    head_w: Tensor = field(init=False)
    head_b: Tensor = field(init=False)

    def __post_init__(self):
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        c0 = cfg.stages[0].channels
        fan = cfg.in_channels * cfg.patch_size**2
        self.patch_w = _param(rng.normal(0.0, 1.0 / math.sqrt(fan), (fan, c0)))
        self.patch_b = _param(np.zeros(c0))
        grid0 = cfg.image_size // cfg.patch_size
        if cfg.positional_encoding == "absolute":
            self.pos = _param(rng.normal(0.0, 0.02, (grid0 * grid0, c0)))
        prev = c0
        for st, grid in zip(cfg.stages, cfg.stage_grids()):
            merge = None
            if st.downsample:
                merge = (
                    _param(np.ones(4 * prev)),
                    _param(np.zeros(4 * prev)),
                    _param(rng.normal(0.0, 1.0 / math.sqrt(4 * prev), (4 * prev, st.channels))),
                )
            blocks = [
                VbbBlockParams.init(st.channels, rng, cfg.mlp_ratio, cfg.disabled) for _ in range(st.depth)
            ]
            self.stages.append(Stage(st, grid, blocks, merge))
            prev = st.channels
        self.norm_g = _param(np.ones(prev))
        self.norm_b = _param(np.zeros(prev))
        self.head_w = _param(rng.normal(0.0, 1.0 / math.sqrt(prev), (prev, cfg.num_classes)))
        self.head_b = _param(np.zeros(cfg.num_classes))

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        """Trainable tensors in declaration order (the checkpoint order)."""
        yield "patch_w", self.patch_w
        yield "patch_b", self.patch_b
        if self.pos is not None:
            yield "pos", self.pos
        for si, stage in enumerate(self.stages):
            if stage.merge is not None:
                for name, t in zip(("norm_g", "norm_b", "w"), stage.merge):
                    yield f"stages.{si}.merge.{name}", t
            for bi, block in enumerate(stage.blocks):
                for name, t in block.named_parameters():
                    yield f"stages.{si}.blocks.{bi}.{name}", t
        yield "norm_g", self.norm_g
        yield "norm_b", self.norm_b
        yield "head_w", self.head_w
        yield "head_b", self.head_b

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.parameters())

    def block_seed(self, layer: int, mode: str, step: int) -> int:
        if mode == "eval":
            return _derive_seed(self.config.seed, 0, layer)
        if mode == "train":
            return _derive_seed(self.config.seed, 1, step, layer)
        raise ConfigError(f"mode must be train|eval, got {mode!r}")

    def features(self, images, mode: str = "eval", step: int = 0) -> Tensor:
        """Pooled, normalised features of [B, Cin, H, W] images."""
        cfg = self.config
        images = T.as_tensor(images)
        if images.ndim != 4 or images.shape[1] != cfg.in_channels or images.shape[2:] != (cfg.image_size,) * 2:
            raise ConfigError(
                f"expected images [B,{cfg.in_channels},{cfg.image_size},{cfg.image_size}], got {images.shape}"
            )
        x, grid = patch_embed(images, cfg.patch_size, self.patch_w, self.patch_b)
        if self.pos is not None:
            x = T.add(x, self.pos)
        layer = 0
        for stage in self.stages:
            if stage.merge is not None:
                x, grid = downsample(x, grid, *stage.merge)
            acfg = stage.attention_config()
            for block in stage.blocks:
                x = vbb_block(x, acfg, block, self.block_seed(layer, mode, step))
                layer += 1
        x = T.layer_norm(x, self.norm_g, self.norm_b)
        return T.mean(x, axis=1)

    def forward(self, images, mode: str = "eval", step: int = 0) -> Tensor:
        with T.mac_scope("head"):
            return T.linear(self.features(images, mode, step), self.head_w, self.head_b)

    __call__ = forward

    def scaling_weight_stats(self) -> list[tuple[float, float, float]]:
        return scaling_weight_stats(self)

    def save(self, path) -> None:
        save_checkpoint(self, path)


def _param(values) -> Tensor:
    return Tensor(values, requires_grad=True)


def forward(model: VBBModel, images, mode: str = "eval", step: int = 0) -> Tensor:
    return model.forward(images, mode, step)


def scaling_weight_stats(model: VBBModel) -> list[tuple[float, float, float]]:
    """Per-stage mean of (alpha, beta, lambda) over the stage's blocks."""
    out = []
    for stage in model.stages:
        w = np.array([b.scaling_weights() for b in stage.blocks])
        out.append(tuple(float(v) for v in w.mean(axis=0)))
    return out


# ---------------------------------------------------------------------------
# checkpoint


def save_checkpoint(model: VBBModel, path) -> None:
    """Write header (magic + canonical config) and parameters, little-endian."""
    text = model.config.to_text().encode("utf-8")
    params = model.parameters()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(text)))
        fh.write(text)
        fh.write(struct.pack("<Q", len(params)))
        for t in params:
            fh.write(struct.pack("<Q", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}Q", *t.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def read_checkpoint(path) -> tuple[str, list[np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ConfigError(f"{path}: not a VBB checkpoint (bad magic)")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise ConfigError(f"{path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    (n,) = take("<Q")
    text = data[pos:pos + n].decode("utf-8")
    pos += n
    (count,) = take("<Q")
    arrays = []
    for _ in range(count):
        (rank,) = take("<Q")
        dims = take(f"<{rank}Q") if rank else ()
        size = int(np.prod(dims, dtype=np.int64))
        if pos + 8 * size > len(data):
            raise ConfigError(f"{path}: truncated checkpoint")
        arrays.append(np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(dims).astype(np.float64))
        pos += 8 * size
    return text, arrays


def load_checkpoint(path, config: ModelConfig | None = None) -> VBBModel:
    """Load a model; with ``config`` given, a different stored config is rejected."""
    text, arrays = read_checkpoint(path)
    stored = ModelConfig.from_mapping(parse_config_text(text))
    if config is not None and config.to_text() != text:
        raise ConfigError("checkpoint config does not match the requested config")
    model = VBBModel(stored)
    params = model.parameters()
    if len(params) != len(arrays):
        raise ConfigError(f"checkpoint holds {len(arrays)} tensors, model expects {len(params)}")
    for t, arr in zip(params, arrays):
        if t.shape != arr.shape:
            raise ConfigError(f"checkpoint tensor shape {arr.shape} does not match {t.shape}")
        t.data[...] = arr
    return model

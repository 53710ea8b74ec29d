"""Dual visual encoders: a stride-14 patch-transformer pathway for the
low-resolution image and a stride-32 convolutional pathway for the
high-resolution one, with per-stage hook points on the transformer where
fusion adapters can be applied."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .tensor import ShapeError, Tensor, conv2d, interpolate_bilinear, reshape


class ConfigError(ValueError):
    """Raised for invalid pathway / stage configurations."""


class DivisibilityError(ConfigError):
    def __init__(self, resolution: int, stride: int):
        below = (resolution // stride) * stride
        above = below + stride
        super().__init__(
            f"resolution {resolution} is not divisible by stride {stride}; "
            f"nearest valid resolutions are {below} and {above}")
        self.below = below
        self.above = above


def output_grid_shape(resolution: int, stride: int) -> tuple[int, int, int]:
    """Feature-grid height, width, and token count for a square input."""
    if resolution % stride:
        raise DivisibilityError(resolution, stride)
    h = resolution // stride
    return h, h, h * h


@dataclass
class FeatureGrid:
    """A spatial feature map: values has shape (h, w, channels)."""
    values: Tensor

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ShapeError(f"FeatureGrid expects h x w x c, got "
                             f"{self.values.shape}")

    @property
    def h(self) -> int:
        return self.values.shape[0]

    @property
    def w(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


def _default_partition(depth: int, groups: int = 4) -> list[list[int]]:
    """Split blocks 0..depth-1 into up to ``groups`` equal contiguous stages."""
    groups = min(groups, depth)
    bounds = np.linspace(0, depth, groups + 1).astype(int)
    return [list(range(bounds[i], bounds[i + 1])) for i in range(groups)]


@dataclass
class LowResPathwayConfig:
    resolution: int
    width: int
    depth: int
    heads: int
    patch_stride: int = 14
    stage_partition: list[list[int]] = field(default_factory=list)

    def __post_init__(self):
        if not self.stage_partition:
            self.stage_partition = _default_partition(self.depth)
        if self.resolution % self.patch_stride:
            raise DivisibilityError(self.resolution, self.patch_stride)
        covered = [b for stage in self.stage_partition for b in stage]
        if sorted(covered) != list(range(self.depth)):
            raise ConfigError(
                f"stage_partition {self.stage_partition} does not cover "
                f"blocks 0..{self.depth - 1} exactly once")

    @property
    def num_stages(self) -> int:
        return len(self.stage_partition)


@dataclass
class HighResPathwayConfig:
    resolution: int
    stage_widths: list[int]
    stage_strides: list[int] = field(default_factory=lambda: [4, 2, 2, 2])
    blocks_per_stage: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.blocks_per_stage:
            self.blocks_per_stage = [1] * len(self.stage_strides)
        if not (len(self.stage_widths) == len(self.stage_strides)
                == len(self.blocks_per_stage)):
            raise ConfigError("stage_widths, stage_strides and blocks_per_stage "
                              "must have equal length")
        if self.resolution % self.total_stride:
            raise DivisibilityError(self.resolution, self.total_stride)

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.stage_strides))

    @property
    def width(self) -> int:
        return self.stage_widths[-1]


class LowResPathway(nn.Module):
    """Patch embedding + positional grid + transformer blocks.

    The learned positional grid is stored at the construction resolution and
    bilinearly resized when the pathway runs at a different one. Adapter
    callbacks registered for a stage index are applied to the running feature
    grid after that stage's last block.
    """

    def __init__(self, config: LowResPathwayConfig, rng: np.random.Generator):
        self.config = config
        p, d = config.patch_stride, config.width
        self.patch_kernel = nn.init_normal(rng, (p, p, 3, d),
                                           1.0 / np.sqrt(p * p * 3))
        base = config.resolution // p
        self.pos_grid = nn.init_normal(rng, (base, base, d), 0.02)
        self.blocks = [nn.TransformerBlock(d, config.heads, rng, causal=False)
                       for _ in range(config.depth)]
        self.final_norm = nn.LayerNorm(d)

    def forward(self, image: Tensor, taps: dict | None = None,
                ) -> tuple[FeatureGrid, list[FeatureGrid]]:
        """Encode an H x W x 3 image; returns the final grid and one
        intermediate grid per stage (post-tap). ``taps`` maps stage index ->
        callback(FeatureGrid) -> FeatureGrid."""
        cfg = self.config
        taps = taps or {}
        for stage_idx in taps:
            if not 0 <= stage_idx < cfg.num_stages:
                raise ConfigError(f"tap stage {stage_idx} outside "
                                  f"0..{cfg.num_stages - 1}")
        res = image.shape[0]
        if image.ndim != 3 or image.shape[0] != image.shape[1] \
                or image.shape[2] != 3:
            raise ShapeError(f"expected square H x W x 3 image, got {image.shape}")
        g = output_grid_shape(res, cfg.patch_stride)[0]
        x = conv2d(image, self.patch_kernel, stride=cfg.patch_stride)
        pos = self.pos_grid
        if pos.shape[0] != g:
            pos = interpolate_bilinear(pos, g, g)
        x = x + pos
        tokens = reshape(x, (g * g, cfg.width))
        stage_grids: list[FeatureGrid] = []
        for stage_idx, block_ids in enumerate(cfg.stage_partition):
            for b in block_ids:
                tokens = self.blocks[b](tokens)
            if stage_idx in taps:
                grid = FeatureGrid(reshape(tokens, (g, g, cfg.width)))
                grid = taps[stage_idx](grid)
                tokens = reshape(grid.values, (g * g, cfg.width))
            stage_grids.append(FeatureGrid(reshape(tokens, (g, g, cfg.width))))
        tokens = self.final_norm(tokens)
        return FeatureGrid(reshape(tokens, (g, g, cfg.width))), stage_grids


class HighResPathway(nn.Module):
    """Plain conv stack; each stage opens with a strided conv block."""

    def __init__(self, config: HighResPathwayConfig, rng: np.random.Generator):
        self.config = config
        self.stages: list[list[nn.ConvBlock]] = []
        c_in = 3
        for width, stride, blocks in zip(config.stage_widths,
                                         config.stage_strides,
                                         config.blocks_per_stage):
            stage = [nn.ConvBlock(c_in, width, stride, rng)]
            for _ in range(blocks - 1):
                stage.append(nn.ConvBlock(width, width, 1, rng))
            self.stages.append(stage)
            c_in = width

    def params(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, stage in enumerate(self.stages):
            for j, block in enumerate(stage):
                key = f"stages.{i}.{j}" if prefix == "" \
                    else f"{prefix}.stages.{i}.{j}"
                out.update(block.params(key))
        return out

    def forward(self, image: Tensor) -> FeatureGrid:
        cfg = self.config
        if image.ndim != 3 or image.shape[2] != 3:
            raise ShapeError(f"expected H x W x 3 image, got {image.shape}")
        output_grid_shape(image.shape[0], cfg.total_stride)
        x = image
        for stage in self.stages:
            for block in stage:
                x = block(x)
        return FeatureGrid(x)


def check_alignment(low_resolution: int, high_resolution: int,
                    low_stride: int = 14, high_stride: int = 32) -> int:
    """Validate that both pathways produce the same grid size; returns it."""
    gl = output_grid_shape(low_resolution, low_stride)[0]
    gh = output_grid_shape(high_resolution, high_stride)[0]
    if gl != gh:
        raise ConfigError(
            f"pathway outputs misaligned: {low_resolution}/{low_stride} = {gl} "
            f"but {high_resolution}/{high_stride} = {gh}")
    return gl

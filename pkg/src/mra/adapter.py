"""Gated cross-resolution fusion adapter.

The adapter updates one pathway's feature grid with information from the
other: ``out = F + f_l(F) + g * f_h(F_src)``, where ``f_l`` and ``f_h`` are
small mapping modules and ``g`` is a per-channel gate computed from the
spatially pooled concatenation of both mapped grids. All ablation switches
(fusion direction, sum/concat fusion, mapping structure, gate activation,
scalar gate) live on AdapterConfig.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .pathways import FeatureGrid
from .nn import concat_channels
from .tensor import (Tensor, activation, conv2d, gelu, matmul, reshape,
                     spatial_mean)

FUSION_DIRECTIONS = ("high_to_low", "low_to_high")
FUSION_TYPES = ("sum", "concat")
GATE_ACTIVATIONS = ("tanh", "sigmoid", "hsigmoid")
MAPPING_STRUCTURES = ("mlp_conv", "conv_conv", "conv_mlp")


class AlignmentError(ValueError):
    """Raised when two grids that must share spatial shape do not."""


@dataclass
class AdapterConfig:
    fusion_direction: str = "high_to_low"
    fusion_type: str = "sum"
    gate_activation: str = "tanh"
    mapping_structure: str = "mlp_conv"
    tap_stages: tuple[int, ...] = (1, 2, 3)
    high_source: str = "final_stage"
    scalar_gate: bool = False

    def __post_init__(self):
        checks = ((self.fusion_direction, FUSION_DIRECTIONS, "fusion_direction"),
                  (self.fusion_type, FUSION_TYPES, "fusion_type"),
                  (self.gate_activation, GATE_ACTIVATIONS, "gate_activation"),
                  (self.mapping_structure, MAPPING_STRUCTURES,
                   "mapping_structure"),
                  (self.high_source, ("final_stage",), "high_source"))
        for value, allowed, name in checks:
            if value not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, "
                                 f"got {value!r}")
        self.tap_stages = tuple(sorted(set(self.tap_stages)))


class ConvMap(nn.Module):
    """3x3 depth-preserving conv -> norm -> GELU -> 1x1 conv to c_out."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator,
                 zero_final: bool):
        self.conv3 = nn.init_normal(rng, (3, 3, c_in, c_in),
                                    1.0 / np.sqrt(9 * c_in))
        self.norm = nn.LayerNorm(c_in)
        if zero_final:
            self.conv1 = nn.zeros((1, 1, c_in, c_out))
        else:
            self.conv1 = nn.init_normal(rng, (1, 1, c_in, c_out),
                                        1.0 / np.sqrt(c_in))
        self.bias = nn.zeros((c_out,))

    def __call__(self, x: Tensor) -> Tensor:
        y = gelu(self.norm(conv2d(x, self.conv3, stride=1, padding=1)))
        return conv2d(y, self.conv1) + self.bias


class MlpMap(nn.Module):
    """Per-position two-layer MLP with GELU: c_in -> c_out -> c_out."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator,
                 zero_final: bool):
        self.fc1 = nn.Linear(c_in, c_out, rng)
        self.fc2 = nn.Linear(c_out, c_out, rng, zero_init=zero_final)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class AdapterParams(nn.Module):
    """Learnable state of one fusion adapter.

    ``d_res`` is the channel count of the grid being updated (the residual
    stream); ``d_src`` that of the other pathway's grid. The residual-side
    mapping module's final layer and the gate projections are zero-initialized
    so a freshly inserted adapter is an exact identity.
    """

    def __init__(self, d_res: int, d_src: int, config: AdapterConfig,
                 rng: np.random.Generator):
        self.d_res = d_res
        self.d_src = d_src
        structure = config.mapping_structure
        # structure names read "<source kind>_<residual kind>"
        src_kind, res_kind = structure.split("_")
        make = {"conv": ConvMap, "mlp": MlpMap}
        self.map_res = make[res_kind](d_res, d_res, rng, zero_final=True)
        self.map_src = make[src_kind](d_src, d_res, rng, zero_final=False)
        d_half = max(d_res // 2, 1)
        d_gate = 1 if config.scalar_gate else d_res
        self.gate_w1 = nn.zeros((2 * d_res, d_half))
        self.gate_b1 = nn.zeros((d_half,))
        self.gate_w2 = nn.zeros((d_half, d_gate))
        self.gate_b2 = nn.zeros((d_gate,))
        if config.fusion_type == "concat":
            # [I; 0] projection keeps concat fusion an identity at insertion.
            w = np.zeros((2 * d_res, d_res), dtype=np.float32)
            w[:d_res] = np.eye(d_res, dtype=np.float32)
            self.concat_proj = Tensor(w, requires_grad=True)
            self.concat_bias = nn.zeros((d_res,))


def _check_aligned(a: FeatureGrid, b: FeatureGrid) -> None:
    if (a.h, a.w) != (b.h, b.w):
        raise AlignmentError(f"grids misaligned: {a.h}x{a.w} vs {b.h}x{b.w}")


def map_low(grid: FeatureGrid, params: AdapterParams) -> FeatureGrid:
    """Residual-side mapping module; preserves the grid's shape."""
    if grid.channels != params.d_res:
        raise AlignmentError(f"expected {params.d_res} channels, "
                             f"got {grid.channels}")
    return FeatureGrid(params.map_res(grid.values))


def map_high(grid: FeatureGrid, params: AdapterParams) -> FeatureGrid:
    """Source-side mapping module; projects d_src -> d_res per position."""
    if grid.channels != params.d_src:
        raise AlignmentError(f"expected {params.d_src} channels, "
                             f"got {grid.channels}")
    return FeatureGrid(params.map_src(grid.values))


def gate(res_mapped: FeatureGrid, src_mapped: FeatureGrid,
         params: AdapterParams, config: AdapterConfig) -> Tensor:
    """Per-channel gate from the pooled concatenation of both mapped grids."""
    _check_aligned(res_mapped, src_mapped)
    pooled = spatial_mean(concat_channels(res_mapped.values,
                                             src_mapped.values))
    f_v = reshape(pooled, (1, 2 * params.d_res))
    hidden = gelu(matmul(f_v, params.gate_w1) + params.gate_b1)
    raw = matmul(hidden, params.gate_w2) + params.gate_b2
    out = activation(raw, config.gate_activation)
    return reshape(out, (out.shape[-1],))


def fuse(f_vl: FeatureGrid, f_vh: FeatureGrid, params: AdapterParams,
         config: AdapterConfig) -> FeatureGrid:
    """Gated fusion. Under ``high_to_low`` the low grid is updated from the
    high one; ``low_to_high`` swaps both the inputs' roles and the mapping
    modules symmetrically."""
    _check_aligned(f_vl, f_vh)
    if config.fusion_direction == "high_to_low":
        residual, source = f_vl, f_vh
    else:
        residual, source = f_vh, f_vl
    mapped_res = map_low(residual, params)
    mapped_src = map_high(source, params)
    g = gate(mapped_res, mapped_src, params, config)
    kept = residual.values + mapped_res.values
    injected = g * mapped_src.values
    if config.fusion_type == "sum":
        return FeatureGrid(kept + injected)
    stacked = concat_channels(kept, injected)
    out = matmul(stacked, params.concat_proj) + params.concat_bias
    return FeatureGrid(out)

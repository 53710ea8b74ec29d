"""Analytical visual-token and FLOP cost model.

Closed forms only (no measurement): a linear layer costs 2*n*d_in*d_out, an
attention block 4*n*d^2 + 2*n^2*d, and a conv layer 2*h'*w'*k^2*c_in*c_out,
with one multiply-accumulate counted as 2 FLOPs throughout.
"""

from __future__ import annotations

import csv
import os
import tempfile
from dataclasses import dataclass, field

from .pathways import DivisibilityError, output_grid_shape

LOW_STRIDE = 14
HIGH_STRIDE = 32

ARCHS = ("baseline_vit", "mra")


@dataclass
class ProfileConfig:
    """Architectural description sufficient for closed-form cost accounting."""
    name: str
    arch: str                      # baseline_vit | mra
    low_resolution: int            # the single resolution for baseline_vit
    high_resolution: int = 0       # unused for baseline_vit
    vit_width: int = 1024
    vit_depth: int = 24
    cnn_widths: tuple[int, ...] = (192, 384, 768, 1536)
    cnn_strides: tuple[int, ...] = (4, 2, 2, 2)
    cnn_blocks: tuple[int, ...] = (1, 1, 1, 1)
    adapter_taps: int = 3
    decoder_width: int = 4096
    decoder_depth: int = 32
    text_tokens: int = 128
    context_length: int = 2048

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.arch == "mra" and self.high_resolution <= 0:
            raise ValueError("mra configs need a high_resolution")


@dataclass
class ModelCost:
    visual_token_count: int
    low_pathway_flops: float
    high_pathway_flops: float
    adapter_flops: float
    projector_flops: float
    decoder_prefill_flops: float
    decoder_flops_per_generated_token: float
    context_tokens_total: int
    overflow: bool

    @property
    def encoder_flops(self) -> float:
        return (self.low_pathway_flops + self.high_pathway_flops
                + self.adapter_flops + self.projector_flops)

    @property
    def total_prefill_flops(self) -> float:
        return self.encoder_flops + self.decoder_prefill_flops

    def __post_init__(self):
        for f in ("visual_token_count", "low_pathway_flops",
                  "high_pathway_flops", "adapter_flops", "projector_flops",
                  "decoder_prefill_flops",
                  "decoder_flops_per_generated_token",
                  "context_tokens_total"):
            if getattr(self, f) < 0:
                raise ValueError(f"{f} must be nonnegative")


def linear_flops(n: int, d_in: int, d_out: int) -> float:
    return 2.0 * n * d_in * d_out


def attention_block_flops(n: int, d: int) -> float:
    return 4.0 * n * d * d + 2.0 * n * n * d


def conv_flops(h_out: int, w_out: int, k: int, c_in: int, c_out: int) -> float:
    return 2.0 * h_out * w_out * k * k * c_in * c_out


def transformer_flops(n: int, d: int, depth: int, mlp_ratio: int = 4) -> float:
    per_block = (attention_block_flops(n, d)
                 + linear_flops(n, d, mlp_ratio * d)
                 + linear_flops(n, mlp_ratio * d, d))
    return depth * per_block


def visual_token_count(arch: str, low_resolution: int,
                       high_resolution: int = 0) -> int:
    """Tokens entering the decoder. For the dual-pathway model this depends
    only on the low resolution, whatever the high resolution is."""
    if arch not in ARCHS:
        raise ValueError(f"arch must be one of {ARCHS}, got {arch!r}")
    if arch == "mra" and high_resolution:
        output_grid_shape(high_resolution, HIGH_STRIDE)  # validity check only
    return output_grid_shape(low_resolution, LOW_STRIDE)[2]


def _cnn_flops(cfg: ProfileConfig) -> float:
    total = 0.0
    res = cfg.high_resolution
    c_in = 3
    for width, stride, blocks in zip(cfg.cnn_widths, cfg.cnn_strides,
                                     cfg.cnn_blocks):
        res //= stride
        total += conv_flops(res, res, 3, c_in, width)
        for _ in range(blocks - 1):
            total += conv_flops(res, res, 3, width, width)
        c_in = width
    return total


def _adapter_flops(cfg: ProfileConfig, grid: int) -> float:
    """One tap: conv mapping (3x3 depthwise-preserving + 1x1), MLP mapping
    from the CNN width, and the two gate projections."""
    d, dh = cfg.vit_width, cfg.cnn_widths[-1]
    n = grid * grid
    per_tap = (conv_flops(grid, grid, 3, d, d) + conv_flops(grid, grid, 1, d, d)
               + linear_flops(n, dh, d) + linear_flops(n, d, d)
               + linear_flops(1, 2 * d, d // 2) + linear_flops(1, d // 2, d))
    return cfg.adapter_taps * per_tap


def flops_estimate(cfg: ProfileConfig) -> ModelCost:
    tokens = visual_token_count(cfg.arch, cfg.low_resolution,
                                cfg.high_resolution)
    grid = output_grid_shape(cfg.low_resolution, LOW_STRIDE)[0]
    patch = linear_flops(tokens, LOW_STRIDE * LOW_STRIDE * 3, cfg.vit_width)
    low = patch + transformer_flops(tokens, cfg.vit_width, cfg.vit_depth)
    if cfg.arch == "mra":
        high = _cnn_flops(cfg)
        adapter = _adapter_flops(cfg, grid)
        final_proj = linear_flops(tokens, cfg.cnn_widths[-1], cfg.vit_width)
        adapter += final_proj
    else:
        high = 0.0
        adapter = 0.0
    projector = (linear_flops(tokens, cfg.vit_width, cfg.decoder_width)
                 + linear_flops(tokens, cfg.decoder_width, cfg.decoder_width))
    context = tokens + cfg.text_tokens
    prefill = transformer_flops(context, cfg.decoder_width, cfg.decoder_depth)
    # Incremental decoding: projections are per-token, attention reads the
    # whole accumulated context.
    per_token = cfg.decoder_depth * (
        4.0 * cfg.decoder_width ** 2 + 2.0 * context * cfg.decoder_width
        + linear_flops(1, cfg.decoder_width, 4 * cfg.decoder_width)
        + linear_flops(1, 4 * cfg.decoder_width, cfg.decoder_width))
    return ModelCost(
        visual_token_count=tokens,
        low_pathway_flops=low,
        high_pathway_flops=high,
        adapter_flops=adapter,
        projector_flops=projector,
        decoder_prefill_flops=prefill,
        decoder_flops_per_generated_token=per_token,
        context_tokens_total=context,
        overflow=context > cfg.context_length)


def context_overflow_check(cost: ModelCost, context_length: int,
                           ) -> tuple[str, int]:
    """('ok', 0) when the context fits; ('warn', excess) on strict overflow."""
    if context_length <= 0:
        raise ValueError("context_length must be positive")
    excess = cost.context_tokens_total - context_length
    return ("warn", excess) if excess > 0 else ("ok", 0)


REPORT_COLUMNS = ("name", "arch", "low_resolution", "high_resolution",
                  "visual_tokens", "low_pathway_flops", "high_pathway_flops",
                  "adapter_flops", "projector_flops", "decoder_prefill_flops",
                  "decoder_flops_per_token", "total_prefill_flops", "overflow")


def _sci(x: float) -> str:
    return f"{x:.4g}" if x else "0"


def profile_report(configs: list[ProfileConfig], path: str) -> list[ModelCost]:
    """One CSV row per config, in input order. FLOP convention (1 MAC =
    2 FLOPs) is recorded in a comment header line."""
    if not configs:
        raise ValueError("profile_report needs at least one config")
    costs = [flops_estimate(c) for c in configs]
    rows = []
    for cfg, cost in zip(configs, costs):
        rows.append([cfg.name, cfg.arch, cfg.low_resolution,
                     cfg.high_resolution or "",
                     cost.visual_token_count,
                     _sci(cost.low_pathway_flops),
                     _sci(cost.high_pathway_flops),
                     _sci(cost.adapter_flops),
                     _sci(cost.projector_flops),
                     _sci(cost.decoder_prefill_flops),
                     _sci(cost.decoder_flops_per_generated_token),
                     _sci(cost.total_prefill_flops),
                     str(cost.overflow).lower()])
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)),
                               prefix=".profile-")
    with os.fdopen(fd, "w", newline="") as f:
        f.write("# FLOP convention: 1 multiply-accumulate = 2 FLOPs\n")
        writer = csv.writer(f)
        writer.writerow(REPORT_COLUMNS)
        writer.writerows(rows)
    os.replace(tmp, path)
    return costs


def paper_comparison_pairs() -> list[tuple[ProfileConfig, ProfileConfig]]:
    """The four baseline-vs-dual-pathway resolution pairings of the reference
    efficiency table; the dual model's low resolution is the aligned one."""
    pairs = []
    for base_res, high_res in ((336, 384), (448, 768), (672, 1024),
                               (1022, 1536)):
        low_res = LOW_STRIDE * (high_res // HIGH_STRIDE)
        pairs.append((
            ProfileConfig(name=f"baseline@{base_res}", arch="baseline_vit",
                          low_resolution=base_res),
            ProfileConfig(name=f"mra@{low_res}/{high_res}", arch="mra",
                          low_resolution=low_res, high_resolution=high_res)))
    return pairs

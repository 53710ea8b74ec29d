"""Full model: dual pathways, fusion adapters, projector, and a small
autoregressive decoder over [visual tokens, instruction tokens, answer
tokens]."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .adapter import AdapterConfig, AdapterParams, fuse
from .pathways import (ConfigError, FeatureGrid, HighResPathway,
                       HighResPathwayConfig, LowResPathway,
                       LowResPathwayConfig, check_alignment, output_grid_shape)
from .tensor import (NumericError, Tensor, concat, cross_entropy, index_rows,
                     interpolate_bilinear, reshape, softmax)


class ContextOverflowError(RuntimeError):
    """Total sequence length exceeds the decoder context length."""

    def __init__(self, total: int, context: int):
        super().__init__(f"sequence of {total} tokens exceeds decoder context "
                         f"length {context} by {total - context}")
        self.total = total
        self.context = context


@dataclass
class DecoderConfig:
    vocab_size: int
    context_length: int
    width: int
    depth: int
    heads: int

    @property
    def end_token(self) -> int:
        return self.vocab_size - 1


@dataclass
class ModelConfig:
    low: LowResPathwayConfig
    high: HighResPathwayConfig
    adapter: AdapterConfig
    decoder: DecoderConfig

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(low=LowResPathwayConfig(**d["low"]),
                           high=HighResPathwayConfig(**d["high"]),
                           adapter=AdapterConfig(**d["adapter"]),
                           decoder=DecoderConfig(**d["decoder"]))


@dataclass
class TokenSequence:
    """Decoder input ordering: visual tokens, then instruction, then answer."""
    instruction: np.ndarray
    answer: np.ndarray

    def __post_init__(self):
        self.instruction = np.asarray(self.instruction, dtype=np.int64)
        self.answer = np.asarray(self.answer, dtype=np.int64)


class ToyDecoder(nn.Module):
    def __init__(self, config: DecoderConfig, rng: np.random.Generator):
        self.config = config
        d = config.width
        self.token_emb = nn.init_normal(rng, (config.vocab_size, d), 0.02)
        self.pos_emb = nn.init_normal(rng, (config.context_length, d), 0.02)
        self.blocks = [nn.TransformerBlock(d, config.heads, rng, causal=True)
                       for _ in range(config.depth)]
        self.final_norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, config.vocab_size, rng)

    def forward(self, embeddings: Tensor) -> Tensor:
        """Causal decoding over a (tokens, width) matrix; returns logits."""
        n = embeddings.shape[0]
        if n > self.config.context_length:
            raise ContextOverflowError(n, self.config.context_length)
        x = embeddings + index_rows(self.pos_emb, np.arange(n))
        for block in self.blocks:
            x = block(x)
        return self.head(self.final_norm(x))

    def embed_tokens(self, ids: np.ndarray) -> Tensor:
        return index_rows(self.token_emb, np.asarray(ids, dtype=np.int64))


class MraModel:
    """Dual pathways + adapters + projector + decoder.

    Stage 1 has no adapters and combines pathway outputs directly; stage 2
    runs fusion adapters at the configured tap stages of the low pathway.
    """

    def __init__(self, config: ModelConfig, stage: int, seed: int = 0,
                 low_only: bool = False):
        if stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {stage}")
        self.config = config
        self.stage = stage
        self.low_only = low_only
        rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
        d_l = config.low.width
        d_h = config.high.width
        if stage == 2:
            check_alignment(config.low.resolution, config.high.resolution,
                            config.low.patch_stride, config.high.total_stride)
            for s in config.adapter.tap_stages:
                if not 0 <= s < config.low.num_stages:
                    raise ConfigError(f"tap stage {s} outside pathway stages "
                                      f"0..{config.low.num_stages - 1}")
        self.low = LowResPathway(config.low, rng)
        self.high = HighResPathway(config.high, rng)
        self.adapters: dict[int, AdapterParams] = {}
        if stage == 2 and not low_only:
            for s in config.adapter.tap_stages:
                if config.adapter.fusion_direction == "high_to_low":
                    self.adapters[s] = AdapterParams(d_l, d_h, config.adapter,
                                                     rng)
                else:
                    self.adapters[s] = AdapterParams(d_h, d_l, config.adapter,
                                                     rng)
        self.final_high_proj = nn.Linear(d_h, d_l, zero_init=True)
        self.projector = nn.Mlp(d_l, config.decoder.width,
                                config.decoder.width, rng)
        self.decoder = ToyDecoder(config.decoder, rng)

    # -- parameter bookkeeping ------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        out = self.low.params("low")
        out.update(self.high.params("high"))
        for s, adapter in sorted(self.adapters.items()):
            out.update(adapter.params(f"adapter.{s}"))
        out.update(self.final_high_proj.params("final_high_proj"))
        out.update(self.projector.params("projector"))
        out.update(self.decoder.params("decoder"))
        for t in out.values():
            t.requires_grad = True
        return out

    PARAM_GROUPS = ("low", "high", "adapter", "final_high_proj", "projector",
                    "decoder")

    def group_of(self, name: str) -> str:
        return name.split(".", 1)[0]

    def load_arrays(self, arrays: dict[str, np.ndarray],
                    strict: bool = True) -> None:
        params = self.named_parameters()
        for name, arr in arrays.items():
            if name not in params:
                if strict:
                    raise KeyError(f"unknown parameter in checkpoint: {name}")
                continue
            if params[name].shape != arr.shape:
                raise ConfigError(f"shape mismatch for {name}: model has "
                                  f"{params[name].shape}, file has {arr.shape}")
            params[name].data = arr.astype(np.float32)
        if strict:
            missing = set(params) - set(arrays)
            # Adapters absent from a stage-1 checkpoint keep their identity init.
            missing = {m for m in missing if not m.startswith("adapter.")}
            if missing:
                raise KeyError(f"checkpoint missing parameters: "
                               f"{sorted(missing)[:4]}...")

    # -- encoding --------------------------------------------------------------

    def visual_token_count(self) -> int:
        return output_grid_shape(self.config.low.resolution,
                                 self.config.low.patch_stride)[2]

    def low_only_forward(self, i_l: Tensor) -> FeatureGrid:
        return self.low.forward(i_l)[0]

    def encode(self, i_l: Tensor, i_h: Tensor) -> FeatureGrid:
        cfg = self.config
        if i_l.shape[0] != cfg.low.resolution:
            raise ConfigError(f"low image is {i_l.shape[0]} px, config expects "
                              f"{cfg.low.resolution}")
        if i_h.shape[0] != cfg.high.resolution:
            raise ConfigError(f"high image is {i_h.shape[0]} px, config "
                              f"expects {cfg.high.resolution}")
        if self.low_only:
            return self.low_only_forward(i_l)
        f_vh = self.high.forward(i_h)
        if self.stage == 1:
            f_vl = self.low_only_forward(i_l)
            return self.stage1_combine(f_vl, f_vh)
        acfg = cfg.adapter
        if acfg.fusion_direction == "high_to_low":
            taps = {s: (lambda grid, a=a: fuse(grid, f_vh, a, acfg))
                    for s, a in self.adapters.items()}
            f_vl = self.low.forward(i_l, taps=taps)[0]
        else:
            f_vl = self.low_only_forward(i_l)
            for s in sorted(self.adapters):
                f_vh = fuse(f_vl, f_vh, self.adapters[s], acfg)
        combined = f_vl.values + self.final_high_proj(f_vh.values)
        return FeatureGrid(combined)

    def stage1_combine(self, f_vl: FeatureGrid, f_vh: FeatureGrid,
                       ) -> FeatureGrid:
        """Resize the high grid onto the low grid, project, and add."""
        resized = interpolate_bilinear(f_vh.values, f_vl.h, f_vl.w)
        return FeatureGrid(f_vl.values + self.final_high_proj(resized))

    # -- decoding ----------------------------------------------------------------

    def _check_context(self, total: int) -> None:
        if total > self.config.decoder.context_length:
            raise ContextOverflowError(total,
                                       self.config.decoder.context_length)

    def forward_loss(self, i_l: Tensor, i_h: Tensor, sequence: TokenSequence,
                     ) -> tuple[Tensor, Tensor]:
        """Teacher-forced loss over answer positions only.

        Returns (scalar loss, next-token distributions for each answer
        position)."""
        n_v = self.visual_token_count()
        l = len(sequence.instruction)
        s = len(sequence.answer)
        if s < 1:
            raise ValueError("answer must contain at least one token")
        self._check_context(n_v + l + s)
        f_v = self.encode(i_l, i_h)
        vis = self.projector(reshape(f_v.values, (n_v, f_v.channels)))
        ids = np.concatenate([sequence.instruction, sequence.answer])
        emb = concat([vis, self.decoder.embed_tokens(ids)], axis=0)
        logits = self.decoder.forward(emb)
        first = n_v + l - 1  # logits row predicting the first answer token
        answer_logits = index_rows(logits, np.arange(first, first + s))
        loss = cross_entropy(answer_logits, sequence.answer)
        if not np.isfinite(float(loss.data)):
            raise NumericError("non-finite training loss")
        return loss, softmax(answer_logits, axis=-1)

    def generate(self, i_l: Tensor, i_h: Tensor, instruction: np.ndarray,
                 max_steps: int) -> list[int]:
        """Greedy decoding; stops at the end token (vocab_size - 1)."""
        instruction = np.asarray(instruction, dtype=np.int64)
        n_v = self.visual_token_count()
        f_v = self.encode(i_l, i_h)
        vis = self.projector(reshape(f_v.values, (n_v, f_v.channels)))
        generated: list[int] = []
        end = self.config.decoder.end_token
        for _ in range(max_steps):
            ids = np.concatenate([instruction,
                                  np.asarray(generated, dtype=np.int64)])
            self._check_context(n_v + len(ids))
            emb = concat([vis, self.decoder.embed_tokens(ids)], axis=0)
            logits = self.decoder.forward(emb)
            nxt = int(np.argmax(logits.data[-1]))
            if nxt == end:
                break
            generated.append(nxt)
        return generated

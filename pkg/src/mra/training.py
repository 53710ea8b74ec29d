"""Two-stage training schedule.

Stage 1 trains only the projector and the final high-to-low projection at low
resolutions, with both encoders and the decoder frozen and no adapters.
Stage 2 rebuilds the model at raised (aligned) resolutions, inserts
zero-initialized adapters, resizes the learned positional grid, and trains
everything.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import math

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .model import ModelConfig, MraModel, TokenSequence
from .pathways import ConfigError, check_alignment
from .synthdata import Sample
from .tensor import Tensor, interpolate_bilinear

STAGE1_FROZEN = ("low", "high", "decoder")


@dataclasses.dataclass
class StageConfig:
    stage: int
    low_resolution: int
    high_resolution: int
    learning_rate: float
    batch_size: int
    steps: int
    micro_batch: int = 0        # 0: whole batch at once (no accumulation)
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    warmup_frac: float = 0.03

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if self.stage == 2:
            check_alignment(self.low_resolution, self.high_resolution)
        if self.micro_batch and self.batch_size % self.micro_batch:
            raise ConfigError("micro_batch must divide batch_size")


def stage_defaults(stage: int, desk_scale: bool = True) -> StageConfig:
    """Paper-schedule hyperparameters; desk scale shrinks resolutions and
    batch so runs finish on one CPU core."""
    if stage == 1:
        res = (112, 256) if desk_scale else (336, 384)
        return StageConfig(stage=1, low_resolution=res[0],
                           high_resolution=res[1], learning_rate=1e-3,
                           batch_size=8 if desk_scale else 256, steps=100)
    res = (112, 256) if desk_scale else (448, 1024)
    return StageConfig(stage=2, low_resolution=res[0], high_resolution=res[1],
                       learning_rate=2e-5 if not desk_scale else 3e-4,
                       batch_size=8 if desk_scale else 256, steps=300)


class AdamW:
    """Adaptive-moment optimizer with decoupled weight decay; decay is never
    applied to rank-<=1 parameters (gains and biases)."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, grad_scale: float = 1.0, lr_scale: float = 1.0) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        lr = self.lr * lr_scale
        for k, p in self.params.items():
            g = (p.grad * grad_scale) if p.grad is not None \
                else np.zeros_like(p.data)
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            if self.weight_decay and p.data.ndim > 1:
                update = update + self.weight_decay * p.data
            p.data = (p.data - lr * update).astype(np.float32)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"opt.m.{k}"] = self.m[k]
            out[f"opt.v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for k in self.params:
            if f"opt.m.{k}" in arrays:
                self.m[k] = arrays[f"opt.m.{k}"].astype(np.float32)
                self.v[k] = arrays[f"opt.v.{k}"].astype(np.float32)


def frozen_params_digest(model: MraModel, groups) -> dict[str, str]:
    """SHA-256 digest over each group's raw parameter bytes."""
    params = model.named_parameters()
    known = {model.group_of(name) for name in params}
    out: dict[str, str] = {}
    for group in groups:
        if group not in known:
            raise KeyError(f"unknown parameter group {group!r}; "
                           f"have {sorted(known)}")
        h = hashlib.sha256()
        for name in sorted(params):
            if model.group_of(name) == group:
                h.update(name.encode())
                h.update(params[name].data.tobytes())
        out[group] = h.hexdigest()
    return out


def warmup_scale(step: int, total_steps: int, frac: float) -> float:
    warm = max(1, math.ceil(frac * total_steps))
    return min(1.0, (step + 1) / warm)


class MetricsWriter:
    COLUMNS = ("step", "stage", "loss", "learning_rate", "tokens_in_context")

    def __init__(self, path: str | None):
        self.path = path
        self._file = open(path, "w", newline="") if path else None
        if self._file:
            self._csv = csv.writer(self._file)
            self._csv.writerow(self.COLUMNS)

    def write(self, step: int, stage: int, loss: float, lr: float,
              tokens: int) -> None:
        if self._file:
            self._csv.writerow([step, stage, f"{loss:.6f}", f"{lr:.8g}",
                                tokens])
            self._file.flush()

    def close(self) -> None:
        if self._file:
            self._file.close()


def _stage_model_config(base: ModelConfig, sc: StageConfig) -> ModelConfig:
    return dataclasses.replace(
        base,
        low=dataclasses.replace(base.low, resolution=sc.low_resolution),
        high=dataclasses.replace(base.high, resolution=sc.high_resolution))


class RenderCache:
    """Per-run cache of rasterized sample images."""

    def __init__(self):
        self._cache: dict[tuple[int, int], Tensor] = {}

    def get(self, samples: list[Sample], idx: int, res: int) -> Tensor:
        key = (idx, res)
        if key not in self._cache:
            self._cache[key] = Tensor(samples[idx].render(res))
        return self._cache[key]


def _train_loop(model: MraModel, trainable: dict[str, Tensor],
                dataset: list[Sample], sc: StageConfig, seed: int,
                metrics: MetricsWriter, optimizer: AdamW | None = None,
                ) -> tuple[AdamW, float, float]:
    """Runs the step loop; returns (optimizer, first loss, last loss).

    Batches are accumulated sample by sample in a fixed order, then divided by
    the full batch size at the update, so micro-batching is numerically
    identical to one large batch.
    """
    opt = optimizer or AdamW(trainable, lr=sc.learning_rate, betas=sc.betas,
                             weight_decay=sc.weight_decay)
    order_rng = np.random.default_rng(
        np.random.SeedSequence([seed, 0x0DDE]).generate_state(4))
    cache = RenderCache()
    first_loss = last_loss = float("nan")
    for step in range(sc.steps):
        idxs = order_rng.integers(len(dataset), size=sc.batch_size)
        opt.zero_grad()
        batch_loss = 0.0
        tokens = 0
        for i in idxs:
            sample = dataset[int(i)]
            i_l = cache.get(dataset, int(i), sc.low_resolution)
            i_h = cache.get(dataset, int(i), sc.high_resolution)
            seq = TokenSequence(
                instruction=sample.instruction,
                answer=np.concatenate([
                    sample.answer,
                    [model.config.decoder.end_token]]))
            loss, _ = model.forward_loss(i_l, i_h, seq)
            loss.backward()
            batch_loss += float(loss.data)
            tokens = model.visual_token_count() + len(seq.instruction) \
                + len(seq.answer)
        opt.step(grad_scale=1.0 / sc.batch_size,
                 lr_scale=warmup_scale(step, sc.steps, sc.warmup_frac))
        batch_loss /= sc.batch_size
        if step == 0:
            first_loss = batch_loss
        last_loss = batch_loss
        metrics.write(step, sc.stage, batch_loss,
                      sc.learning_rate * warmup_scale(step, sc.steps,
                                                      sc.warmup_frac), tokens)
    return opt, first_loss, last_loss


def _checkpoint_payload(model: MraModel, opt: AdamW, sc: StageConfig,
                        base_config: ModelConfig, seed: int) -> tuple[dict,
                                                                      dict]:
    arrays = {k: v.data for k, v in model.named_parameters().items()}
    arrays.update(opt.state_arrays())
    metadata = {
        "stage": sc.stage,
        "step_count": opt.t,
        "seed": seed,
        "config": base_config.to_dict(),
        "stage_config": dataclasses.asdict(sc),
    }
    return metadata, arrays


def run_stage1(base_config: ModelConfig, sc: StageConfig,
               dataset: list[Sample], seed: int,
               checkpoint_path: str | None = None,
               metrics_path: str | None = None,
               low_only: bool = False) -> tuple[MraModel, dict, dict]:
    """Frozen pre-training: only projector and final_high_proj move.

    Returns (model, checkpoint metadata, checkpoint arrays)."""
    if sc.stage != 1:
        raise ConfigError("run_stage1 requires a stage-1 config")
    cfg = _stage_model_config(base_config, sc)
    init_seed = int(np.random.SeedSequence([seed, 0x1217]).generate_state(1)[0])
    model = MraModel(cfg, stage=1, seed=init_seed, low_only=low_only)
    params = model.named_parameters()
    if any(name.startswith("adapter.") for name in params):
        raise ConfigError("adapter parameters must not exist in stage 1")
    trainable = {k: p for k, p in params.items()
                 if model.group_of(k) in ("projector", "final_high_proj")}
    metrics = MetricsWriter(metrics_path)
    try:
        opt, _, _ = _train_loop(model, trainable, dataset, sc, seed, metrics)
    finally:
        metrics.close()
    metadata, arrays = _checkpoint_payload(model, opt, sc, base_config, seed)
    metadata["low_only"] = low_only
    if checkpoint_path:
        save_checkpoint(checkpoint_path, arrays, metadata)
    return model, metadata, arrays


def build_stage2_model(base_config: ModelConfig, sc: StageConfig,
                       stage1_arrays: dict[str, np.ndarray],
                       seed: int, low_only: bool = False) -> MraModel:
    """Stage-1 weights + zero-initialized adapters at the new resolutions.

    The learned positional grid is bilinearly resized when the low-resolution
    grid size changes."""
    cfg = _stage_model_config(base_config, sc)
    init_seed = int(np.random.SeedSequence([seed, 0x2218]).generate_state(1)[0])
    model = MraModel(cfg, stage=2, seed=init_seed, low_only=low_only)
    arrays = {k: v for k, v in stage1_arrays.items()
              if not k.startswith("opt.")}
    target = model.named_parameters()["low.pos_grid"].shape
    pos = arrays.get("low.pos_grid")
    if pos is not None and pos.shape != target:
        resized = interpolate_bilinear(Tensor(pos), target[0], target[1])
        arrays = dict(arrays)
        arrays["low.pos_grid"] = resized.data
    model.load_arrays(arrays)
    return model


def run_stage2(base_config: ModelConfig, sc: StageConfig,
               stage1_checkpoint: tuple[dict, dict[str, np.ndarray]],
               dataset: list[Sample], seed: int,
               checkpoint_path: str | None = None,
               metrics_path: str | None = None,
               low_only: bool = False) -> tuple[MraModel, dict, dict]:
    """Full fine-tuning with adapters inserted."""
    if sc.stage != 2:
        raise ConfigError("run_stage2 requires a stage-2 config")
    meta1, arrays1 = stage1_checkpoint
    if meta1.get("stage") != 1:
        raise ConfigError("run_stage2 requires a stage-1 checkpoint")
    check_alignment(sc.low_resolution, sc.high_resolution)
    model = build_stage2_model(base_config, sc, arrays1, seed,
                               low_only=low_only or meta1.get("low_only",
                                                              False))
    trainable = model.named_parameters()
    metrics = MetricsWriter(metrics_path)
    try:
        opt, _, _ = _train_loop(model, trainable, dataset, sc, seed, metrics)
    finally:
        metrics.close()
    metadata, arrays = _checkpoint_payload(model, opt, sc, base_config, seed)
    metadata["low_only"] = getattr(model, "low_only", False)
    if checkpoint_path:
        save_checkpoint(checkpoint_path, arrays, metadata)
    return model, metadata, arrays


def load_model_from_checkpoint(path: str) -> tuple[MraModel, dict]:
    metadata, arrays = load_checkpoint(path)
    base = ModelConfig.from_dict(metadata["config"])
    scd = dict(metadata["stage_config"])
    scd["betas"] = tuple(scd["betas"])
    sc = StageConfig(**scd)
    cfg = _stage_model_config(base, sc)
    model = MraModel(cfg, stage=metadata["stage"], seed=0,
                     low_only=metadata.get("low_only", False))
    model.load_arrays({k: v for k, v in arrays.items()
                       if not k.startswith("opt.")},
                      strict=False)
    return model, metadata


def evaluate_accuracy(model: MraModel, dataset: list[Sample],
                      sc: StageConfig, max_samples: int | None = None) -> float:
    """Exact-match accuracy of greedy decoding against sample answers."""
    cache = RenderCache()
    n = len(dataset) if max_samples is None else min(max_samples, len(dataset))
    hits = 0
    for i in range(n):
        i_l = cache.get(dataset, i, sc.low_resolution)
        i_h = cache.get(dataset, i, sc.high_resolution)
        out = model.generate(i_l, i_h, dataset[i].instruction,
                             max_steps=len(dataset[i].answer) + 1)
        hits += int(out == list(dataset[i].answer))
    return hits / n if n else 0.0

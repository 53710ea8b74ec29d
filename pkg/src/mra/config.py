"""Run configuration: a strict YAML document validated in full before any
work starts. Unknown keys are errors, and all violations are reported
together with their field paths."""

from __future__ import annotations

from dataclasses import dataclass, field

import yaml

from .adapter import (FUSION_DIRECTIONS, FUSION_TYPES, GATE_ACTIVATIONS,
                      MAPPING_STRUCTURES, AdapterConfig)
from .model import DecoderConfig, ModelConfig
from .pathways import (ConfigError, HighResPathwayConfig, LowResPathwayConfig,
                       output_grid_shape)
from .synthdata import QUERY_TYPES, TaskConfig, Vocab


class ConfigValidationError(ConfigError):
    def __init__(self, violations: list[str]):
        super().__init__("invalid configuration:\n  - "
                         + "\n  - ".join(violations))
        self.violations = violations


@dataclass
class TrainSection:
    stage1: dict
    stage2: dict


@dataclass
class DataSection:
    task: TaskConfig
    train_samples: int
    eval_samples: int


@dataclass
class ProfileSection:
    context_length: int = 2048
    use_paper_pairs: bool = True
    configs: list[dict] = field(default_factory=list)


@dataclass
class PathsSection:
    output_dir: str = "runs"


@dataclass
class RunConfig:
    seed: int
    model: ModelConfig
    train: TrainSection
    data: DataSection
    profile: ProfileSection
    paths: PathsSection


_SCHEMA = {
    "seed": int,
    "model": {
        "low": {"resolution": int, "width": int, "depth": int, "heads": int,
                "patch_stride": int, "stage_partition": list},
        "high": {"resolution": int, "stage_widths": list,
                 "stage_strides": list, "blocks_per_stage": list},
        "adapter": {"fusion_direction": str, "fusion_type": str,
                    "gate_activation": str, "mapping_structure": str,
                    "tap_stages": list, "high_source": str,
                    "scalar_gate": bool},
        "decoder": {"context_length": int, "width": int, "depth": int,
                    "heads": int},
    },
    "train": {
        "stage1": {"low_resolution": int, "high_resolution": int,
                   "learning_rate": float, "batch_size": int, "steps": int,
                   "micro_batch": int, "weight_decay": float,
                   "warmup_frac": float},
        "stage2": {"low_resolution": int, "high_resolution": int,
                   "learning_rate": float, "batch_size": int, "steps": int,
                   "micro_batch": int, "weight_decay": float,
                   "warmup_frac": float},
    },
    "data": {
        "task": {"grid_n": int, "num_glyphs": int, "num_colors": int,
                 "segment_units": int, "query_types": list},
        "train_samples": int,
        "eval_samples": int,
    },
    "profile": {
        "context_length": int,
        "use_paper_pairs": bool,
        "configs": list,
    },
    "paths": {
        "output_dir": str,
    },
}

_REQUIRED = {
    "model.low": ("resolution", "width", "depth", "heads"),
    "model.high": ("resolution", "stage_widths"),
    "model.decoder": ("context_length", "width", "depth", "heads"),
    "train.stage1": ("low_resolution", "high_resolution", "learning_rate",
                     "batch_size", "steps"),
    "train.stage2": ("low_resolution", "high_resolution", "learning_rate",
                     "batch_size", "steps"),
}


def _walk(doc, schema, path: str, violations: list[str]) -> None:
    if not isinstance(doc, dict):
        violations.append(f"{path or '<root>'}: expected a mapping")
        return
    for key, value in doc.items():
        here = f"{path}.{key}" if path else key
        if key not in schema:
            violations.append(f"{here}: unknown key")
            continue
        expected = schema[key]
        if isinstance(expected, dict):
            _walk(value, expected, here, violations)
        elif expected is float:
            if not isinstance(value, (int, float)) \
                    or isinstance(value, bool):
                violations.append(f"{here}: expected a number, "
                                  f"got {type(value).__name__}")
        elif expected is int and isinstance(value, bool):
            violations.append(f"{here}: expected int, got bool")
        elif not isinstance(value, expected):
            violations.append(f"{here}: expected {expected.__name__}, "
                              f"got {type(value).__name__}")


def _require(doc: dict, violations: list[str]) -> None:
    for section in ("model", "train", "data"):
        if section not in doc:
            violations.append(f"{section}: required section missing")
    for path, keys in _REQUIRED.items():
        parts = path.split(".")
        node = doc
        for p in parts:
            node = node.get(p) if isinstance(node, dict) else None
            if node is None:
                break
        if node is None:
            violations.append(f"{path}: required section missing")
            continue
        for k in keys:
            if k not in node:
                violations.append(f"{path}.{k}: required key missing")


def _cross_checks(cfg: "RunConfig", violations: list[str]) -> None:
    vocab = Vocab()
    patch = cfg.model.low.patch_stride
    high_stride = cfg.model.high.total_stride
    sc2 = cfg.train.stage2
    try:
        gl = output_grid_shape(sc2["low_resolution"], patch)[0]
        gh = output_grid_shape(sc2["high_resolution"], high_stride)[0]
        if gl != gh:
            violations.append(
                f"train.stage2.low_resolution/high_resolution: pathway grids "
                f"misaligned ({sc2['low_resolution']}/{patch} = {gl} but "
                f"{sc2['high_resolution']}/{high_stride} = {gh})")
    except ConfigError as e:
        violations.append(f"train.stage2: {e}")
    for stage_name, sc in (("stage1", cfg.train.stage1),
                           ("stage2", cfg.train.stage2)):
        for key, stride in (("low_resolution", patch),
                            ("high_resolution", high_stride)):
            res = sc[key]
            if res % stride:
                violations.append(f"train.{stage_name}.{key}: {res} not "
                                  f"divisible by stride {stride}")
            if res % cfg.data.task.grid_n:
                violations.append(f"train.{stage_name}.{key}: {res} not "
                                  f"divisible by data.task.grid_n "
                                  f"{cfg.data.task.grid_n}")
    if cfg.data.task.grid_n > 8:
        violations.append("data.task.grid_n: position vocabulary covers "
                          "grids up to 8 x 8")
    for stage_name, sc in (("stage1", cfg.train.stage1),
                           ("stage2", cfg.train.stage2)):
        if sc["low_resolution"] % patch:
            continue
        tokens = (sc["low_resolution"] // patch) ** 2
        needed = tokens + 6 + 2  # instruction is 6 words, answer + end token
        if needed > cfg.model.decoder.context_length:
            violations.append(
                f"model.decoder.context_length: {cfg.model.decoder.context_length} "
                f"< {needed} tokens required at train.{stage_name} resolutions")
    _ = vocab  # vocabulary is fixed; coverage is guaranteed by TaskConfig


def parse_config(path: str) -> RunConfig:
    """Load and fully validate a run configuration file."""
    try:
        with open(path, encoding="utf-8") as f:
            doc = yaml.safe_load(f)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        line = f" at line {mark.line + 1}" if mark else ""
        raise ConfigValidationError([f"syntax error{line}: {e}"]) from e
    if doc is None:
        doc = {}
    violations: list[str] = []
    _walk(doc, _SCHEMA, "", violations)
    _require(doc, violations)
    if violations:
        raise ConfigValidationError(violations)

    vocab = Vocab()
    model_doc = doc["model"]
    try:
        task = TaskConfig(**{k: tuple(v) if k == "query_types" else v
                             for k, v in doc["data"].get("task", {}).items()})
        low_kwargs = dict(model_doc["low"])
        model = ModelConfig(
            low=LowResPathwayConfig(**low_kwargs),
            high=HighResPathwayConfig(**model_doc["high"]),
            adapter=AdapterConfig(**{k: tuple(v) if k == "tap_stages" else v
                                     for k, v in model_doc.get("adapter",
                                                               {}).items()}),
            decoder=DecoderConfig(vocab_size=vocab.size,
                                  **model_doc["decoder"]))
    except (ConfigError, ValueError, TypeError) as e:
        raise ConfigValidationError([str(e)]) from e

    cfg = RunConfig(
        seed=int(doc.get("seed", 0)),
        model=model,
        train=TrainSection(stage1=dict(doc["train"]["stage1"]),
                           stage2=dict(doc["train"]["stage2"])),
        data=DataSection(task=task,
                         train_samples=int(doc["data"].get("train_samples",
                                                           256)),
                         eval_samples=int(doc["data"].get("eval_samples", 64)),
                         ),
        profile=ProfileSection(**doc.get("profile", {})),
        paths=PathsSection(**doc.get("paths", {})))
    _cross_checks(cfg, violations)
    if violations:
        raise ConfigValidationError(violations)
    return cfg


def stage_config_from(cfg: RunConfig, stage: int):
    from .training import StageConfig
    doc = cfg.train.stage1 if stage == 1 else cfg.train.stage2
    return StageConfig(stage=stage, **doc)

"""Command-line entry point.

Commands: train --stage N, gradcheck, gen-data, profile, generate. All
randomness flows from the config's top-level seed through named substreams,
so identical config + seed reproduce identical artifacts.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from .checkpoint import CheckpointError
from .config import (ConfigValidationError, RunConfig, parse_config,
                     stage_config_from)
from .costs import ProfileConfig, paper_comparison_pairs, profile_report
from .gradcheck import check_model_gradients
from .model import ModelConfig, MraModel, TokenSequence
from .pathways import ConfigError
from .synthdata import Vocab, make_dataset, write_manifest, load_manifest
from .tensor import NumericError, Tensor
from .training import (evaluate_accuracy, load_model_from_checkpoint,
                       run_stage1, run_stage2)

log = logging.getLogger("mra")


def _setup_logging() -> None:
    level = os.environ.get("MRA_LOG_LEVEL", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO,
              "debug": logging.DEBUG}
    if level not in levels:
        raise ConfigError(f"MRA_LOG_LEVEL must be one of {sorted(levels)}")
    logging.basicConfig(level=levels[level],
                        format="%(levelname)s %(name)s: %(message)s")


def _data_seed(cfg: RunConfig, label: str) -> int:
    stream = {"train": 1, "eval": 2, "manifest": 3}[label]
    return int(np.random.SeedSequence([cfg.seed, stream]).generate_state(1)[0])


def cmd_train(cfg: RunConfig, args) -> int:
    vocab = Vocab()
    out = cfg.paths.output_dir
    os.makedirs(out, exist_ok=True)
    dataset = make_dataset(_data_seed(cfg, "train"), cfg.data.train_samples,
                           cfg.data.task, vocab)
    sc = stage_config_from(cfg, args.stage)
    if args.stage == 1:
        ckpt = os.path.join(out, "stage1.ckpt")
        model, _, _ = run_stage1(cfg.model, sc, dataset, cfg.seed,
                                 checkpoint_path=ckpt,
                                 metrics_path=os.path.join(out,
                                                           "stage1_metrics.csv"))
        log.info("stage 1 done; checkpoint at %s", ckpt)
    else:
        stage1_path = args.init_from or os.path.join(out, "stage1.ckpt")
        if not os.path.exists(stage1_path):
            raise ConfigError(
                f"stage 2 requires a stage-1 checkpoint; none at "
                f"{stage1_path} (run `mra train --stage 1` first or pass "
                f"--init-from)")
        from .checkpoint import load_checkpoint
        meta1, arrays1 = load_checkpoint(stage1_path)
        ckpt = os.path.join(out, "stage2.ckpt")
        model, _, _ = run_stage2(cfg.model, sc, (meta1, arrays1), dataset,
                                 cfg.seed, checkpoint_path=ckpt,
                                 metrics_path=os.path.join(out,
                                                           "stage2_metrics.csv"))
        log.info("stage 2 done; checkpoint at %s", ckpt)
    if cfg.data.eval_samples:
        evalset = make_dataset(_data_seed(cfg, "eval"), cfg.data.eval_samples,
                               cfg.data.task, vocab)
        acc = evaluate_accuracy(model, evalset, sc)
        log.info("stage %d held-out accuracy: %.3f", args.stage, acc)
    return 0


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    from .training import _stage_model_config  # shared resolution override
    sc = stage_config_from(cfg, 2)
    model_cfg = _stage_model_config(cfg.model, sc)
    vocab = Vocab()
    failures = 0
    for seed in range(args.seeds):
        model = MraModel(model_cfg, stage=2, seed=seed)
        rng = np.random.default_rng(seed)
        for p in model.named_parameters().values():
            # randomize zero-initialized tensors so every path carries signal
            if not np.any(p.data):
                p.data = (rng.standard_normal(p.shape) * 0.05).astype(
                    np.float32)
        sample = make_dataset(seed, 1, cfg.data.task, vocab)[0]
        i_l = sample.render(sc.low_resolution)
        i_h = sample.render(sc.high_resolution)
        seq = TokenSequence(instruction=sample.instruction,
                            answer=np.concatenate([sample.answer,
                                                   [vocab.end_token]]))
        reports = check_model_gradients(model, i_l, i_h, seq, step=args.step,
                                        tol=args.tol, seed=seed)
        for r in reports:
            status = "PASS" if r.passed else "FAIL"
            print(f"{status} seed={seed} {r.name}: rel={r.max_rel_err:.2e} "
                  f"abs={r.max_abs_err:.2e} ({r.checked_elements} elems)")
            failures += not r.passed
    print(f"gradcheck: {'all passed' if not failures else f'{failures} failures'}")
    return 0 if failures == 0 else 1


def cmd_gen_data(cfg: RunConfig, args) -> int:
    vocab = Vocab()
    os.makedirs(cfg.paths.output_dir, exist_ok=True)
    path = args.out or os.path.join(cfg.paths.output_dir, "manifest.txt")
    samples = make_dataset(_data_seed(cfg, "manifest"), args.count
                           or cfg.data.train_samples, cfg.data.task, vocab)
    write_manifest(samples, path, cfg.data.task)
    log.info("wrote %d samples to %s", len(samples), path)
    return 0


def cmd_profile(cfg: RunConfig, args) -> int:
    os.makedirs(cfg.paths.output_dir, exist_ok=True)
    path = args.out or os.path.join(cfg.paths.output_dir, "profile.csv")
    configs: list[ProfileConfig] = []
    if cfg.profile.use_paper_pairs:
        for base, mra in paper_comparison_pairs():
            configs.extend([base, mra])
    for doc in cfg.profile.configs:
        configs.append(ProfileConfig(**doc))
    profile_report(configs, path)
    log.info("wrote %d profile rows to %s", len(configs), path)
    return 0


def cmd_generate(cfg: RunConfig, args) -> int:
    model, metadata = load_model_from_checkpoint(args.checkpoint)
    _, samples = load_manifest(args.manifest)
    sc = stage_config_from(cfg, metadata["stage"])
    for sample in samples[:args.limit]:
        i_l = Tensor(sample.render(sc.low_resolution))
        i_h = Tensor(sample.render(sc.high_resolution))
        out = model.generate(i_l, i_h, sample.instruction, args.max_steps)
        words = " ".join(Vocab().decode(out))
        print(f"{sample.instruction_text} -> {words} (expected: "
              f"{sample.answer_text})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mra", description="dual-resolution encoder experiments")
    parser.add_argument("--config", required=True, help="path to YAML config")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one training stage")
    p_train.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p_train.add_argument("--init-from", help="stage-1 checkpoint for stage 2")
    p_train.set_defaults(func=cmd_train)

    p_gc = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p_gc.add_argument("--seeds", type=int, default=1)
    p_gc.add_argument("--step", type=float, default=1e-4)
    p_gc.add_argument("--tol", type=float, default=1e-3)
    p_gc.set_defaults(func=cmd_gradcheck)

    p_gd = sub.add_parser("gen-data", help="write a sample manifest")
    p_gd.add_argument("--out")
    p_gd.add_argument("--count", type=int)
    p_gd.set_defaults(func=cmd_gen_data)

    p_pr = sub.add_parser("profile", help="write the analytical cost table")
    p_pr.add_argument("--out")
    p_pr.set_defaults(func=cmd_profile)

    p_gen = sub.add_parser("generate", help="decode answers for a manifest")
    p_gen.add_argument("--checkpoint", required=True)
    p_gen.add_argument("--manifest", required=True)
    p_gen.add_argument("--max-steps", type=int, default=4)
    p_gen.add_argument("--limit", type=int, default=8)
    p_gen.set_defaults(func=cmd_generate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        cfg = parse_config(args.config)
        return args.func(cfg, args)
    except (ConfigValidationError, ConfigError, CheckpointError, NumericError,
            FileNotFoundError, IOError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

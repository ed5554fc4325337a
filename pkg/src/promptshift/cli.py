"""Command-line surface: gen-data, train, eval, simulate, gradcheck.

Every command is deterministic given (config, seed) and writes outputs
atomically. Seed precedence: --seed flag, then the PROMPTSHIFT_SEED
environment variable, then the config default. Exit codes: 0 success,
2 configuration error, 3 data/format error, 4 verification failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .config import (
    ABLATION_FLAGS,
    RunConfig,
    load_run_config,
    run_config_to_dict,
)
from .errors import ConfigError, DomainError, DimensionError, FormatError, SessionError
from .gradcheck import GRAD_TOL
from . import world as world_mod
from .world import generate_world, load_dataset, save_dataset, split

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_FORMAT = 3
EXIT_VERIFY = 4

SEED_ENV = "PROMPTSHIFT_SEED"


def _resolve_seed(flag_value, config_seed: int) -> int:
    if flag_value is not None:
        return int(flag_value)
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from exc
    return config_seed


def _load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return load_run_config(path)


def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config)
    seed = _resolve_seed(args.seed, cfg.train.seed)
    dataset = generate_world(cfg.world, seed)
    save_dataset(dataset, args.out)
    train_idx, val_idx = split(dataset, 0.8, seed=0)

    planted = dataset.arrays["m_star"].sum()
    unsafe_groups = int((dataset.arrays["label"] == 1).sum())
    print(f"dataset written to {args.out}")
    print(f"items: {dataset.n_items} (groups: {dataset.n_groups}, steps: {dataset.config.total_steps})")
    print(f"split 80/20: {len(train_idx)} train / {len(val_idx)} val (pair-disjoint)")
    print(f"offset validation: beta={cfg.world.beta} > bound 0.75; "
          f"{int(planted)} planted tokens across {unsafe_groups} unsafe groups all clear tau={cfg.world.tau}")
    print(f"sha256: {dataset.content_hash()}")
    return EXIT_OK


def _parse_ablations(flags: list[str]):
    from .config import AblationFlags
    ab = AblationFlags()
    for name in flags or []:
        if name not in ABLATION_FLAGS:
            raise ConfigError(f"unknown ablation flag {name!r}; expected one of {ABLATION_FLAGS}")
        setattr(ab, name, True)
    return ab


def cmd_train(args) -> int:
    from .training import train

    cfg = _load_config(args.config)
    seed = _resolve_seed(args.seed, cfg.train.seed)
    dataset = load_dataset(args.data, expect_embed_dim=cfg.model.embed_dim)
    train_idx, val_idx = split(dataset, 0.8, seed=0)

    tcfg = cfg.train
    tcfg.seed = seed
    if args.ablate:
        tcfg.ablations = _parse_ablations(args.ablate)
    os.makedirs(args.out, exist_ok=True)

    def log_fn(e):
        terms = " ".join(f"{k}={v:.4f}" for k, v in e.terms.items())
        print(f"epoch {e.epoch}: val_acc={e.val_acc:.4f} saved={e.saved} {terms}")

    result = train(tcfg, dataset, train_idx, val_idx, cfg.model, out_dir=args.out, log_fn=log_fn)
    log_path = os.path.join(args.out, "train_log.json")
    payload = {
        "config": run_config_to_dict(cfg),
        "seed": seed,
        "loss_curve_hash": result.loss_curve_hash,
        "best_val_acc": result.checkpoint.best_val_acc,
        "epochs": [{"epoch": e.epoch, "val_acc": e.val_acc, "saved": e.saved, "terms": e.terms}
                   for e in result.log],
    }
    tmp = log_path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    os.replace(tmp, log_path)
    print(f"best_val_acc={result.checkpoint.best_val_acc:.4f} "
          f"loss_curve_hash={result.loss_curve_hash}")
    print(f"checkpoint: {os.path.join(args.out, 'model.ckpt')}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .inference import evaluate_safety, run_generation, train_reference_detector
    from .training import evaluate, load_checkpoint

    ckpt = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data, expect_embed_dim=ckpt.model_config.embed_dim)
    seed = _resolve_seed(args.seed, ckpt.train_config.seed)
    train_idx, val_idx = split(dataset, 0.8, seed=0)
    indices = train_idx if args.split == "train" else val_idx

    metrics = evaluate(ckpt, dataset, indices)
    model = ckpt.build_model()

    t_steps = dataset.config.total_steps
    groups = np.unique(np.asarray(indices) // t_steps)
    ref_groups = np.unique(np.asarray(train_idx) // t_steps)
    ref = train_reference_detector(dataset, ref_groups, seed=seed)
    unsafe_groups = groups[dataset.arrays["label"][groups] == 1]
    sample = unsafe_groups[: args.max_traces]
    traces = [run_generation(dataset, int(g), model, t_steps, args.cooldown,
                             args.alpha_scale, seed) for g in sample]
    safety = evaluate_safety(traces, dataset, ref)
    metrics["forget_rate"] = safety["forget_rate"]

    for key in ("cls_accuracy", "mask_f1", "delta_cosine", "alpha_mean", "forget_rate"):
        print(f"{key}={metrics[key]:.4f}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    from .inference import run_generation, trace_to_jsonable
    from .training import load_checkpoint

    ckpt = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.world, expect_embed_dim=ckpt.model_config.embed_dim)
    seed = _resolve_seed(args.seed, 0)
    model = ckpt.build_model()

    if args.group is not None:
        group = args.group
        if not 0 <= group < dataset.n_groups:
            raise ConfigError(f"--group must be in [0, {dataset.n_groups}), got {group}")
    else:
        _, val_idx = split(dataset, 0.8, seed=0)
        val_groups = np.unique(val_idx // dataset.config.total_steps)
        unsafe = val_groups[dataset.arrays["label"][val_groups] == 1]
        if len(unsafe) == 0:
            raise ConfigError("no unsafe validation groups to simulate; pass --group")
        group = int(unsafe[0])

    trace = run_generation(dataset, group, model, args.T, args.K, args.alpha_scale,
                           seed, hard_mask=args.hard_mask)
    payload = trace_to_jsonable(trace)
    payload["config"] = {"T": args.T, "K": args.K, "alpha_scale": args.alpha_scale,
                         "hard_mask": args.hard_mask}
    tmp = args.out + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)
    os.replace(tmp, args.out)
    print(f"trace written to {args.out}: label={trace.label} "
          f"interventions={trace.intervention_steps}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .verify import format_report, gradcheck_model, reduced_config

    if args.config is not None:
        cfg = _load_config(args.config).model
        cfg.precision = "float64"
    else:
        cfg = reduced_config()
    seed = _resolve_seed(args.seed, 0)
    results = gradcheck_model(cfg, eps=args.eps, seed=seed)
    print(format_report(results))
    worst = max(results.values())
    if worst > GRAD_TOL:
        print(f"FAILED: max relative error {worst:.3e} exceeds {GRAD_TOL:.0e}")
        return EXIT_VERIFY
    print(f"all blocks within {GRAD_TOL:.0e}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="promptshift",
        description="Synthetic-world prompt embedding redirection: data generation, "
                    "training, evaluation, simulation, and gradient verification.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic world dataset")
    p.add_argument("--config", help="run config JSON (defaults apply if omitted)")
    p.add_argument("--seed", type=int, default=None, help="generation seed")
    p.add_argument("--out", required=True, help="output dataset path")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train the detector/redirector")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--ablate", action="append", metavar="FLAG",
                   help=f"enable an ablation flag (one of {', '.join(ABLATION_FLAGS)})")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--cooldown", type=int, default=5)
    p.add_argument("--alpha-scale", type=float, default=1.0)
    p.add_argument("--max-traces", type=int, default=200,
                   help="cap on simulated unsafe prompts for forget_rate")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("simulate", help="run one guided generation and dump the trace")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--world", required=True, help="dataset file providing prompts")
    p.add_argument("--T", type=int, default=50, help="denoising steps")
    p.add_argument("--K", type=int, default=5, help="cooldown length")
    p.add_argument("--alpha-scale", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--group", type=int, default=None, help="world group index to simulate")
    p.add_argument("--hard-mask", action="store_true", help="binarize the soft mask at 0.5")
    p.add_argument("--out", required=True, help="trace JSON path")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("gradcheck", help="finite-difference verification of all blocks")
    p.add_argument("--config", help="run config JSON (model section; forced to float64)")
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (DimensionError, DomainError, SessionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

#!/usr/bin/env python3
"""
Block Selective Reprogramming toolkit.
Memory/FLOPs analysis, gradient checks, tape audits and desk-scale training.

Usage:
    python bsr_cli.py analyze --config deit-s --plan default --batch 128 --mode paper
    python bsr_cli.py flops --config vit-b --plan default --batch 128
    python bsr_cli.py gradcheck --config toy-gradcheck --plan toy-small
    python bsr_cli.py audit --config toy --plan toy
    python bsr_cli.py pretrain --config toy --epochs 8
    python bsr_cli.py finetune --config toy --plan toy --checkpoint bsr_out/checkpoints/toy_source_261018.bsrckpt
    python bsr_cli.py compare --config toy --plan toy
    python bsr_cli.py plan-search --config deit-s --grid trainable-positions --budget 0

Exit codes: 0 success, 2 invalid input, 3 numeric or audit failure.
"""

import argparse
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from bsr_policy import resolve_grid, resolve_plan, validate_plan
from errors import BsrError, PlanError
from memory_model import (
    audit_frame,
    count_flops,
    estimate_total,
    flops_frame,
    memory_frame,
    memory_summary,
    tape_audit,
)
from tensor_autodiff import BACKWARD_RULES, OpKind, Recorder, Tape
from train_harness import (
    TASK_DEFAULTS,
    TRAIN_PRESETS,
    TrainConfig,
    compare,
    finetune,
    gradient_check,
    make_task,
    pretrain,
)
from utils_store import (
    get_out_dir,
    get_threads,
    latest_checkpoint,
    load_env_safely,
    save_rotated_checkpoint,
    to_frame,
    write_table,
)
from vit_model import (
    add_side_blocks,
    check_compatible,
    init_params,
    load_checkpoint,
    load_config,
    reset_head,
    vit_forward,
)

# ═══════════════════════════════════════════════════════════════
# CONFIGURATION
# ═══════════════════════════════════════════════════════════════

GRADCHECK_LIMITS = {"embed_dim": 64, "depth": 4}
GRADCHECK_THRESHOLD = 1e-5
ANALYSIS_BATCH = 128

COMMAND_DEFAULTS = {
    "analyze": {"config": "deit-s", "plan": "default"},
    "flops": {"config": "deit-s", "plan": "default"},
    "gradcheck": {"config": "toy-gradcheck", "plan": "toy-small"},
    "audit": {"config": "toy", "plan": "toy"},
    "pretrain": {"config": "toy", "plan": "full"},
    "finetune": {"config": "toy", "plan": "toy"},
    "compare": {"config": "toy", "plan": "toy"},
    "plan-search": {"config": "deit-s", "plan": "default"},
}


def _corrupt_gelu(tape, node, g, params):
    grads, pgrads = BACKWARD_RULES[OpKind.GELU](tape, node, g, params)
    return [grads[0] * 1.1], pgrads


CORRUPT_RULES = {"gelu": {OpKind.GELU: _corrupt_gelu}}


def banner(title):
    print(f"\n{'='*60}")
    print(f"  {title}")
    print(f"{'='*60}")


def _resolve(args, command):
    defaults = COMMAND_DEFAULTS[command]
    config = load_config(args.config or defaults["config"])
    plan = resolve_plan(args.plan or defaults["plan"], config)
    _, warnings = validate_plan(config, plan)
    for w in warnings:
        print(f"⚠️ {w}")
    return config, plan


def _out_path(args, name):
    return Path(args.out) if args.out else get_out_dir() / f"{name}.csv"


def _plan_label(plan):
    return "FT-Last (head only)" if plan is None else plan.key


def _train_config(args, preset):
    fields = dict(TRAIN_PRESETS[preset])
    fields["seed"] = args.seed
    if args.batch:
        fields["batch"] = args.batch
    for flag, key in (("epochs", "epochs"), ("lr", "base_lr"), ("optimizer", "optimizer"),
                      ("schedule", "schedule")):
        value = getattr(args, flag, None)
        if value is not None:
            fields[key] = value
    return TrainConfig(**fields)


def _load_source(args, config, plan):
    """Source checkpoint: --checkpoint, else the newest rotated one for this config."""
    path = args.checkpoint
    if path is None:
        path = latest_checkpoint(get_out_dir() / "checkpoints", f"{args.config or 'toy'}_source")
    if path is None:
        print("⚠️ No source checkpoint found, starting from a fresh initialization")
        params = init_params(config, seed=args.seed)
    else:
        print(f"📂 Loading checkpoint {path}")
        params = check_compatible(load_checkpoint(path), config)
    if plan is not None and plan.residual:
        missing = [i for i in plan.trainable_blocks if not params.has_side(i)]
        if missing:
            add_side_blocks(params, config, missing, seed=args.seed + 1)
    return params


def _target_task(args, config):
    return make_task(config.num_classes, config.image_size, args.shift, args.seed + 100,
                     config.channels, cell=config.patch_size)


# ═══════════════════════════════════════════════════════════════
# COMMANDS
# ═══════════════════════════════════════════════════════════════

def cmd_analyze(args):
    """Activation-memory report for one (config, plan, batch, mode)."""
    config, plan = _resolve(args, "analyze")
    batch = args.batch or ANALYSIS_BATCH
    report = estimate_total(config, plan, batch, args.mode)

    banner(f"Memory — {_plan_label(plan)} | batch {batch} | {args.mode} mode")
    print(memory_summary(report).to_string(index=False, float_format=lambda v: f"{v:.3f}"))
    print(f"\n📊 Total: {report.total_mb:.1f} MB "
          f"(frozen {report.frozen_total / 2**20:.1f} MB, trainable {report.trainable_total / 2**20:.1f} MB)")
    print(f"📊 FT-Full baseline: {report.baseline_total / 2**20:.1f} MB "
          f"→ reduce ratio {report.reduce_ratio:.2f}x")
    write_table(memory_frame(report), _out_path(args, "memory"), schema="memory")
    return 0


def cmd_flops(args):
    config, plan = _resolve(args, "flops")
    batch = args.batch or ANALYSIS_BATCH
    report = count_flops(config, plan, batch)

    banner(f"FLOPs — {_plan_label(plan)} | batch {batch}")
    for comp, macs in report.component_totals().items():
        print(f"  {comp:<14} {macs / 1e9:>10.2f} GMacs")
    print(f"\n📊 Total: {report.gmacs:.2f} GMacs ({report.gmacs / batch:.3f} per sample)")
    write_table(flops_frame(report), _out_path(args, "flops"), schema="flops")
    return 0


def cmd_gradcheck(args):
    config, plan = _resolve(args, "gradcheck")
    if config.embed_dim > GRADCHECK_LIMITS["embed_dim"] or config.depth > GRADCHECK_LIMITS["depth"]:
        raise PlanError(f"gradcheck needs a toy config (L <= {GRADCHECK_LIMITS['embed_dim']}, "
                        f"depth <= {GRADCHECK_LIMITS['depth']}), got L={config.embed_dim}, "
                        f"depth={config.depth}")
    rules = CORRUPT_RULES.get(args.corrupt_rule) if args.corrupt_rule else None

    banner(f"Gradient check — {_plan_label(plan)}")
    error = gradient_check(config, plan, seed=args.seed, step_size=args.step, rules=rules)
    if error < GRADCHECK_THRESHOLD:
        print(f"✅ max relative error {error:.3e} < {GRADCHECK_THRESHOLD:g}")
        return 0
    print(f"❌ max relative error {error:.3e} >= {GRADCHECK_THRESHOLD:g}")
    return 3


def cmd_audit(args):
    """Batch-1 forward, then compare the tape with the exact-mode prediction."""
    config, plan = _resolve(args, "audit")
    sides = plan.trainable_blocks if plan is not None and plan.residual else ()
    params = init_params(config, seed=args.seed, side_blocks=sides).set_trainable(plan)
    image = np.random.default_rng(args.seed).standard_normal(
        (config.channels, config.image_size, config.image_size))
    tape = Tape()
    vit_forward(image, params, config, plan, Recorder(tape))

    banner(f"Tape audit — {_plan_label(plan)}")
    report = estimate_total(config, plan, batch=1, mode="exact")
    try:
        audit = tape_audit(tape, report)
    except BsrError as e:
        diffs = getattr(e, "diffs", [])
        if diffs:
            print(to_frame([[d["block"], d["role"], d["predicted"], d["measured"], d["diff"]]
                            for d in diffs], "audit").to_string(index=False))
        raise
    print(f"✅ {len(tape)} nodes, {tape.retained_bytes:,} bytes retained = prediction")
    write_table(audit_frame(audit), _out_path(args, "audit"), schema="audit")
    return 0


def cmd_pretrain(args):
    config = load_config(args.config or COMMAND_DEFAULTS["pretrain"]["config"])
    cfg = _train_config(args, "pretrain")
    train, test = make_task(config.num_classes, config.image_size, TASK_DEFAULTS["source_shift"],
                            args.seed, config.channels, cell=config.patch_size)

    banner(f"Pre-training {args.config or 'toy'} on the source task")
    result = pretrain(config, train, test, cfg, threads=get_threads(),
                      trace_path=_out_path(args, "pretrain_trace"))
    prefix = f"{args.config or 'toy'}_source"
    save_rotated_checkpoint(result.params, get_out_dir() / "checkpoints", prefix)
    print(f"✅ Source test accuracy {result.test_accuracy:.3f}")
    return 0


def cmd_finetune(args):
    config, plan = _resolve(args, "finetune")
    cfg = _train_config(args, "finetune")
    params = _load_source(args, config, plan)
    reset_head(params, config.num_classes, seed=args.seed)
    train, test = _target_task(args, config)

    banner(f"Fine-tuning — {_plan_label(plan)}")
    result = finetune(params, config, train, test, plan, cfg, trace_path=_out_path(args, "trace"),
                      debug=args.debug, threads=get_threads())
    save_rotated_checkpoint(result.params, get_out_dir() / "checkpoints",
                            f"{args.config or 'toy'}_finetuned")
    print(f"✅ Target test accuracy {result.test_accuracy:.3f}")
    return 0


def cmd_compare(args):
    config, plan = _resolve(args, "compare")
    cfg = _train_config(args, "finetune")
    params = _load_source(args, config, None)
    train, test = _target_task(args, config)

    banner(f"FT-Full vs FT-Last vs BSR — {_plan_label(plan)}")
    df = compare(params, config, train, test, plan, cfg, mode=args.mode, threads=get_threads())
    print(df.to_string(index=False))
    write_table(df, _out_path(args, "compare"), schema="compare")
    return 0


def _search_one(plan, config, args, batch, source, task):
    memory = estimate_total(config, plan, batch, args.mode)
    flops = count_flops(config, plan, batch)
    accuracy = float("nan")
    if args.budget > 0:
        cfg = _train_config(args, "finetune")
        cfg.max_steps = args.budget
        params = source.copy()
        if plan.residual:
            add_side_blocks(params, config, plan.trainable_blocks, seed=args.seed + 1)
        accuracy = finetune(params, config, task[0], task[1], plan, cfg, verbose=False).test_accuracy
    return [plan.key, ",".join(map(str, plan.trainable_blocks)),
            ",".join(map(str, plan.drop_locations)), plan.drop_rate,
            memory.total_mb, flops.gmacs, accuracy]


def cmd_plan_search(args):
    """Rank the plans of a grid by memory (then plan key)."""
    config = load_config(args.config or COMMAND_DEFAULTS["plan-search"]["config"])
    batch = args.batch or ANALYSIS_BATCH
    plans = []
    for plan in resolve_grid(args.grid):
        try:
            validate_plan(config, plan)
        except PlanError as e:
            print(f"⚠️ Skipping {plan.key}: {e}")
            continue
        plans.append(plan)

    banner(f"Plan search — {args.grid} | {len(plans)} plans | budget {args.budget} steps")
    source = task = None
    if args.budget > 0 and plans:
        source = _load_source(args, config, None)
        task = _target_task(args, config)

    threads = min(get_threads(), max(len(plans), 1))
    with ThreadPoolExecutor(max_workers=threads) as executor:
        rows = list(executor.map(lambda p: _search_one(p, config, args, batch, source, task), plans))
    rows.sort(key=lambda r: (r[4], r[0]))

    df = to_frame(rows, "plan_search")
    if len(df):
        print(df.to_string(index=False, float_format=lambda v: f"{v:.1f}"))
    else:
        print("📊 Empty grid: nothing to rank")
    write_table(df, _out_path(args, "plan_search"), schema="plan_search")
    return 0


COMMANDS = {
    "analyze": cmd_analyze,
    "flops": cmd_flops,
    "gradcheck": cmd_gradcheck,
    "audit": cmd_audit,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "compare": cmd_compare,
    "plan-search": cmd_plan_search,
}


# ═══════════════════════════════════════════════════════════════
# CLI
# ═══════════════════════════════════════════════════════════════

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="Preset (deit-s, vit-b, toy, toy-gradcheck) or key=value file")
    common.add_argument("--plan", default=None, help="Plan preset, 'full', 'last' or plan file")
    common.add_argument("--batch", type=int, default=None, help="Batch size")
    common.add_argument("--mode", choices=["paper", "exact"], default="paper", help="Accountant mode")
    common.add_argument("--seed", type=int, default=0, help="Random seed")
    common.add_argument("--out", default=None, help="Output table (.csv or .parquet)")

    training = argparse.ArgumentParser(add_help=False)
    training.add_argument("--epochs", type=int, default=None)
    training.add_argument("--lr", type=float, default=None)
    training.add_argument("--optimizer", choices=["adamw", "sgd_momentum"], default=None)
    training.add_argument("--schedule", choices=["constant", "cosine"], default=None)

    source = argparse.ArgumentParser(add_help=False)
    source.add_argument("--checkpoint", default=None, help="Source checkpoint (default: newest rotated)")
    source.add_argument("--shift", type=float, default=TASK_DEFAULTS["target_shift"],
                        help="Target-task distribution shift in [0, 1]")

    parser = argparse.ArgumentParser(description="Block Selective Reprogramming toolkit")
    subparsers = parser.add_subparsers(dest="command", required=True, help="Command to run")

    subparsers.add_parser("analyze", parents=[common], help="Activation-memory report")
    subparsers.add_parser("flops", parents=[common], help="Forward MACs report")

    gc_parser = subparsers.add_parser("gradcheck", parents=[common], help="Finite-difference gradient check")
    gc_parser.add_argument("--step", type=float, default=1e-5, help="Central-difference step")
    gc_parser.add_argument("--corrupt-rule", choices=sorted(CORRUPT_RULES), default=None,
                           help=argparse.SUPPRESS)

    subparsers.add_parser("audit", parents=[common], help="Tape vs exact-mode memory audit")
    subparsers.add_parser("pretrain", parents=[common, training], help="Train the source checkpoint")

    ft_parser = subparsers.add_parser("finetune", parents=[common, training, source],
                                      help="Fine-tune a checkpoint under a plan")
    ft_parser.add_argument("--debug", action="store_true", help="Audit retention every epoch")

    subparsers.add_parser("compare", parents=[common, training, source],
                          help="FT-Full vs FT-Last vs BSR from one checkpoint")

    ps_parser = subparsers.add_parser("plan-search", parents=[common, training, source],
                                      help="Rank a grid of plans")
    ps_parser.add_argument("--grid", default="trainable-positions",
                           help="trainable-positions, drop-rates, last-blocks or a grid file")
    ps_parser.add_argument("--budget", type=int, default=0,
                           help="Fine-tune steps per plan (0 = analysis only)")
    return parser


def main(argv=None):
    load_env_safely()
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except BsrError as e:
        print(f"❌ {type(e).__name__}: {e}")
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())

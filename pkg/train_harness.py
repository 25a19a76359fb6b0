"""
Desk-scale training harness: synthetic shifted tasks, softmax cross-entropy,
SGD-momentum / AdamW with constant or cosine schedules, and the
pretrain -> finetune -> compare loop used for transfer experiments.

Per-sample tapes are built independently (optionally on a thread pool) and
their gradients are reduced in sample-index order, so a run is bitwise
reproducible for a given seed regardless of the thread count.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from bsr_policy import full_plan, validate_plan
from errors import ContractError, NumericError
from memory_model import count_flops, estimate_total, tape_audit
from tensor_autodiff import Recorder, Tape, backward, finite_diff_check
from utils_store import to_frame, write_table
from vit_model import init_params, reset_head, vit_forward

# ═══════════════════════════════════════════════════════════════════════════
# CONFIG
# ═══════════════════════════════════════════════════════════════════════════
TRAIN_PRESETS = {
    "pretrain": dict(optimizer="adamw", base_lr=3e-3, schedule="cosine", epochs=8,
                     batch=16, weight_decay=0.05),
    "finetune": dict(optimizer="adamw", base_lr=2e-3, schedule="cosine", epochs=5,
                     batch=16, weight_decay=0.05),
    "sgd": dict(optimizer="sgd_momentum", base_lr=0.05, schedule="cosine", epochs=5,
                batch=16, weight_decay=1e-4, momentum=0.9),
}

TASK_DEFAULTS = {
    "n_train": 256,
    "n_test": 128,
    "noise": 0.3,
    "source_shift": 0.0,
    "target_shift": 0.6,
}

OPTIMIZERS = ("adamw", "sgd_momentum")
SCHEDULES = ("constant", "cosine")


@dataclass
class TrainConfig:
    optimizer: str = "adamw"
    base_lr: float = 2e-3
    schedule: str = "cosine"
    epochs: int = 5
    batch: int = 16
    weight_decay: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_steps: int | None = None

    def __post_init__(self):
        problems = []
        if self.optimizer not in OPTIMIZERS:
            problems.append(f"optimizer must be one of {OPTIMIZERS}")
        if self.schedule not in SCHEDULES:
            problems.append(f"schedule must be one of {SCHEDULES}")
        if self.batch < 1:
            problems.append("batch must be >= 1")
        if self.base_lr < 0:
            problems.append("base_lr must be >= 0")
        if self.epochs < 1:
            problems.append("epochs must be >= 1")
        if self.max_steps is not None and self.max_steps < 1:
            problems.append("max_steps must be >= 1 when set")
        if problems:
            raise ContractError("; ".join(problems))


# ═══════════════════════════════════════════════════════════════════════════
# DATA
# ═══════════════════════════════════════════════════════════════════════════
@dataclass
class Dataset:
    images: np.ndarray  # [n x C x S x S], per-channel standardized
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    mean: np.ndarray = field(default=None)
    std: np.ndarray = field(default=None)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ContractError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractError("labels outside [0, num_classes)")

    def __len__(self):
        return len(self.labels)

    def batches(self, batch, seed=None):
        """Index batches; seed=None keeps dataset order."""
        order = np.arange(len(self))
        if seed is not None:
            order = np.random.default_rng(seed).permutation(len(self))
        for start in range(0, len(order), batch):
            yield order[start:start + batch]


def _class_patterns(num_classes, image_size, channels, cell, rng):
    """Location patterns with disjoint cell support and oriented gratings, one per class."""
    g = image_size // cell
    yy, xx = np.mgrid[0:image_size, 0:image_size] / image_size
    weights = rng.uniform(0.5, 1.5, size=(num_classes, channels))
    phases = rng.uniform(0, 2 * np.pi, size=num_classes)
    location = np.zeros((num_classes, channels, image_size, image_size))
    orientation = np.zeros_like(location)
    for c in range(num_classes):
        texture = 0.5 + 0.5 * np.sin(2 * np.pi * 2 * (xx + yy) + phases[c])
        mask = np.zeros((image_size, image_size))
        for idx in range(g * g):
            if idx % num_classes == c:
                gy, gx = divmod(idx, g)
                mask[gy * cell:(gy + 1) * cell, gx * cell:(gx + 1) * cell] = 1.0
        theta = c * np.pi / num_classes
        grating = np.cos(2 * np.pi * 3 * (xx * np.cos(theta) + yy * np.sin(theta)))
        for ch in range(channels):
            location[c, ch] = weights[c, ch] * mask * texture
            orientation[c, ch] = weights[c, ch] * grating
    return location, orientation


def make_synthetic(num_classes, image_size, shift=0.0, seed=0, n=256, channels=3,
                   noise=0.3, cell=None, split="train", stats=None):
    """
    Class-conditional images: (1 - shift) * location pattern + shift * oriented
    grating, a random positive amplitude, plus Gaussian noise. Labels are
    round-robin then shuffled. stats=(mean, std) reuses another split's
    standardization.
    """
    if num_classes < 2:
        raise ContractError("make_synthetic needs at least 2 classes")
    if not 0.0 <= shift <= 1.0:
        raise ContractError(f"shift {shift} outside [0, 1]")
    cell = cell or max(1, image_size // 4)
    pattern_rng = np.random.default_rng(seed)
    location, orientation = _class_patterns(num_classes, image_size, channels, cell, pattern_rng)
    patterns = (1.0 - shift) * location + shift * orientation

    split_id = {"train": 0, "test": 1}.get(split, 2)
    rng = np.random.default_rng([seed, split_id])
    labels = rng.permutation(np.arange(n) % num_classes)
    amplitude = rng.uniform(0.75, 1.25, size=n)
    images = amplitude[:, None, None, None] * patterns[labels]
    if noise:
        images = images + noise * rng.standard_normal(images.shape)

    if stats is None:
        mean = images.mean(axis=(0, 2, 3))
        std = images.std(axis=(0, 2, 3))
        std = np.where(std > 0, std, 1.0)
    else:
        mean, std = stats
    images = (images - mean[None, :, None, None]) / std[None, :, None, None]
    return Dataset(images, labels.astype(np.int64), num_classes, split, mean, std)


def make_task(num_classes, image_size, shift=0.0, seed=0, channels=3,
              n_train=None, n_test=None, noise=None, cell=None):
    """Train and test splits of one task sharing class patterns and train statistics."""
    n_train = n_train or TASK_DEFAULTS["n_train"]
    n_test = n_test or TASK_DEFAULTS["n_test"]
    noise = TASK_DEFAULTS["noise"] if noise is None else noise
    train = make_synthetic(num_classes, image_size, shift, seed, n_train, channels,
                           noise, cell, "train")
    test = make_synthetic(num_classes, image_size, shift, seed, n_test, channels,
                          noise, cell, "test", stats=(train.mean, train.std))
    return train, test


# ═══════════════════════════════════════════════════════════════════════════
# LOSS / OPTIMIZERS
# ═══════════════════════════════════════════════════════════════════════════
def cross_entropy(logits, label):
    """Softmax cross-entropy of one sample; returns (loss, dloss/dlogits)."""
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    z = z - z.max()
    log_norm = np.log(np.exp(z).sum())
    probs = np.exp(z - log_norm)
    grad = probs.copy()
    grad[label] -= 1.0
    return float(log_norm - z[label]), grad


def lr_at(cfg: TrainConfig, step_index, total_steps):
    if cfg.schedule == "constant" or total_steps <= 0:
        return cfg.base_lr
    t = min(step_index, total_steps)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * t / total_steps))


@dataclass
class OptimizerState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    momentum: dict = field(default_factory=dict)


def step(params, grads, state: OptimizerState, cfg: TrainConfig, step_index, total_steps):
    """
    One optimizer update in place. AdamW decays matrices only (decoupled);
    SGD adds weight decay to the gradient of matrices then applies momentum.
    """
    leaked = sorted(n for n in grads if n not in params.trainable)
    if leaked:
        raise ContractError(f"gradients for frozen parameters: {leaked}")
    lr = lr_at(cfg, step_index, total_steps)
    state.t += 1
    for name in sorted(grads):
        p = params.values[name]
        g = grads[name]
        decays = p.ndim == 2 and cfg.weight_decay > 0
        if cfg.optimizer == "adamw":
            m = state.m.get(name, np.zeros_like(p))
            v = state.v.get(name, np.zeros_like(p))
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
            state.m[name], state.v[name] = m, v
            m_hat = m / (1.0 - cfg.beta1 ** state.t)
            v_hat = v / (1.0 - cfg.beta2 ** state.t)
            if decays:
                p -= lr * cfg.weight_decay * p
            p -= lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        else:
            if decays:
                g = g + cfg.weight_decay * p
            buf = state.momentum.get(name)
            buf = g.copy() if buf is None else cfg.momentum * buf + g
            state.momentum[name] = buf
            p -= lr * buf
    return params, state


# ═══════════════════════════════════════════════════════════════════════════
# GRADIENTS
# ═══════════════════════════════════════════════════════════════════════════
@dataclass
class SampleResult:
    loss: float
    correct: bool
    grads: dict
    tape_bytes: int
    block_inputs: tuple = ()


def sample_gradients(image, label, params, config, plan, rules=None):
    tape = Tape()
    logits = vit_forward(image, params, config, plan, Recorder(tape))
    loss, seed = cross_entropy(logits.value, label)
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss {loss} for label {label}")
    table = backward(tape, seed[None, :], params.values, rules)
    correct = int(np.argmax(logits.value)) == int(label)
    return SampleResult(loss, correct, table.params, tape.retained_bytes,
                        tuple(sorted(table.block_inputs)))


def batch_gradients(data: Dataset, indices, params, config, plan, threads=1, rules=None):
    """Mean gradients over a batch; per-sample results reduced in index order."""
    def run(i):
        return sample_gradients(data.images[i], data.labels[i], params, config, plan, rules)

    if threads > 1 and len(indices) > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            results = list(executor.map(run, indices))
    else:
        results = [run(i) for i in indices]

    n = len(results)
    grads = {}
    for res in results:
        for name, g in res.grads.items():
            grads[name] = g.copy() if name not in grads else grads[name] + g
    for name in grads:
        grads[name] /= n
    loss = sum(r.loss for r in results) / n
    accuracy = sum(r.correct for r in results) / n
    return grads, loss, accuracy, sum(r.tape_bytes for r in results), results


# ═══════════════════════════════════════════════════════════════════════════
# LOOPS
# ═══════════════════════════════════════════════════════════════════════════
def evaluate(params, config, data: Dataset, plan=None, threads=1):
    """Accuracy and mean loss with no recording; token dropping still applies."""
    def run(i):
        logits = vit_forward(data.images[i], params, config, plan, Recorder(None)).value
        loss, _ = cross_entropy(logits, data.labels[i])
        return loss, int(np.argmax(logits)) == int(data.labels[i])

    indices = range(len(data))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            results = list(executor.map(run, indices))
    else:
        results = [run(i) for i in indices]
    if not results:
        return 0.0, 0.0
    accuracy = sum(c for _, c in results) / len(results)
    mean_loss = sum(l for l, _ in results) / len(results)
    return accuracy, mean_loss


@dataclass
class FinetuneResult:
    params: object
    trace: pd.DataFrame
    test_accuracy: float
    test_loss: float


def _debug_checks(data, params, config, plan, horizon):
    """Retention audit and gradient-horizon check on the first training sample."""
    tape = Tape()
    vit_forward(data.images[0], params, config, plan, Recorder(tape))
    tape_audit(tape, estimate_total(config, plan, batch=1, mode="exact"))
    res = sample_gradients(data.images[0], data.labels[0], params, config, plan)
    early = [b for b in res.block_inputs if b < horizon]
    if early:
        raise ContractError(f"block-input gradients below the horizon {horizon}: {early}")


def finetune(params, config, train: Dataset, test: Dataset, plan, cfg: TrainConfig,
             trace_path=None, debug=False, verbose=True, threads=1, rules=None):
    """
    Train a copy of params under plan (None = head only). Returns the trained
    params and a trace with one train row per step and one test row per epoch.
    """
    if plan is not None:
        _, warnings = validate_plan(config, plan)
        if verbose:
            for w in warnings:
                print(f"⚠️ {w}")
    params = params.copy().set_trainable(plan)
    horizon = config.depth if plan is None else plan.grad_horizon
    steps_per_epoch = math.ceil(len(train) / cfg.batch)
    total_steps = cfg.epochs * steps_per_epoch
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)
    state = OptimizerState()
    rows = []
    step_index = 0

    if verbose:
        print(f"🚀 Fine-tuning {params.count(trainable_only=True):,} of "
              f"{params.count():,} parameters for {total_steps} steps")

    for epoch in range(cfg.epochs):
        if step_index >= total_steps:
            break
        if debug:
            _debug_checks(train, params, config, plan, horizon)
        epoch_losses = []
        for indices in train.batches(cfg.batch, seed=cfg.seed * 1000 + epoch):
            if step_index >= total_steps:
                break
            grads, loss, acc, tape_bytes, _ = batch_gradients(
                train, indices, params, config, plan, threads, rules)
            if not np.isfinite(loss):
                raise NumericError(f"loss became {loss} at step {step_index} (epoch {epoch})")
            lr = lr_at(cfg, step_index, total_steps)
            step(params, grads, state, cfg, step_index, total_steps)
            rows.append([step_index, "train", loss, acc, lr, tape_bytes])
            epoch_losses.append(loss)
            step_index += 1
        test_acc, test_loss = evaluate(params, config, test, plan, threads)
        rows.append([step_index, "test", test_loss, test_acc, lr_at(cfg, step_index, total_steps), 0])
        if verbose:
            print(f"   epoch {epoch + 1}/{cfg.epochs}: train loss {np.mean(epoch_losses):.4f} "
                  f"| test acc {test_acc:.3f} loss {test_loss:.4f}")

    trace = to_frame(rows, "trace")
    if trace_path is not None:
        write_table(trace, trace_path, schema="trace")
    final = trace[trace["split"] == "test"].iloc[-1]
    return FinetuneResult(params, trace, float(final["accuracy"]), float(final["loss"]))


def pretrain(config, train, test, cfg: TrainConfig, verbose=True, threads=1, trace_path=None):
    """Train the whole model from scratch on the source task (all blocks trainable)."""
    params = init_params(config, seed=cfg.seed)
    return finetune(params, config, train, test, full_plan(config.depth), cfg,
                    trace_path=trace_path, verbose=verbose, threads=threads)


COMPARE_METHODS = ("FT-Full", "FT-Last", "BSR")


def compare(source_params, config, train, test, plan, cfg: TrainConfig,
            mode="paper", verbose=True, threads=1):
    """
    FT-Full, FT-Last and BSR from the same source parameters. The head is
    re-initialized for the target task with the run seed; memory_mb is the
    analytical figure at cfg.batch in the given accountant mode.
    """
    plans = {"FT-Full": full_plan(config.depth), "FT-Last": None, "BSR": plan}
    if plan is not None and plan.residual:
        from vit_model import add_side_blocks
        source_params = add_side_blocks(source_params.copy(), config, plan.trainable_blocks,
                                        seed=cfg.seed + 1)
    rows = []
    for method in COMPARE_METHODS:
        start = reset_head(source_params.copy(), train.num_classes, seed=cfg.seed)
        if verbose:
            print(f"📊 {method}")
        result = finetune(start, config, train, test, plans[method], cfg,
                          verbose=verbose, threads=threads)
        memory = estimate_total(config, plans[method], cfg.batch, mode)
        flops = count_flops(config, plans[method], cfg.batch)
        rows.append([method, result.test_accuracy, result.test_loss, memory.total_mb, flops.gmacs])
    return to_frame(rows, "compare")


def transfer_experiment(config, plan, seeds=(0, 1, 2, 3, 4), pretrain_cfg=None,
                        finetune_cfg=None, source_shift=None, target_shift=None,
                        verbose=False, threads=1):
    """Pretrain on the source task, then compare methods on the shifted target, per seed."""
    source_shift = TASK_DEFAULTS["source_shift"] if source_shift is None else source_shift
    target_shift = TASK_DEFAULTS["target_shift"] if target_shift is None else target_shift
    frames = []
    for seed in seeds:
        pcfg = TrainConfig(**{**TRAIN_PRESETS["pretrain"], **(pretrain_cfg or {}), "seed": seed})
        fcfg = TrainConfig(**{**TRAIN_PRESETS["finetune"], **(finetune_cfg or {}), "seed": seed})
        src_train, src_test = make_task(config.num_classes, config.image_size, source_shift,
                                        seed, config.channels, cell=config.patch_size)
        tgt_train, tgt_test = make_task(config.num_classes, config.image_size, target_shift,
                                        seed + 100, config.channels, cell=config.patch_size)
        source = pretrain(config, src_train, src_test, pcfg, verbose=verbose, threads=threads)
        df = compare(source.params, config, tgt_train, tgt_test, plan, fcfg,
                     verbose=verbose, threads=threads)
        df.insert(0, "seed", seed)
        frames.append(df)
    return pd.concat(frames, ignore_index=True)


# ═══════════════════════════════════════════════════════════════════════════
# GRADIENT CHECK
# ═══════════════════════════════════════════════════════════════════════════
GRADCHECK_STD = 0.3
GRADCHECK_JITTER = 0.1


def gradient_check(config, plan, seed=0, step_size=1e-5, rules=None):
    """
    Max relative error between autodiff and central differences over every
    trainable parameter, for one synthetic sample and cross-entropy loss.
    """
    sides = plan.trainable_blocks if plan is not None and plan.residual else ()
    params = init_params(config, seed=seed, std=GRADCHECK_STD, jitter=GRADCHECK_JITTER,
                         side_blocks=sides)
    params.set_trainable(plan)
    data = make_synthetic(config.num_classes, config.image_size, shift=0.5, seed=seed,
                          n=config.num_classes, channels=config.channels, noise=0.5)
    image, label = data.images[0], int(data.labels[0])

    res = sample_gradients(image, label, params, config, plan, rules)

    def loss_fn():
        logits = vit_forward(image, params, config, plan, Recorder(None)).value
        return cross_entropy(logits, label)[0]

    return finite_diff_check(loss_fn, params.values, res.grads, step_size,
                             frozen=params.frozen_names())

"""
Closed-form activation memory and FLOPs for any (config, plan, batch).

Two accountant modes:
  paper  the published inventory: Q/K/V, softmax probabilities, GELU input,
         plus linear-layer inputs of trainable blocks. No LayerNorm buffers.
  exact  exactly what the runtime tape keeps, byte for byte at batch 1.

All bytes use a 4-byte element; 1 MB = 2**20 bytes.
"""

from dataclasses import dataclass, field

import pandas as pd

from bsr_policy import full_plan, fused_count, token_schedule
from errors import AuditFailure, ContractError, PlanError
from tensor_autodiff import ACCOUNT_WIDTH

MB = 2 ** 20
MODES = ("paper", "exact")

QKV_ROLES = ("Q", "K", "V")
SELECT_ROLES = ("token_select", "fuse_input", "score_probs")


@dataclass
class BlockMemory:
    """Retained bytes per role for one block (block == depth is the head)."""

    block: int
    t_mhsa: int
    t_ffn: int
    trainable: bool
    roles: dict = field(default_factory=dict)

    def _sum(self, names):
        return sum(self.roles.get(r, 0) for r in names)

    @property
    def qkv_bytes(self):
        return self._sum(QKV_ROLES)

    @property
    def softmax_bytes(self):
        return self.roles.get("probs", 0)

    @property
    def gelu_bytes(self):
        return self.roles.get("gelu_input", 0)

    @property
    def linear_extras_bytes(self):
        return self.roles.get("input", 0)

    @property
    def ln_stat_bytes(self):
        return self.roles.get("ln_stats", 0)

    @property
    def ln_xhat_bytes(self):
        return self.roles.get("ln_xhat", 0)

    @property
    def select_bytes(self):
        return self._sum(SELECT_ROLES)

    @property
    def side_bytes(self):
        return sum(v for r, v in self.roles.items() if r.startswith("side_"))

    @property
    def total(self):
        return sum(self.roles.values())


def _check_mode(mode):
    if mode not in MODES:
        raise ContractError(f"unknown accountant mode '{mode}' (use {' or '.join(MODES)})")


def _core_roles(t_m, t_f, width, heads, ffn_mult, trainable, mode):
    """Element counts for one encoder block of the given width."""
    roles = {
        "Q": t_m * width,
        "K": t_m * width,
        "V": t_m * width,
        "probs": heads * t_m * t_m,
        "gelu_input": t_f * ffn_mult * width,
    }
    if mode == "exact":
        roles["ln_stats"] = 2 * (t_m + t_f)
        roles["ln_xhat"] = (t_m + t_f) * width
        if trainable:
            # qkv and out-proj inputs at t_mhsa; fc1 and fc2 inputs at t_ffn
            roles["input"] = (2 * t_m + (1 + ffn_mult) * t_f) * width
    elif trainable:
        # paper inventory also counts both LayerNorm inputs
        roles["input"] = (3 * t_m + (2 + ffn_mult) * t_f) * width
    return roles


def block_memory(config, t_mhsa, t_ffn, trainable, mode="paper", dropped=0, block=0):
    """
    Retained bytes of one block. dropped is the number of tokens fused at
    this block (a single token is never fused); in exact mode a drop adds the selection map, the dropped rows
    and the per-head score probabilities.
    """
    _check_mode(mode)
    if t_mhsa < 2 or t_ffn < 2:
        raise PlanError(f"token counts must be >= 2, got ({t_mhsa}, {t_ffn})")
    L = config.embed_dim
    roles = _core_roles(t_mhsa, t_ffn, L, config.heads, config.ffn_mult, trainable, mode)
    if mode == "exact" and dropped > 1:
        roles["token_select"] = t_mhsa - 1
        roles["fuse_input"] = dropped * L
        roles["score_probs"] = config.heads * (t_mhsa - 1)
    return BlockMemory(block, t_mhsa, t_ffn, trainable,
                       {r: n * ACCOUNT_WIDTH for r, n in roles.items()})


def side_memory(config, t, mode="paper"):
    """Roles added by a trainable width-L/4 side block at t tokens (prefixed 'side_')."""
    _check_mode(mode)
    L, Ls, f = config.embed_dim, config.side_dim, config.ffn_mult
    roles = _core_roles(t, t, Ls, config.heads, f, True, mode)
    # down-projection input at width L, up-projection input at width Ls
    roles["input"] += t * L + t * Ls
    return {f"side_{r}": n * ACCOUNT_WIDTH for r, n in roles.items()}


def head_memory(config, mode="paper"):
    _check_mode(mode)
    L = config.embed_dim
    roles = {"input": L}
    if mode == "exact":
        roles["ln_xhat"] = L
        roles["ln_stats"] = 2
    return BlockMemory(config.depth, 1, 1, True,
                       {r: n * ACCOUNT_WIDTH for r, n in roles.items()})


@dataclass
class MemoryReport:
    plan_key: str
    mode: str
    batch: int
    blocks: list
    baseline_per_sample: int

    @property
    def per_sample(self):
        return sum(b.total for b in self.blocks)

    @property
    def grand_total(self):
        return self.per_sample * self.batch

    @property
    def frozen_total(self):
        return self.batch * sum(b.total for b in self.blocks if not b.trainable)

    @property
    def trainable_total(self):
        return self.batch * sum(b.total for b in self.blocks if b.trainable)

    @property
    def total_mb(self):
        return self.grand_total / MB

    @property
    def baseline_total(self):
        return self.baseline_per_sample * self.batch

    @property
    def reduce_ratio(self):
        return self.baseline_per_sample / self.per_sample if self.per_sample else float("inf")

    def by_block_role(self):
        """{(block, role): bytes} at the report's batch."""
        return {(b.block, r): v * self.batch for b in self.blocks for r, v in b.roles.items()}


def _plan_key(plan):
    return "last" if plan is None else plan.key


def _blocks_for(config, plan, mode):
    schedule = token_schedule(config, plan)
    horizon = config.depth if plan is None else plan.grad_horizon
    trainable = set() if plan is None else set(plan.trainable_blocks)
    drops = set() if plan is None else set(plan.drop_locations)
    residual = plan is not None and plan.residual
    blocks = []
    for i in range(horizon, config.depth):
        t_m, t_f = schedule.mhsa_tokens[i], schedule.ffn_tokens[i]
        m = fused_count(t_m, plan.drop_rate) if i in drops else 0
        entry = block_memory(config, t_m, t_f, i in trainable and not residual,
                             mode, dropped=m, block=i)
        if residual and i in trainable:
            entry.roles.update(side_memory(config, t_m, mode))
            entry.trainable = True
        blocks.append(entry)
    blocks.append(head_memory(config, mode))
    return blocks


def estimate_total(config, plan, batch=1, mode="paper") -> MemoryReport:
    """Blocks from the gradient horizon on, plus the head, times batch."""
    _check_mode(mode)
    if batch < 1:
        raise ContractError(f"batch must be >= 1, got {batch}")
    blocks = _blocks_for(config, plan, mode)
    baseline = sum(b.total for b in _blocks_for(config, full_plan(config.depth), mode))
    return MemoryReport(_plan_key(plan), mode, batch, blocks, baseline)


# ═══════════════════════════════════════════════════════════════════════════
# FLOPS
# ═══════════════════════════════════════════════════════════════════════════
@dataclass
class FlopsReport:
    """Forward multiply-accumulates per (block, component) for one sample, scaled by batch."""

    plan_key: str
    batch: int
    rows: list  # (block, component, macs per sample)

    @property
    def total_macs(self):
        return self.batch * sum(m for _, _, m in self.rows)

    @property
    def gmacs(self):
        return self.total_macs / 1e9

    def component_totals(self):
        totals = {}
        for _, comp, macs in self.rows:
            totals[comp] = totals.get(comp, 0) + macs * self.batch
        return totals


def _encoder_macs(t_m, t_f, width, heads, ffn_mult):
    d = width // heads
    return [
        ("qkv_proj", 3 * t_m * width * width),
        ("attn_scores", heads * t_m * t_m * d),
        ("attn_apply", heads * t_m * t_m * d),
        ("out_proj", t_m * width * width),
        ("ffn", 2 * t_f * width * width * ffn_mult),
    ]


def count_flops(config, plan, batch=1) -> FlopsReport:
    schedule = token_schedule(config, plan)
    L, N = config.embed_dim, config.num_patches
    residual = plan is not None and plan.residual
    sides = set(plan.trainable_blocks) if residual else set()
    rows = [(-1, "patch_embed", N * L * config.patch_dim)]
    for i in range(config.depth):
        t_m, t_f = schedule.mhsa_tokens[i], schedule.ffn_tokens[i]
        rows.extend((i, comp, macs)
                    for comp, macs in _encoder_macs(t_m, t_f, L, config.heads, config.ffn_mult))
        if i in sides:
            Ls = config.side_dim
            side_block = sum(m for _, m in _encoder_macs(t_m, t_m, Ls, config.heads, config.ffn_mult))
            rows.append((i, "side_down", t_m * L * Ls))
            rows.append((i, "side_block", side_block))
            rows.append((i, "side_up", t_m * Ls * L))
    rows.append((config.depth, "head", L * config.num_classes))
    return FlopsReport(_plan_key(plan), batch, rows)


# ═══════════════════════════════════════════════════════════════════════════
# TAPE AUDIT
# ═══════════════════════════════════════════════════════════════════════════
@dataclass
class AuditReport:
    rows: list  # dicts: block, role, predicted, measured, diff
    predicted_total: int
    measured_total: int

    @property
    def ok(self):
        return all(r["diff"] == 0 for r in self.rows) and self.predicted_total == self.measured_total


def tape_audit(tape, report: MemoryReport) -> AuditReport:
    """Compare a batch-1 tape against an exact-mode report; raise AuditFailure on any difference."""
    if report.mode != "exact":
        raise ContractError("tape_audit needs an exact-mode report")
    if report.batch != 1:
        raise ContractError("tape_audit needs a batch-1 report")
    predicted = report.by_block_role()
    measured = tape.bytes_by_block_role()
    rows = []
    for key in sorted(set(predicted) | set(measured), key=lambda k: (k[0], k[1])):
        p, m = predicted.get(key, 0), measured.get(key, 0)
        rows.append({"block": key[0], "role": key[1], "predicted": p,
                     "measured": m, "diff": m - p})
    audit = AuditReport(rows, report.grand_total, tape.retained_bytes)
    if not audit.ok:
        raise AuditFailure([r for r in rows if r["diff"] != 0])
    return audit


# ═══════════════════════════════════════════════════════════════════════════
# TABLES
# ═══════════════════════════════════════════════════════════════════════════
def memory_frame(report: MemoryReport) -> pd.DataFrame:
    """block,role,bytes,mode rows, block ascending then role."""
    rows = [
        {"block": block, "role": role, "bytes": value, "mode": report.mode}
        for (block, role), value in report.by_block_role().items()
    ]
    df = pd.DataFrame(rows, columns=["block", "role", "bytes", "mode"])
    return df.sort_values(["block", "role"], kind="mergesort").reset_index(drop=True)


def memory_summary(report: MemoryReport) -> pd.DataFrame:
    b = report.batch
    rows = []
    for entry in report.blocks:
        rows.append({
            "block": entry.block,
            "t_mhsa": entry.t_mhsa,
            "t_ffn": entry.t_ffn,
            "trainable": entry.trainable,
            "qkv_mb": entry.qkv_bytes * b / MB,
            "softmax_mb": entry.softmax_bytes * b / MB,
            "gelu_mb": entry.gelu_bytes * b / MB,
            "extras_mb": entry.linear_extras_bytes * b / MB,
            "ln_mb": (entry.ln_stat_bytes + entry.ln_xhat_bytes) * b / MB,
            "select_mb": entry.select_bytes * b / MB,
            "side_mb": entry.side_bytes * b / MB,
            "total_mb": entry.total * b / MB,
        })
    return pd.DataFrame(rows)


def flops_frame(report: FlopsReport) -> pd.DataFrame:
    rows = [{"block": blk, "component": comp, "macs": macs * report.batch}
            for blk, comp, macs in report.rows]
    return pd.DataFrame(rows, columns=["block", "component", "macs"])


def audit_frame(audit: AuditReport) -> pd.DataFrame:
    return pd.DataFrame(audit.rows, columns=["block", "role", "predicted", "measured", "diff"])

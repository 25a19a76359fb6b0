"""
Block selective reprogramming policy.

A plan names the trainable blocks, the token drop locations and the drop
rate. Gradients never flow below the earliest trainable block (the gradient
horizon). At a drop location the cls row of the pre-softmax attention scores
ranks image tokens; the top K survive in original order and the rest are
fused into one score-weighted token appended after them.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from errors import PlanError
from tensor_autodiff import (
    Recorder,
    Var,
    add_bias,
    cls_row,
    mark_block_input,
    matmul,
    mean_heads,
    residual_add,
    softmax_rows,
    token_select,
)

# ═══════════════════════════════════════════════════════════════════════════
# PLANS
# ═══════════════════════════════════════════════════════════════════════════
MIN_STRICT_DROP = 3
KEEP_EPS = 1e-9  # (1 - 0.3) * 60 lands a hair above 42 in binary floating point

PLAN_KEYS = ("trainable", "drops", "rate", "strict", "residual")


@dataclass(frozen=True)
class BsrPlan:
    trainable_blocks: tuple
    drop_locations: tuple = ()
    drop_rate: float = 0.5
    strict: bool = True
    residual: bool = False

    def __post_init__(self):
        object.__setattr__(self, "trainable_blocks", tuple(int(i) for i in self.trainable_blocks))
        object.__setattr__(self, "drop_locations", tuple(int(i) for i in self.drop_locations))
        object.__setattr__(self, "drop_rate", float(self.drop_rate))
        if not self.trainable_blocks:
            raise PlanError("trainable set is empty (use the head-only mode for FT-Last)")

    @property
    def grad_horizon(self):
        return min(self.trainable_blocks)

    @property
    def key(self):
        """Stable text key used for sorting and table rows."""
        t = ",".join(map(str, self.trainable_blocks))
        d = ",".join(map(str, self.drop_locations)) or "-"
        tag = ";residual" if self.residual else ""
        return f"trainable={t};drops={d};rate={self.drop_rate:g}{tag}"

    def to_text(self):
        lines = [
            f"trainable = {','.join(map(str, self.trainable_blocks))}",
            f"drops = {','.join(map(str, self.drop_locations))}",
            f"rate = {self.drop_rate:g}",
            f"strict = {'true' if self.strict else 'false'}",
        ]
        if self.residual:
            lines.append("residual = true")
        return "\n".join(lines) + "\n"


def full_plan(depth):
    """FT-Full: every block trainable, no dropping."""
    return BsrPlan(tuple(range(depth)), (), 0.5, strict=False)


PLAN_PRESETS = {
    "default": dict(trainable_blocks=(3, 7, 11), drop_locations=(3, 6, 9), drop_rate=0.5),
    "toy": dict(trainable_blocks=(1, 3), drop_locations=(1, 2), drop_rate=0.5, strict=False),
    "toy-small": dict(trainable_blocks=(0, 1), drop_locations=(0,), drop_rate=0.5, strict=False),
    "residual": dict(trainable_blocks=(3, 7, 11), residual=True),
    "residual-toy": dict(trainable_blocks=(1, 3), residual=True, strict=False),
    "residual-small": dict(trainable_blocks=(1,), residual=True, strict=False),
}
SPECIAL_PLANS = ("full", "last")

TRAINABLE_POSITION_ROWS = [
    (3, 6, 9, 11), (2, 5, 8, 11), (4, 7, 10, 11), (8, 9, 10, 11), (0, 2, 5, 8),
    (3, 7, 11), (4, 7, 11), (2, 7, 11), (9, 10, 11), (2, 5, 8),
    (4, 11), (7, 11), (10, 11),
]
DROP_RATE_ROWS = [
    (0.3, (1, 3, 5, 7, 9)),
    (0.5, (3, 6, 9)),
    (0.7, (5, 7, 9)),
]
LAST_BLOCK_ROWS = [(10, 11), (9, 10, 11), (8, 9, 10, 11)]


def _grid_trainable_positions():
    return [BsrPlan(rows, (3, 6, 9), 0.5) for rows in TRAINABLE_POSITION_ROWS]


def _grid_drop_rates():
    return [BsrPlan((3, 7, 11), drops, rate, strict=False) for rate, drops in DROP_RATE_ROWS]


def _grid_last_blocks():
    plans = []
    for rows in LAST_BLOCK_ROWS:
        plans.append(BsrPlan(rows, (), 0.5))
        plans.append(BsrPlan(rows, (3, 6, 9), 0.5))
    return plans


PLAN_GRIDS = {
    "trainable-positions": _grid_trainable_positions,
    "drop-rates": _grid_drop_rates,
    "last-blocks": _grid_last_blocks,
}


# ═══════════════════════════════════════════════════════════════════════════
# PLAN FILES
# ═══════════════════════════════════════════════════════════════════════════
def _parse_indices(value, key):
    value = value.strip()
    if value.lower() in ("", "none", "-", "[]"):
        return ()
    try:
        return tuple(int(v) for v in value.strip("[]").split(",") if v.strip())
    except ValueError:
        raise PlanError(f"'{key}' expects comma-separated integers, got {value!r}") from None


def _parse_bool(value, key):
    v = value.strip().lower()
    if v in ("true", "yes", "1", "on"):
        return True
    if v in ("false", "no", "0", "off"):
        return False
    raise PlanError(f"'{key}' expects true/false, got {value!r}")


def plan_from_fields(fields: dict, source="<plan>"):
    unknown = sorted(set(fields) - set(PLAN_KEYS))
    if unknown:
        raise PlanError(f"{source}: unknown plan keys {unknown}")
    if "trainable" not in fields:
        raise PlanError(f"{source}: missing 'trainable'")
    try:
        rate = float(fields.get("rate", "0.5"))
    except ValueError:
        raise PlanError(f"{source}: 'rate' must be a number, got {fields['rate']!r}") from None
    return BsrPlan(
        trainable_blocks=_parse_indices(fields["trainable"], "trainable"),
        drop_locations=_parse_indices(fields.get("drops", ""), "drops"),
        drop_rate=rate,
        strict=_parse_bool(fields.get("strict", "true"), "strict"),
        residual=_parse_bool(fields.get("residual", "false"), "residual"),
    )


def parse_plan_text(text, source="<plan>"):
    """Parse `key = value` lines (trainable, drops, rate, strict, residual)."""
    from vit_model import parse_key_values

    return plan_from_fields(parse_key_values(text, source), source)


def parse_grid_text(text, source="<grid>"):
    """One plan per line, fields separated by ';' (e.g. `trainable=3,7,11; drops=3,6,9`)."""
    plans = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = {}
        for part in line.split(";"):
            if not part.strip():
                continue
            if "=" not in part:
                raise PlanError(f"{source}:{lineno}: expected key=value, got {part.strip()!r}")
            k, v = part.split("=", 1)
            fields[k.strip().lower()] = v.strip()
        plans.append(plan_from_fields(fields, f"{source}:{lineno}"))
    return plans


def resolve_plan(name_or_path, config):
    """Preset name, 'full', 'last' (returns None: head only) or a plan file."""
    key = str(name_or_path).lower()
    if key == "full":
        return full_plan(config.depth)
    if key == "last":
        return None
    if key in PLAN_PRESETS:
        return BsrPlan(**PLAN_PRESETS[key])
    path = Path(name_or_path)
    if not path.exists():
        names = ", ".join(list(PLAN_PRESETS) + list(SPECIAL_PLANS))
        raise PlanError(f"unknown plan '{name_or_path}' (presets: {names})")
    return parse_plan_text(path.read_text(encoding="utf-8"), str(path))


def resolve_grid(name_or_path):
    key = str(name_or_path).lower()
    if key in PLAN_GRIDS:
        return PLAN_GRIDS[key]()
    path = Path(name_or_path)
    if not path.exists():
        raise PlanError(f"unknown grid '{name_or_path}' (built-in: {', '.join(PLAN_GRIDS)})")
    return parse_grid_text(path.read_text(encoding="utf-8"), str(path))


# ═══════════════════════════════════════════════════════════════════════════
# TOKEN COUNTS
# ═══════════════════════════════════════════════════════════════════════════
def keep_count(t, rate):
    """Image tokens kept at a drop location: ceil((1 - r)(t - 1))."""
    if not 0.0 < rate < 1.0:
        raise PlanError(f"drop rate {rate} outside (0, 1)")
    return int(math.ceil((1.0 - rate) * (t - 1) - KEEP_EPS))


def dropped_count(t, rate):
    return t - 1 - keep_count(t, rate)


def fused_count(t, rate):
    """Tokens merged into the fused token; a lone dropped token stays where it is."""
    m = dropped_count(t, rate)
    return m if m > 1 else 0


def tokens_after_drop(t, rate):
    m = fused_count(t, rate)
    return t - m + 1 if m else t


@dataclass
class TokenSchedule:
    """Token counts (cls and fused token included) entering each block's MHSA and FFN."""

    mhsa_tokens: list = field(default_factory=list)
    ffn_tokens: list = field(default_factory=list)

    def pairs(self):
        return list(zip(self.mhsa_tokens, self.ffn_tokens))


def token_schedule(config, plan) -> TokenSchedule:
    t = config.tokens
    drops = set() if plan is None else set(plan.drop_locations)
    schedule = TokenSchedule()
    for i in range(config.depth):
        schedule.mhsa_tokens.append(t)
        if i in drops:
            t = tokens_after_drop(t, plan.drop_rate)
        schedule.ffn_tokens.append(t)
    return schedule


# ═══════════════════════════════════════════════════════════════════════════
# VALIDATION
# ═══════════════════════════════════════════════════════════════════════════
def _check_indices(values, depth, label, problems):
    if list(values) != sorted(set(values)):
        problems.append(f"{label} must be strictly increasing, got {list(values)}")
    bad = [i for i in values if not 0 <= i < depth]
    if bad:
        problems.append(f"{label} indices {bad} outside [0, {depth})")


def validate_plan(config, plan, strict=None):
    """
    Check a plan against a config. Returns (plan, warnings); raises a
    PlanError carrying every problem found.
    """
    if plan is None:
        return plan, []
    strict = plan.strict if strict is None else strict
    problems = []
    if not plan.trainable_blocks:
        problems.append("trainable set is empty")
    _check_indices(plan.trainable_blocks, config.depth, "trainable blocks", problems)
    _check_indices(plan.drop_locations, config.depth, "drop locations", problems)
    if not 0.0 < plan.drop_rate < 1.0:
        problems.append(f"drop rate {plan.drop_rate} outside (0, 1)")
    if strict:
        early = [i for i in plan.drop_locations if i < MIN_STRICT_DROP]
        if early:
            problems.append(f"strict mode forbids drops before block {MIN_STRICT_DROP}: {early}")
    if plan.residual:
        clash = sorted(set(plan.drop_locations) & set(plan.trainable_blocks))
        if clash:
            problems.append(f"residual side blocks cannot be drop locations: {clash}")
        if config.embed_dim % (4 * config.heads) or config.embed_dim // 4 < 2:
            problems.append(
                f"side width L/4 = {config.embed_dim / 4:g} must be divisible by {config.heads} heads")

    if not problems and plan.drop_locations:
        t = config.tokens
        for i in range(config.depth):
            if i in plan.drop_locations:
                if t < 3:
                    problems.append(f"drop at block {i} sees only {t} tokens (needs >= 3)")
                    break
                t = tokens_after_drop(t, plan.drop_rate)

    if problems:
        raise PlanError(problems)

    warnings = []
    if plan.drop_locations and max(plan.trainable_blocks) < min(plan.drop_locations):
        warnings.append("all trainable blocks precede every drop location: "
                        "dropping saves no activation memory")
    terminal = tuple(range(config.depth - len(plan.trainable_blocks), config.depth))
    if plan.trainable_blocks == terminal and len(terminal) < config.depth:
        warnings.append("only the terminal blocks are trainable: expect lower accuracy")
    return plan, warnings


# ═══════════════════════════════════════════════════════════════════════════
# SCORING, SELECTION, FUSION
# ═══════════════════════════════════════════════════════════════════════════
def compute_token_importance(state, ctx=None) -> Var:
    """
    Importance of each image token: per head, softmax over the cls row of the
    pre-softmax scores (cls self-score removed), then the mean over heads.
    """
    ctx = ctx or Recorder(None)
    if state.tokens - 1 < 1:
        raise PlanError("no image tokens to score")
    per_head = softmax_rows(cls_row(state.scores, ctx), ctx, role="score_probs")
    return mean_heads(per_head, ctx)


def select_indices(scores, keep):
    """
    Split image-token rows into kept and dropped, both ascending.
    Highest scores win; ties go to the lower index.
    """
    scores = np.asarray(scores)
    order = np.argsort(-scores, kind="stable")
    kept = np.sort(order[:keep]) + 1
    dropped = np.sort(order[keep:]) + 1
    return kept, dropped


def select_and_fuse(tokens: Var, scores, rate, ctx=None) -> Var:
    """[t x L] -> [cls, kept..., fused]; with fewer than two tokens to fuse the input passes through."""
    ctx = ctx or Recorder(None)
    if not isinstance(tokens, Var):
        tokens = Var(np.asarray(tokens, dtype=np.float64))
    if not isinstance(scores, Var):
        scores = Var(np.asarray(scores, dtype=np.float64))
    t = tokens.value.shape[0]
    if t < 3:
        raise PlanError(f"token dropping needs at least 3 tokens, got {t}")
    keep = keep_count(t, rate)
    if t - 1 - keep <= 1:
        return tokens
    kept, dropped = select_indices(scores.value, keep)
    return token_select(tokens, scores, kept, dropped, ctx)


def drop_tokens(tokens: Var, state, rate, ctx) -> Var:
    """Score and drop in one step; nothing is scored when no tokens would be fused."""
    t = tokens.value.shape[0]
    if t >= 3 and fused_count(t, rate) == 0:
        return tokens
    return select_and_fuse(tokens, compute_token_importance(state, ctx), rate, ctx)


# ═══════════════════════════════════════════════════════════════════════════
# RESIDUAL SIDE BLOCK
# ═══════════════════════════════════════════════════════════════════════════
def residual_side_forward(x: Var, main_bp, side, heads, ctx) -> Var:
    """Frozen main block plus a trainable side path: f_M(x) + Up(block_s(Down(x)))."""
    from vit_model import block_forward

    x = mark_block_input(x, ctx)
    main = block_forward(x, main_bp, heads, ctx, mark_input=False)
    with ctx.side():
        h = add_bias(matmul(x, side.down_weight, ctx), side.down_bias, ctx)
        h = block_forward(h, side.block, heads, ctx, mark_input=False)
        h = add_bias(matmul(h, side.up_weight, ctx), side.up_bias, ctx)
    return residual_add(main, h, ctx)

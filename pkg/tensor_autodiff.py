"""
Dense tensor primitives with a recording tape for reverse-mode differentiation.

Every recorded node keeps only the buffers its backward rule reads:
  - ops that are linear in their input and owned by a frozen parameter keep nothing
  - non-linear ops keep what their backward rule reads (Q, K, V, probabilities, GELU input, ...)
  - ops owned by a trainable parameter also keep their input activation for the weight gradient

Values are float64 numpy arrays. Byte accounting uses a 4-byte element width
so that tape totals line up with the analytical memory model.
"""

from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.special import erf

from errors import (
    ContractError,
    DeterminismError,
    DimensionError,
    NumericError,
    RetentionViolation,
)

# =====================================================
# CONSTANTS
# =====================================================
ACCOUNT_WIDTH = 4  # bytes per element in every memory figure
LN_EPS = 1e-6
SQRT_2 = np.sqrt(2.0)
INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class LinearityClass(str, Enum):
    LINEAR = "LinearInInput"
    NON_LINEAR = "NonLinearInInput"


class OpKind(str, Enum):
    BLOCK_INPUT = "block_input"
    MATMUL = "matmul"
    BIAS_ADD = "bias_add"
    RESIDUAL_ADD = "residual_add"
    SCALE = "scale"
    SPLIT_HEADS = "split_heads"
    MERGE_HEADS = "merge_heads"
    ATTN_SCORES = "attn_scores"
    SOFTMAX = "softmax"
    ATTN_APPLY = "attn_apply"
    GELU = "gelu"
    LAYERNORM = "layernorm"
    TAKE_ROW = "take_row"
    CLS_ROW = "cls_row"
    MEAN_HEADS = "mean_heads"
    TOKEN_SELECT = "token_select"


LINEARITY = {
    OpKind.BLOCK_INPUT: LinearityClass.LINEAR,
    OpKind.MATMUL: LinearityClass.LINEAR,
    OpKind.BIAS_ADD: LinearityClass.LINEAR,
    OpKind.RESIDUAL_ADD: LinearityClass.LINEAR,
    OpKind.SCALE: LinearityClass.LINEAR,
    OpKind.SPLIT_HEADS: LinearityClass.LINEAR,
    OpKind.MERGE_HEADS: LinearityClass.LINEAR,
    OpKind.TAKE_ROW: LinearityClass.LINEAR,
    OpKind.CLS_ROW: LinearityClass.LINEAR,
    OpKind.MEAN_HEADS: LinearityClass.LINEAR,
    OpKind.ATTN_SCORES: LinearityClass.NON_LINEAR,
    OpKind.SOFTMAX: LinearityClass.NON_LINEAR,
    OpKind.ATTN_APPLY: LinearityClass.NON_LINEAR,
    OpKind.GELU: LinearityClass.NON_LINEAR,
    OpKind.LAYERNORM: LinearityClass.NON_LINEAR,
    # Linear in the tokens for fixed indices and scores. The dropped rows are
    # still kept, since the score gradient reads them.
    OpKind.TOKEN_SELECT: LinearityClass.LINEAR,
}


# =====================================================
# VALUES, PARAMETERS, TAPE
# =====================================================
@dataclass
class Var:
    """A value plus the id of the tape node that produced it (None = constant)."""

    value: np.ndarray
    node: int | None = None

    @property
    def shape(self):
        return self.value.shape


@dataclass(frozen=True)
class Param:
    name: str
    value: np.ndarray
    trainable: bool


@dataclass
class TapeNode:
    id: int
    op_kind: OpKind
    linearity: LinearityClass
    parents: tuple
    retained: dict = field(default_factory=dict)
    block_index: int | None = None
    trainable: bool = False
    scope: str = "main"
    param: str | None = None
    aux_param: str | None = None
    meta: dict = field(default_factory=dict)
    out_shape: tuple = ()


class Tape:
    """Append-only list of recorded nodes with a running retained-byte total."""

    def __init__(self, element_width=ACCOUNT_WIDTH):
        self.nodes: list[TapeNode] = []
        self.element_width = element_width
        self.retained_bytes = 0

    def __len__(self):
        return len(self.nodes)

    def append(self, node: TapeNode):
        for p in node.parents:
            if p is not None and p >= node.id:
                raise ContractError(f"parent {p} does not precede node {node.id}")
        if (node.linearity == LinearityClass.LINEAR and not node.trainable
                and "input" in node.retained):
            raise ContractError(f"frozen linear node {node.id} must not keep its input")
        self.nodes.append(node)
        self.retained_bytes += sum(self._nbytes(a) for a in node.retained.values())

    def _nbytes(self, array):
        return int(np.asarray(array).size) * self.element_width

    def fetch(self, node: TapeNode, role: str) -> np.ndarray:
        if role not in node.retained:
            raise RetentionViolation(node.id, role, node.op_kind.value)
        return node.retained[role]

    # -- mutation hooks used by audits and tests --------------------------
    def drop_buffer(self, node_id: int, role: str):
        node = self.nodes[node_id]
        array = node.retained.pop(role)
        self.retained_bytes -= self._nbytes(array)

    def retain_extra(self, node_id: int, role: str, array: np.ndarray):
        node = self.nodes[node_id]
        if role in node.retained:
            self.retained_bytes -= self._nbytes(node.retained[role])
        node.retained[role] = np.asarray(array)
        self.retained_bytes += self._nbytes(array)

    def bytes_by_block_role(self):
        """{(block_index, role): bytes}; side-path roles carry a 'side_' prefix."""
        totals = {}
        for node in self.nodes:
            for role, array in node.retained.items():
                key_role = role if node.scope == "main" else f"{node.scope}_{role}"
                key = (node.block_index, key_role)
                totals[key] = totals.get(key, 0) + self._nbytes(array)
        return totals

    def roles_for_block(self, block_index, scope="main"):
        return {
            role
            for node in self.nodes
            if node.block_index == block_index and node.scope == scope
            for role in node.retained
        }


class Recorder:
    """
    Recording context handed to every op.

    With no tape (or inside a non-recording block) ops only compute values.
    """

    def __init__(self, tape: Tape | None = None):
        self.tape = tape
        self.block_index = None
        self.scope = "main"
        self._enabled = True

    @property
    def recording(self):
        return self.tape is not None and self._enabled

    @contextmanager
    def block(self, index, record=True):
        prev = (self.block_index, self._enabled)
        self.block_index = index
        self._enabled = record
        try:
            yield self
        finally:
            self.block_index, self._enabled = prev

    @contextmanager
    def side(self, name="side"):
        prev = self.scope
        self.scope = name
        try:
            yield self
        finally:
            self.scope = prev

    def record(self, kind, parents, value, retained=None, param=None,
               aux_param=None, meta=None):
        check_finite(value, kind.value)
        if not self.recording:
            return Var(value, None)
        node = TapeNode(
            id=len(self.tape.nodes),
            op_kind=kind,
            linearity=LINEARITY[kind],
            parents=tuple(p.node if isinstance(p, Var) else None for p in parents),
            retained=dict(retained or {}),
            block_index=self.block_index,
            trainable=bool(param is not None and param.trainable),
            scope=self.scope,
            param=param.name if param is not None else None,
            aux_param=aux_param.name if aux_param is not None else None,
            meta=dict(meta or {}),
            out_shape=tuple(value.shape),
        )
        self.tape.append(node)
        return Var(value, node.id)


def as_tensor(x) -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    return arr


def check_finite(value, op_name):
    if not np.all(np.isfinite(value)):
        raise NumericError(f"{op_name} produced non-finite values")


def _val(x):
    return x.value if isinstance(x, Var) else as_tensor(x)


# =====================================================
# PRIMITIVES
# =====================================================
def mark_block_input(x: Var, ctx: Recorder) -> Var:
    return ctx.record(OpKind.BLOCK_INPUT, [x], x.value)


def matmul(a: Var, w: Param, ctx: Recorder) -> Var:
    """a @ w for a parameter w. Linear in a; a trainable w keeps a for dW."""
    av = _val(a)
    if av.ndim != 2 or w.value.ndim != 2 or av.shape[1] != w.value.shape[0]:
        raise DimensionError(f"matmul shapes {av.shape} and {w.value.shape} do not align")
    retained = {"input": av} if w.trainable else {}
    return ctx.record(OpKind.MATMUL, [a], av @ w.value, retained, param=w)


def add_bias(x: Var, bias: Param, ctx: Recorder) -> Var:
    xv = _val(x)
    if bias.value.shape != xv.shape[-1:]:
        raise DimensionError(f"bias shape {bias.value.shape} does not match {xv.shape}")
    return ctx.record(OpKind.BIAS_ADD, [x], xv + bias.value, param=bias)


def residual_add(a: Var, b: Var, ctx: Recorder) -> Var:
    av, bv = _val(a), _val(b)
    if av.shape != bv.shape:
        raise DimensionError(f"residual shapes {av.shape} and {bv.shape} differ")
    return ctx.record(OpKind.RESIDUAL_ADD, [a, b], av + bv)


def scale(x: Var, c: float, ctx: Recorder) -> Var:
    return ctx.record(OpKind.SCALE, [x], _val(x) * c, meta={"c": float(c)})


def split_heads(qkv: Var, part: int, heads: int, ctx: Recorder) -> Var:
    """Slice Q (0), K (1) or V (2) out of a fused [t x 3L] projection as [H x t x d]."""
    v = _val(qkv)
    t, width3 = v.shape
    if width3 % (3 * heads):
        raise DimensionError(f"fused width {width3} not divisible by 3*{heads}")
    width = width3 // 3
    d = width // heads
    out = v[:, part * width:(part + 1) * width].reshape(t, heads, d).transpose(1, 0, 2)
    return ctx.record(OpKind.SPLIT_HEADS, [qkv], np.ascontiguousarray(out),
                      meta={"part": part, "in_shape": v.shape})


def merge_heads(x: Var, ctx: Recorder) -> Var:
    v = _val(x)
    h, t, d = v.shape
    out = np.ascontiguousarray(v.transpose(1, 0, 2).reshape(t, h * d))
    return ctx.record(OpKind.MERGE_HEADS, [x], out, meta={"in_shape": v.shape})


def attention_scores(q: Var, k: Var, ctx: Recorder) -> Var:
    """Per-head Q K^T / sqrt(d)."""
    qv, kv = _val(q), _val(k)
    if qv.shape != kv.shape or qv.ndim != 3:
        raise DimensionError(f"attention operands {qv.shape} and {kv.shape} differ")
    s = 1.0 / np.sqrt(qv.shape[-1])
    out = np.matmul(qv, kv.transpose(0, 2, 1)) * s
    return ctx.record(OpKind.ATTN_SCORES, [q, k], out, {"Q": qv, "K": kv}, meta={"s": s})


def softmax_rows(x: Var, ctx: Recorder, role="probs") -> Var:
    """Row softmax over the last axis; the tape keeps the output probabilities."""
    v = _val(x)
    if v.shape[-1] < 1:
        raise DimensionError("softmax over an empty row")
    z = v - v.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)
    return ctx.record(OpKind.SOFTMAX, [x], out, {role: out}, meta={"role": role})


def attention_apply(probs: Var, v: Var, ctx: Recorder) -> Var:
    """probs @ V per head. V is kept here; probs are read back from the softmax node."""
    pv, vv = _val(probs), _val(v)
    if pv.ndim != 3 or pv.shape[2] != vv.shape[1]:
        raise DimensionError(f"attention apply shapes {pv.shape} and {vv.shape} disagree")
    return ctx.record(OpKind.ATTN_APPLY, [probs, v], np.matmul(pv, vv), {"V": vv})


def gelu(x: Var, ctx: Recorder) -> Var:
    """Exact-erf GELU, x * Phi(x)."""
    v = _val(x)
    out = 0.5 * v * (1.0 + erf(v / SQRT_2))
    return ctx.record(OpKind.GELU, [x], out, {"gelu_input": v})


def layernorm(x: Var, gamma: Param, beta: Param, ctx: Recorder) -> Var:
    """
    Per-row normalization then affine. The tape keeps (mean, inv-std) per row and
    the normalized input; the latter also serves as the gamma-gradient input.
    """
    v = _val(x)
    if v.ndim != 2 or v.shape[1] < 2:
        raise DimensionError(f"layernorm needs [t x L] with L >= 2, got {v.shape}")
    if gamma.value.shape != (v.shape[1],) or beta.value.shape != (v.shape[1],):
        raise DimensionError("layernorm affine shape mismatch")
    mean = v.mean(axis=1, keepdims=True)
    var = ((v - mean) ** 2).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (v - mean) * inv_std
    out = xhat * gamma.value + beta.value
    stats = np.concatenate([mean, inv_std], axis=1)
    return ctx.record(OpKind.LAYERNORM, [x], out, {"ln_stats": stats, "ln_xhat": xhat},
                      param=gamma, aux_param=beta)


def take_row(x: Var, row: int, ctx: Recorder) -> Var:
    v = _val(x)
    return ctx.record(OpKind.TAKE_ROW, [x], v[row:row + 1].copy(),
                      meta={"row": row, "in_shape": v.shape})


def cls_row(scores: Var, ctx: Recorder) -> Var:
    """Row 0 of every head's score map with the self-score dropped: [H x (t-1)]."""
    v = _val(scores)
    return ctx.record(OpKind.CLS_ROW, [scores], v[:, 0, 1:].copy(), meta={"in_shape": v.shape})


def mean_heads(x: Var, ctx: Recorder) -> Var:
    v = _val(x)
    return ctx.record(OpKind.MEAN_HEADS, [x], v.mean(axis=0), meta={"heads": v.shape[0]})


def fusion_weights(s_drop):
    """Normalized fusion weights; all-zero scores give the plain mean."""
    total = s_drop.sum()
    if total > 0:
        return s_drop / total
    return np.full(s_drop.shape, 1.0 / s_drop.size)


def token_select(tokens: Var, scores: Var, kept, dropped, ctx: Recorder) -> Var:
    """
    Output rows [cls, kept..., fused] where fused is the score-weighted average of
    the dropped rows. kept/dropped are ascending row indices (>= 1); scores index
    image tokens, so row i uses scores[i - 1]. Dropped scores summing to zero
    fuse with uniform weights.
    """
    x = _val(tokens)
    s = _val(scores)
    kept = np.asarray(kept, dtype=np.int64)
    dropped = np.asarray(dropped, dtype=np.int64)
    if s.shape != (x.shape[0] - 1,):
        raise DimensionError(f"{s.shape[0]} scores for {x.shape[0] - 1} image tokens")
    s_drop = s[dropped - 1]
    weights = fusion_weights(s_drop)
    x_drop = x[dropped]
    fused = weights @ x_drop
    out = np.vstack([x[0:1], x[kept], fused[None, :]])
    select_map = np.concatenate([kept.astype(np.float64), s_drop])
    return ctx.record(OpKind.TOKEN_SELECT, [tokens, scores], out,
                      {"token_select": select_map, "fuse_input": x_drop},
                      meta={"t": x.shape[0], "kept": len(kept)})


# =====================================================
# BACKWARD RULES
# =====================================================
# rule(tape, node, g, params) -> (parent grads in parent order, {param name: grad})
def _bw_identity(tape, node, g, params):
    return [g], {}


def _bw_matmul(tape, node, g, params):
    grads = {}
    if node.trainable:
        grads[node.param] = tape.fetch(node, "input").T @ g
    return [g @ params[node.param].T], grads


def _bw_bias(tape, node, g, params):
    grads = {node.param: g.sum(axis=0)} if node.trainable else {}
    return [g], grads


def _bw_residual(tape, node, g, params):
    return [g, g], {}


def _bw_scale(tape, node, g, params):
    return [g * node.meta["c"]], {}


def _bw_split(tape, node, g, params):
    t, width3 = node.meta["in_shape"]
    width = width3 // 3
    part = node.meta["part"]
    dx = np.zeros((t, width3))
    dx[:, part * width:(part + 1) * width] = g.transpose(1, 0, 2).reshape(t, width)
    return [dx], {}


def _bw_merge(tape, node, g, params):
    h, t, d = node.meta["in_shape"]
    return [g.reshape(t, h, d).transpose(1, 0, 2)], {}


def _bw_scores(tape, node, g, params):
    q = tape.fetch(node, "Q")
    k = tape.fetch(node, "K")
    s = node.meta["s"]
    dq = np.matmul(g, k) * s
    dk = np.matmul(g.transpose(0, 2, 1), q) * s
    return [dq, dk], {}


def _bw_softmax(tape, node, g, params):
    y = tape.fetch(node, node.meta["role"])
    return [y * (g - (g * y).sum(axis=-1, keepdims=True))], {}


def _bw_apply(tape, node, g, params):
    v = tape.fetch(node, "V")
    softmax_node = tape.nodes[node.parents[0]]
    p = tape.fetch(softmax_node, softmax_node.meta["role"])
    dp = np.matmul(g, v.transpose(0, 2, 1))
    dv = np.matmul(p.transpose(0, 2, 1), g)
    return [dp, dv], {}


def _bw_gelu(tape, node, g, params):
    x = tape.fetch(node, "gelu_input")
    cdf = 0.5 * (1.0 + erf(x / SQRT_2))
    pdf = INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return [g * (cdf + x * pdf)], {}


def _bw_layernorm(tape, node, g, params):
    stats = tape.fetch(node, "ln_stats")
    xhat = tape.fetch(node, "ln_xhat")
    inv_std = stats[:, 1:2]
    grads = {}
    if node.trainable:
        grads[node.param] = (g * xhat).sum(axis=0)
        grads[node.aux_param] = g.sum(axis=0)
    dxhat = g * params[node.param]
    dx = inv_std * (dxhat - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
    return [dx], grads


def _bw_take_row(tape, node, g, params):
    dx = np.zeros(node.meta["in_shape"])
    row = node.meta["row"]
    dx[row:row + 1] = g
    return [dx], {}


def _bw_cls_row(tape, node, g, params):
    dx = np.zeros(node.meta["in_shape"])
    dx[:, 0, 1:] = g
    return [dx], {}


def _bw_mean_heads(tape, node, g, params):
    h = node.meta["heads"]
    return [np.broadcast_to(g / h, (h,) + g.shape).copy()], {}


def _bw_token_select(tape, node, g, params):
    select_map = tape.fetch(node, "token_select")
    x_drop = tape.fetch(node, "fuse_input")
    t = node.meta["t"]
    n_kept = node.meta["kept"]
    kept = select_map[:n_kept].astype(np.int64)
    s_drop = select_map[n_kept:]
    mask = np.ones(t, dtype=bool)
    mask[0] = False
    mask[kept] = False
    dropped = np.nonzero(mask)[0]
    weights = fusion_weights(s_drop)
    g_fused = g[-1]
    dx = np.zeros((t, x_drop.shape[1]))
    dx[0] = g[0]
    dx[kept] = g[1:n_kept + 1]
    dx[dropped] += np.outer(weights, g_fused)
    ds = np.zeros(t - 1)
    total = s_drop.sum()
    if total > 0:
        # uniform fallback weights do not depend on the scores
        ds[dropped - 1] = (x_drop - weights @ x_drop) @ g_fused / total
    return [dx, ds], {}


BACKWARD_RULES = {
    OpKind.BLOCK_INPUT: _bw_identity,
    OpKind.MATMUL: _bw_matmul,
    OpKind.BIAS_ADD: _bw_bias,
    OpKind.RESIDUAL_ADD: _bw_residual,
    OpKind.SCALE: _bw_scale,
    OpKind.SPLIT_HEADS: _bw_split,
    OpKind.MERGE_HEADS: _bw_merge,
    OpKind.ATTN_SCORES: _bw_scores,
    OpKind.SOFTMAX: _bw_softmax,
    OpKind.ATTN_APPLY: _bw_apply,
    OpKind.GELU: _bw_gelu,
    OpKind.LAYERNORM: _bw_layernorm,
    OpKind.TAKE_ROW: _bw_take_row,
    OpKind.CLS_ROW: _bw_cls_row,
    OpKind.MEAN_HEADS: _bw_mean_heads,
    OpKind.TOKEN_SELECT: _bw_token_select,
}


@dataclass
class GradTable:
    """Parameter gradients by name and block-input gradients by block index."""

    params: dict
    block_inputs: dict

    def __contains__(self, name):
        return name in self.params


def backward(tape: Tape, seed, params=None, rules=None) -> GradTable:
    """
    Reverse sweep over the tape from its last node.

    params maps parameter name -> current value; linear rules read weights
    from it instead of from the tape. rules overrides entries of BACKWARD_RULES.
    """
    if not tape.nodes:
        raise ContractError("backward on an empty tape")
    rules = {**BACKWARD_RULES, **(rules or {})}
    params = params or {}
    seed = as_tensor(seed)
    last = tape.nodes[-1]
    if seed.shape != last.out_shape:
        raise DimensionError(f"seed shape {seed.shape} != output shape {last.out_shape}")

    grads = [None] * len(tape.nodes)
    grads[-1] = seed
    param_grads = {}
    block_inputs = {}

    for node in reversed(tape.nodes):
        g = grads[node.id]
        if g is None:
            continue
        if node.param is not None and node.param not in params:
            raise ContractError(f"parameter '{node.param}' not supplied to backward")
        parent_grads, pgrads = rules[node.op_kind](tape, node, g, params)
        for name, pg in pgrads.items():
            param_grads[name] = param_grads[name] + pg if name in param_grads else pg
        for parent, pg in zip(node.parents, parent_grads):
            if parent is None:
                continue
            grads[parent] = pg if grads[parent] is None else grads[parent] + pg
        if node.op_kind == OpKind.BLOCK_INPUT and node.scope == "main":
            block_inputs[node.block_index] = g
        grads[node.id] = None

    return GradTable(params=param_grads, block_inputs=block_inputs)


# =====================================================
# FINITE-DIFFERENCE ORACLE
# =====================================================
def finite_diff_check(evaluate, params, grads, step=1e-5, frozen=()):
    """
    Compare autodiff gradients against central differences.

    evaluate: zero-arg closure returning the scalar loss for the current
        contents of `params` (name -> array, perturbed in place).
    grads: name -> autodiff gradient, one entry per trainable parameter.
    Returns max over parameter tensors of ||g_ad - g_fd|| / max(||g_fd||, 1e-8).

    Norm-wise per tensor, not per scalar: central differences of near-zero
    scalar gradients are dominated by round-off (about eps * |loss| / step).
    """
    if not 1e-7 <= step <= 1e-3:
        raise ContractError(f"finite-difference step {step} outside [1e-7, 1e-3]")
    leaked = sorted(set(grads) & set(frozen))
    if leaked:
        raise ContractError(f"gradient entries for frozen parameters: {leaked}")

    base = evaluate()
    if evaluate() != base:
        raise DeterminismError("closure returned different losses for identical inputs")

    worst = 0.0
    for name in sorted(grads):
        arr = params[name]
        fd = np.zeros_like(arr)
        flat = arr.reshape(-1)
        fd_flat = fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = evaluate()
            flat[i] = orig - step
            down = evaluate()
            flat[i] = orig
            fd_flat[i] = (up - down) / (2.0 * step)
        err = np.linalg.norm(grads[name] - fd) / max(np.linalg.norm(fd), 1e-8)
        worst = max(worst, float(err))
    return worst

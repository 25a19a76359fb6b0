"""
Vision Transformer built on tensor_autodiff.

Patch embedding, cls token and positional embedding are plain numpy and never
recorded. Encoder blocks are pre-LN: x + MHSA(LN1(x)), optional token drop,
then y + FFN(LN2(y)). The head reads the cls row through a final LayerNorm.

Checkpoint container (little endian):
    b"BSRCKPT1" | u32 version | u32 count
    count x ( u32 name_len | name utf-8 | u32 ndim | ndim x u64 shape | u64 offset )
    payload: float64 values, offsets relative to the payload start
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

import bsr_policy
from errors import CheckpointError, DimensionError, PlanError
from tensor_autodiff import (
    Param,
    Recorder,
    Var,
    add_bias,
    as_tensor,
    attention_apply,
    attention_scores,
    gelu,
    layernorm,
    mark_block_input,
    matmul,
    merge_heads,
    residual_add,
    softmax_rows,
    split_heads,
    take_row,
)

# ═══════════════════════════════════════════════════════════════════════════
# CONFIG
# ═══════════════════════════════════════════════════════════════════════════
VIT_PRESETS = {
    "deit-s": dict(image_size=224, patch_size=16, channels=3, embed_dim=384,
                   heads=6, ffn_mult=4, depth=12, num_classes=10),
    "vit-b": dict(image_size=224, patch_size=16, channels=3, embed_dim=768,
                  heads=12, ffn_mult=4, depth=12, num_classes=100),
    "toy": dict(image_size=16, patch_size=4, channels=3, embed_dim=32,
                heads=2, ffn_mult=4, depth=4, num_classes=4),
    "toy-gradcheck": dict(image_size=8, patch_size=4, channels=2, embed_dim=8,
                          heads=2, ffn_mult=2, depth=2, num_classes=3),
}

INIT_STD = 0.02
CHECKPOINT_MAGIC = b"BSRCKPT1"
CHECKPOINT_VERSION = 1

BLOCK_KEYS = (
    "ln1.gamma", "ln1.beta",
    "qkv.weight", "qkv.bias",
    "proj.weight", "proj.bias",
    "ln2.gamma", "ln2.beta",
    "fc1.weight", "fc1.bias",
    "fc2.weight", "fc2.bias",
)
EMBED_KEYS = ("patch_embed.weight", "patch_embed.bias", "cls_token", "pos_embed")
HEAD_KEYS = ("norm.gamma", "norm.beta", "head.weight", "head.bias")


@dataclass(frozen=True)
class ViTConfig:
    image_size: int
    patch_size: int
    channels: int
    embed_dim: int
    heads: int
    ffn_mult: int
    depth: int
    num_classes: int

    def __post_init__(self):
        problems = []
        for name in ("image_size", "patch_size", "channels", "embed_dim",
                     "heads", "ffn_mult", "depth", "num_classes"):
            if int(getattr(self, name)) < 1:
                problems.append(f"{name} must be positive")
        if problems:
            raise DimensionError("; ".join(problems))
        if self.image_size % self.patch_size:
            raise DimensionError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise DimensionError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")

    @property
    def num_patches(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def tokens(self):
        return self.num_patches + 1

    @property
    def head_dim(self):
        return self.embed_dim // self.heads

    @property
    def hidden_dim(self):
        return self.embed_dim * self.ffn_mult

    @property
    def patch_dim(self):
        return self.patch_size * self.patch_size * self.channels

    @property
    def side_dim(self):
        return self.embed_dim // 4


def parse_key_values(text, source="<text>"):
    """Parse `key = value` lines; '#' starts a comment. Returns an ordered dict."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise PlanError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key.lower()] = value
    return values


def load_config(name_or_path) -> ViTConfig:
    """Resolve a preset name or a key=value config file."""
    key = str(name_or_path).lower()
    if key in VIT_PRESETS:
        return ViTConfig(**VIT_PRESETS[key])
    path = Path(name_or_path)
    if not path.exists():
        raise PlanError(f"unknown config '{name_or_path}' (presets: {', '.join(VIT_PRESETS)})")
    raw = parse_key_values(path.read_text(encoding="utf-8"), str(path))
    base = raw.pop("base", "toy").lower()
    if base not in VIT_PRESETS:
        raise PlanError(f"{path}: unknown base '{base}' (presets: {', '.join(VIT_PRESETS)})")
    fields = dict(VIT_PRESETS[base])
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise PlanError(f"{path}: unknown config keys {unknown}")
    for k, v in raw.items():
        try:
            fields[k] = int(v)
        except ValueError:
            raise PlanError(f"{path}: '{k}' must be an integer, got {v!r}") from None
    return ViTConfig(**fields)


# ═══════════════════════════════════════════════════════════════════════════
# PARAMETERS
# ═══════════════════════════════════════════════════════════════════════════
@dataclass(frozen=True)
class BlockParams:
    """One encoder block's parameters; the trainable flag covers all of them."""

    prefix: str
    params: dict
    trainable: bool

    def __getitem__(self, key) -> Param:
        return self.params[key]


@dataclass(frozen=True)
class SideParams:
    prefix: str
    down_weight: Param
    down_bias: Param
    block: BlockParams
    up_weight: Param
    up_bias: Param


class ViTParams:
    """Name -> array store plus the set of names currently trainable."""

    def __init__(self, values=None, trainable=()):
        self.values = dict(values or {})
        self.trainable = set(trainable)

    def __contains__(self, name):
        return name in self.values

    def __getitem__(self, name):
        return self.values[name]

    def names(self):
        return list(self.values)

    def param(self, name) -> Param:
        return Param(name, self.values[name], name in self.trainable)

    def block(self, index) -> BlockParams:
        return self._block(f"blocks.{index}")

    def _block(self, prefix):
        params = {k: self.param(f"{prefix}.{k}") for k in BLOCK_KEYS}
        flags = {p.trainable for p in params.values()}
        if len(flags) != 1:
            raise PlanError(f"{prefix} is partially trainable")
        return BlockParams(prefix, params, flags.pop())

    def side(self, index) -> SideParams:
        prefix = f"side.{index}"
        if f"{prefix}.down.weight" not in self.values:
            raise PlanError(f"no side block at index {index}")
        return SideParams(
            prefix,
            self.param(f"{prefix}.down.weight"),
            self.param(f"{prefix}.down.bias"),
            self._block(f"{prefix}.block"),
            self.param(f"{prefix}.up.weight"),
            self.param(f"{prefix}.up.bias"),
        )

    def has_side(self, index):
        return f"side.{index}.down.weight" in self.values

    def trainable_names(self):
        return [n for n in self.values if n in self.trainable]

    def frozen_names(self):
        return [n for n in self.values if n not in self.trainable]

    def count(self, trainable_only=False):
        names = self.trainable_names() if trainable_only else self.names()
        return int(sum(self.values[n].size for n in names))

    def copy(self):
        return ViTParams({k: v.copy() for k, v in self.values.items()}, self.trainable)

    def set_trainable(self, plan):
        """
        Apply a plan's trainable flags. plan=None is head-only (FT-Last).

        Patch, positional and cls parameters are always frozen; the final
        LayerNorm follows the head.
        """
        names = set(HEAD_KEYS)
        if plan is not None:
            for i in plan.trainable_blocks:
                prefix = f"side.{i}." if plan.residual else f"blocks.{i}."
                if plan.residual and not self.has_side(i):
                    raise PlanError(f"residual plan needs a side block at {i}")
                names.update(n for n in self.values if n.startswith(prefix))
        self.trainable = names
        return self


def truncated_normal(rng, shape, std):
    """Normal(0, std) resampled until every draw lies within two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def _block_values(prefix, width, hidden, rng, std, jitter):
    def w(*shape):
        return truncated_normal(rng, shape, std)

    def near(base, n):
        return base + (jitter * rng.standard_normal(n) if jitter else 0.0)

    return {
        f"{prefix}.ln1.gamma": near(np.ones(width), width),
        f"{prefix}.ln1.beta": near(np.zeros(width), width),
        f"{prefix}.qkv.weight": w(width, 3 * width),
        f"{prefix}.qkv.bias": near(np.zeros(3 * width), 3 * width),
        f"{prefix}.proj.weight": w(width, width),
        f"{prefix}.proj.bias": near(np.zeros(width), width),
        f"{prefix}.ln2.gamma": near(np.ones(width), width),
        f"{prefix}.ln2.beta": near(np.zeros(width), width),
        f"{prefix}.fc1.weight": w(width, hidden),
        f"{prefix}.fc1.bias": near(np.zeros(hidden), hidden),
        f"{prefix}.fc2.weight": w(hidden, width),
        f"{prefix}.fc2.bias": near(np.zeros(width), width),
    }


def init_params(config: ViTConfig, seed=0, std=INIT_STD, jitter=0.0, side_blocks=()):
    """
    Fresh parameters: truncated normal weights, zero biases, unit LayerNorm.

    jitter > 0 perturbs biases, LayerNorm affines and side up-projections so
    that gradient checks see non-degenerate values.
    """
    rng = np.random.default_rng(seed)
    L, P = config.embed_dim, config.patch_size
    values = {
        "patch_embed.weight": truncated_normal(rng, (config.patch_dim, L), std),
        "patch_embed.bias": np.zeros(L),
        "cls_token": truncated_normal(rng, (L,), std),
        "pos_embed": truncated_normal(rng, (config.tokens, L), std),
    }
    for i in range(config.depth):
        values.update(_block_values(f"blocks.{i}", L, config.hidden_dim, rng, std, jitter))
    values["norm.gamma"] = np.ones(L) + (jitter * rng.standard_normal(L) if jitter else 0.0)
    values["norm.beta"] = np.zeros(L) + (jitter * rng.standard_normal(L) if jitter else 0.0)
    values["head.weight"] = truncated_normal(rng, (L, config.num_classes), std)
    values["head.bias"] = np.zeros(config.num_classes)
    params = ViTParams(values)
    if side_blocks:
        add_side_blocks(params, config, side_blocks, seed=seed + 1, std=std, jitter=jitter)
    return params


def add_side_blocks(params: ViTParams, config: ViTConfig, indices, seed=0,
                    std=INIT_STD, jitter=0.0):
    """Attach width-L/4 side blocks. Up-projections start at zero unless jittered."""
    rng = np.random.default_rng(seed)
    L, Ls = config.embed_dim, config.side_dim
    if Ls < 2 or Ls % config.heads:
        raise DimensionError(f"side width {Ls} incompatible with {config.heads} heads")
    for i in indices:
        prefix = f"side.{i}"
        params.values[f"{prefix}.down.weight"] = truncated_normal(rng, (L, Ls), std)
        params.values[f"{prefix}.down.bias"] = np.zeros(Ls)
        params.values.update(
            _block_values(f"{prefix}.block", Ls, Ls * config.ffn_mult, rng, std, jitter))
        up = truncated_normal(rng, (Ls, L), std) if jitter else np.zeros((Ls, L))
        params.values[f"{prefix}.up.weight"] = up
        params.values[f"{prefix}.up.bias"] = np.zeros(L)
    return params


def reset_head(params: ViTParams, num_classes, seed=0, std=INIT_STD):
    """Replace the classification head for a new task, keeping everything else."""
    rng = np.random.default_rng(seed)
    L = params["head.weight"].shape[0]
    params.values["head.weight"] = truncated_normal(rng, (L, num_classes), std)
    params.values["head.bias"] = np.zeros(num_classes)
    return params


# ═══════════════════════════════════════════════════════════════════════════
# FORWARD
# ═══════════════════════════════════════════════════════════════════════════
@dataclass
class AttentionState:
    """Per-head Q, K, V [H x t x d], probabilities [H x t x t] and the pre-softmax score Var."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    probs: np.ndarray
    scores: Var

    @property
    def tokens(self):
        return self.q.shape[1]

    @property
    def cls_scores(self):
        """q_cls K^T / sqrt(d) over image tokens, [H x (t-1)]."""
        return self.scores.value[:, 0, 1:]


def patchify(image, patch_size):
    """[C x S x S] -> [N x C*P*P]; patches row-major, column c*P*P + py*P + px."""
    c, s, _ = image.shape
    g = s // patch_size
    blocks = image.reshape(c, g, patch_size, g, patch_size)
    return blocks.transpose(1, 3, 0, 2, 4).reshape(g * g, c * patch_size * patch_size)


def patch_embed(image, params: ViTParams, config: ViTConfig):
    """Image -> [(N+1) x L] tokens with cls prepended and positions added."""
    image = as_tensor(image)
    expected = (config.channels, config.image_size, config.image_size)
    if image.shape != expected:
        raise DimensionError(f"image shape {image.shape} != {expected}")
    patches = patchify(image, config.patch_size)
    tokens = patches @ params["patch_embed.weight"] + params["patch_embed.bias"]
    tokens = np.vstack([params["cls_token"][None, :], tokens])
    return tokens + params["pos_embed"]


def mhsa_forward(x: Var, bp: BlockParams, heads: int, ctx: Recorder):
    t = x.value.shape[0]
    if t < 2:
        raise PlanError(f"attention over {t} token(s); need cls plus at least one image token")
    qkv = add_bias(matmul(x, bp["qkv.weight"], ctx), bp["qkv.bias"], ctx)
    q = split_heads(qkv, 0, heads, ctx)
    k = split_heads(qkv, 1, heads, ctx)
    v = split_heads(qkv, 2, heads, ctx)
    scores = attention_scores(q, k, ctx)
    probs = softmax_rows(scores, ctx)
    out = merge_heads(attention_apply(probs, v, ctx), ctx)
    out = add_bias(matmul(out, bp["proj.weight"], ctx), bp["proj.bias"], ctx)
    state = AttentionState(q.value, k.value, v.value, probs.value, scores)
    return out, state


def ffn_forward(x: Var, bp: BlockParams, ctx: Recorder):
    h = add_bias(matmul(x, bp["fc1.weight"], ctx), bp["fc1.bias"], ctx)
    h = gelu(h, ctx)
    return add_bias(matmul(h, bp["fc2.weight"], ctx), bp["fc2.bias"], ctx)


def block_forward(x: Var, bp: BlockParams, heads: int, ctx: Recorder,
                  drop_rate=None, mark_input=True):
    """One pre-LN encoder block; drop_rate reduces tokens between MHSA and FFN."""
    if mark_input:
        x = mark_block_input(x, ctx)
    attn, state = mhsa_forward(layernorm(x, bp["ln1.gamma"], bp["ln1.beta"], ctx), bp, heads, ctx)
    y = residual_add(x, attn, ctx)
    if drop_rate is not None:
        y = bsr_policy.drop_tokens(y, state, drop_rate, ctx)
    f = ffn_forward(layernorm(y, bp["ln2.gamma"], bp["ln2.beta"], ctx), bp, ctx)
    return residual_add(y, f, ctx)


def forward_tokens(tokens, params: ViTParams, config: ViTConfig, plan=None, ctx=None):
    """
    Encoder and head over embedded tokens. Returns logits as a [1 x C] Var.

    Blocks below the plan's gradient horizon run unrecorded; plan=None trains
    the head only, so just the head is recorded.
    """
    ctx = ctx or Recorder(None)
    x = Var(as_tensor(tokens))
    horizon = config.depth if plan is None else plan.grad_horizon
    drops = set() if plan is None else set(plan.drop_locations)
    sides = set(plan.trainable_blocks) if plan is not None and plan.residual else set()
    for i in range(config.depth):
        with ctx.block(i, record=i >= horizon):
            bp = params.block(i)
            if i in sides:
                x = bsr_policy.residual_side_forward(x, bp, params.side(i), config.heads, ctx)
            else:
                rate = plan.drop_rate if i in drops else None
                x = block_forward(x, bp, config.heads, ctx, drop_rate=rate)
    with ctx.block(config.depth):
        cls = take_row(x, 0, ctx)
        h = layernorm(cls, params.param("norm.gamma"), params.param("norm.beta"), ctx)
        logits = add_bias(matmul(h, params.param("head.weight"), ctx),
                          params.param("head.bias"), ctx)
    return logits


def vit_forward(image, params: ViTParams, config: ViTConfig, plan=None, ctx=None):
    return forward_tokens(patch_embed(image, params, config), params, config, plan, ctx)


# ═══════════════════════════════════════════════════════════════════════════
# CHECKPOINTS
# ═══════════════════════════════════════════════════════════════════════════
def save_checkpoint(params: ViTParams, path):
    path = Path(path)
    manifest = bytearray()
    payload = bytearray()
    manifest += struct.pack("<I", len(params.values))
    for name, value in params.values.items():
        encoded = name.encode("utf-8")
        arr = np.ascontiguousarray(value, dtype="<f8")
        manifest += struct.pack("<I", len(encoded)) + encoded
        manifest += struct.pack("<I", arr.ndim)
        manifest += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        manifest += struct.pack("<Q", len(payload))
        payload += arr.tobytes()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(manifest)
        fh.write(payload)
    return path


def load_checkpoint(path) -> ViTParams:
    """Read a checkpoint; every parameter comes back frozen."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e}") from e
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a BSRCKPT1 file")
    try:
        pos = 8
        (version,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        entries = []
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + name_len].decode("utf-8")
            if len(name.encode("utf-8")) != name_len:
                raise CheckpointError(f"{path}: truncated parameter name")
            pos += name_len
            (ndim,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}Q", data, pos)
            pos += 8 * ndim
            (offset,) = struct.unpack_from("<Q", data, pos)
            pos += 8
            entries.append((name, shape, offset))
    except struct.error as e:
        raise CheckpointError(f"{path}: truncated manifest") from e
    except UnicodeDecodeError as e:
        raise CheckpointError(f"{path}: corrupt parameter name") from e

    values = {}
    for name, shape, offset in entries:
        n = int(np.prod(shape, dtype=np.int64))
        start = pos + offset
        if start + 8 * n > len(data):
            raise CheckpointError(f"{path}: payload for '{name}' is truncated")
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=start)
        values[name] = arr.astype(np.float64).reshape(shape)
    return ViTParams(values)


def check_compatible(params: ViTParams, config: ViTConfig):
    """Raise CheckpointError when stored shapes disagree with the config (head excluded)."""
    reference = init_params(config, seed=0)
    problems = []
    for name, value in reference.values.items():
        if name.startswith("head."):
            continue
        if name not in params:
            problems.append(f"missing '{name}'")
        elif params[name].shape != value.shape:
            problems.append(f"'{name}' has shape {params[name].shape}, expected {value.shape}")
    if problems:
        raise CheckpointError("; ".join(problems[:5]))
    return params

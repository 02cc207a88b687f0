"""Content encoding, duration adapter and the dual-fusion flow Transformer.

The network works on padded batches internally. The per-sample functions
(``encode_content``, ``fuse_instruction``, ``backbone_velocity`` ...) are thin
wrappers that run a batch of one, so both paths share every line of math.

Fusion streams are resolved as integer row plans: each row of the
cross-attention context and of the additive stream names a source row (a
content row, an expanded content row, one of the two dummy embeddings, or a
zero row). One gather then builds the stream tensor for any fusion mode, and
the null condition for guidance is just another plan.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np

from . import tensor as T
from .tasks import N_INSTRUCTIONS, COPY_VOCAB, N_EVENTS, TaskSpec, ConfigError, DurationError
from .tensor import Tensor, ContractError

FUSION_MODES = ("dual", "cross_attn", "double", "input")
DURATION_GRAD_SCALE = 0.1
NTA_DUMMY_DURATION = 1
MASK_NEG = -1e9

# encoder kind per task id: ("table", vocab) or ("linear", None)
ENCODERS = {
    "ta_copy": ("table", COPY_VOCAB),
    "ta_denoise": ("linear", None),
    "nta_events": ("table", N_EVENTS),
}
INSTRUCTION_GROUPS = 3

# special row codes in a stream plan
DUMMY_CI = -1
DUMMY_CIT = -2
ZERO_ROW = -3


@dataclass
class ModelConfig:
    depth: int = 4
    embed_size: int = 64
    num_heads: int = 4
    ffn_mult: int = 4
    latent_dim: int = 8
    fusion_mode: str = "dual"
    max_units: int = 64
    max_frames: int = 64
    rotary: bool = True

    def __post_init__(self):
        if self.embed_size % self.num_heads:
            raise ConfigError(f"embed_size {self.embed_size} not divisible by num_heads {self.num_heads}")
        if (self.embed_size // self.num_heads) % 2:
            raise ConfigError("head size must be even for the rotary embedding")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        for name in ("depth", "embed_size", "num_heads", "ffn_mult", "latent_dim", "max_units", "max_frames"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


REFERENCE_SMALL = dict(depth=12, embed_size=512, num_heads=8)

Params = dict[str, Tensor]


# ---------------------------------------------------------------------------
# parameters


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, dl, f = cfg.embed_size, cfg.latent_dim, cfg.embed_size * cfg.ffn_mult
    shapes: dict[str, tuple[int, ...]] = {
        "enc.ta_copy.table": (COPY_VOCAB, d),
        "enc.ta_denoise.w": (dl, d),
        "enc.ta_denoise.b": (d,),
        "enc.nta_events.table": (N_EVENTS, d),
        "instr.table": (INSTRUCTION_GROUPS * N_INSTRUCTIONS, d),
        "adapter.wq": (d, d),
        "adapter.wk": (d, d),
        "adapter.wv": (d, d),
        "adapter.wo": (d, d),
        "dur.w1": (d, d),
        "dur.b1": (d,),
        "dur.w2": (d, 1),
        "dur.b2": (1,),
        "dur.wc": (d, 1),
        "dur.bc": (1,),
        "dummy.ci": (1, d),
        "dummy.cit": (1, d),
        "in.w": (dl, d),
        "in.b": (d,),
    }
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        for att in ("sa", "ca"):
            for w in ("wq", "wk", "wv", "wo"):
                shapes[p + f"{att}.{w}"] = (d, d)
            shapes[p + f"{att}.bo"] = (d,)
        shapes[p + "ffn.w1"] = (d, f)
        shapes[p + "ffn.b1"] = (f,)
        shapes[p + "ffn.w2"] = (f, d)
        shapes[p + "ffn.b2"] = (d,)
        shapes[p + "adaln.w1"] = (d, d)
        shapes[p + "adaln.b1"] = (d,)
        shapes[p + "adaln.w2"] = (d, 6 * d)
        shapes[p + "adaln.b2"] = (6 * d,)
    shapes["out.w"] = (d, dl)
    shapes["out.b"] = (dl,)
    return shapes


def _init_value(name: str, shape, rng: np.random.Generator, d: int) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if name == "out.w" or leaf.startswith("b"):
        if name.endswith("adaln.b2"):
            # gamma = 1, beta = 0, alpha = 1 for both sub-layers: gates start closed
            one, zero = np.ones(d), np.zeros(d)
            return np.concatenate([one, zero, one, one, zero, one])
        if name == "dur.b2":
            return np.full(shape, math.log(2.5))
        if name == "dur.bc":
            return np.full(shape, 36.0)
        return np.zeros(shape)
    if leaf == "table" or name.startswith("dummy."):
        return rng.standard_normal(shape)
    if name.endswith("adaln.w2"):
        return 0.02 * rng.standard_normal(shape)
    return rng.standard_normal(shape) / math.sqrt(shape[0])


def init_params(cfg: ModelConfig, seed: int = 0) -> Params:
    """Fresh parameters; all arrays are views into one flat float64 buffer."""
    rng = np.random.default_rng(seed)
    shapes = param_shapes(cfg)
    values = {n: _init_value(n, s, rng, cfg.embed_size) for n, s in shapes.items()}
    return params_from_arrays(values, shapes)


def params_from_arrays(values: dict[str, np.ndarray], shapes=None) -> Params:
    names = list(values) if shapes is None else list(shapes)
    flat = np.concatenate([np.asarray(values[n], dtype=np.float64).ravel() for n in names])
    out: Params = {}
    off = 0
    for n in names:
        shape = np.shape(values[n])
        size = int(np.prod(shape))
        out[n] = Tensor(flat[off : off + size].reshape(shape), requires_grad=True)
        off += size
    return out


def flat_view(params: Params) -> np.ndarray:
    """The shared buffer behind ``init_params``/``params_from_arrays`` output."""
    first = next(iter(params.values())).data
    base = first.base if first.base is not None else first
    return base


# ---------------------------------------------------------------------------
# small building blocks


def linear(x, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = T.matmul(x, w)
    return y if b is None else T.add(y, b)


def _heads(x: Tensor, h: int) -> Tensor:
    b, n, d = x.shape
    return T.transpose(T.reshape(x, (b, n, h, d // h)), 1, 2)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return T.reshape(T.transpose(x, 1, 2), (b, n, h * dh))


_ROTARY: dict[tuple[int, int], tuple[np.ndarray, np.ndarray, np.ndarray]] = {}


def rotary_tables(n: int, dh: int):
    """cos/sin tables [n, dh] and the rotate-half matrix [dh, dh]."""
    key = (n, dh)
    if key not in _ROTARY:
        half = dh // 2
        freqs = 10000.0 ** (-np.arange(half) / half)
        ang = np.arange(n)[:, None] * freqs[None, :]
        ang = np.concatenate([ang, ang], axis=1)
        rot = np.zeros((dh, dh))
        rot[np.arange(half) + half, np.arange(half)] = -1.0
        rot[np.arange(half), np.arange(half) + half] = 1.0
        _ROTARY[key] = (np.cos(ang), np.sin(ang), rot)
    return _ROTARY[key]


def _rotate(x: Tensor, tables) -> Tensor:
    c, s, rot = tables
    return T.add(T.mul(x, c), T.mul(T.matmul(x, rot), s))


def attention(q_in, kv_in, w: Params, prefix: str, heads: int, mask: np.ndarray | None, rotary: bool = False) -> Tensor:
    """Multi-head attention; ``mask`` is additive, broadcastable to [B, H, Nq, Nk]."""
    q = _heads(T.matmul(q_in, w[prefix + "wq"]), heads)
    k = _heads(T.matmul(kv_in, w[prefix + "wk"]), heads)
    v = _heads(T.matmul(kv_in, w[prefix + "wv"]), heads)
    dh = q.shape[-1]
    if rotary:
        tabs = rotary_tables(q.shape[2], dh)
        q, k = _rotate(q, tabs), _rotate(k, tabs)
    s = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(dh))
    if mask is not None:
        s = T.add(s, mask)
    o = _merge_heads(T.matmul(T.softmax_lastdim(s), v))
    return linear(o, w[prefix + "wo"], w.get(prefix + "bo"))


def key_mask(valid: np.ndarray) -> np.ndarray:
    """[B, N] bool -> additive mask [B, 1, 1, N]."""
    return np.where(valid, 0.0, MASK_NEG)[:, None, None, :]


# ---------------------------------------------------------------------------
# content path


@dataclass
class UnitInput:
    task: TaskSpec
    units: np.ndarray
    instruction_id: int = 0

    @property
    def n_units(self) -> int:
        return len(self.units)

    @property
    def instruction_row(self) -> int:
        return self.task.instruction_vocab_id * N_INSTRUCTIONS + self.instruction_id


def encode_batch(params: Params, cfg: ModelConfig, items: Sequence[UnitInput]) -> tuple[Tensor, np.ndarray]:
    """Content embeddings C, padded to [B, Nmax, D], plus the unit mask."""
    for it in items:
        if it.task.task_id not in ENCODERS:
            raise ConfigError(f"no content encoder for task {it.task.task_id!r}")
        if it.n_units > cfg.max_units:
            raise ContractError(f"{it.n_units} units exceeds max_units={cfg.max_units}")
    parts, offsets, start = [], {}, 0
    for tid in dict.fromkeys(it.task.task_id for it in items):
        group = [i for i, it in enumerate(items) if it.task.task_id == tid]
        kind, _ = ENCODERS[tid]
        if kind == "table":
            toks = np.concatenate([np.asarray(items[i].units, dtype=np.intp) for i in group])
            parts.append(T.lookup(params[f"enc.{tid}.table"], toks))
        else:
            frames = np.concatenate([np.asarray(items[i].units, dtype=np.float64) for i in group], axis=0)
            parts.append(linear(frames, params[f"enc.{tid}.w"], params[f"enc.{tid}.b"]))
        for i in group:
            offsets[i] = start
            start += items[i].n_units
    flat = parts[0] if len(parts) == 1 else T.concat(parts, axis=0)
    n_max = max(it.n_units for it in items)
    idx = np.zeros((len(items), n_max), dtype=np.intp)
    mask = np.zeros((len(items), n_max), dtype=bool)
    for i, it in enumerate(items):
        idx[i, : it.n_units] = offsets[i] + np.arange(it.n_units)
        mask[i, : it.n_units] = True
    return T.lookup(flat, idx), mask


def fuse_batch(params: Params, c: Tensor, instruction_rows: np.ndarray) -> Tensor:
    """C^I = Attn(C, I, I) + C with a single head and one instruction row per sample."""
    instr = T.lookup(params["instr.table"], np.asarray(instruction_rows, dtype=np.intp)[:, None])
    return T.add(attention(c, instr, params, "adapter.", 1, None), c)


def durations_batch(params: Params, c_i: Tensor, unit_mask: np.ndarray, is_ta: np.ndarray) -> tuple[Tensor, Tensor]:
    """(d_c_hat [B], log_d_s_hat [B, N]) from gradient-scaled C^I."""
    b, n, _ = c_i.shape
    x = T.scaled_gradient(c_i, DURATION_GRAD_SCALE)
    h = T.gelu(linear(x, params["dur.w1"], params["dur.b1"]))
    log_ds = T.reshape(linear(h, params["dur.w2"], params["dur.b2"]), (b, n))
    is_ta = np.asarray(is_ta, dtype=bool)
    parts = []
    if is_ta.any():
        ta_dc = T.sum_(T.mul(T.exp(log_ds), unit_mask.astype(np.float64)), axis=1)
        parts.append(ta_dc if is_ta.all() else T.mul(ta_dc, is_ta.astype(np.float64)))
    if not is_ta.all():
        w = unit_mask / unit_mask.sum(axis=1, keepdims=True)
        pooled = T.sum_(T.mul(h, w[:, :, None]), axis=1)
        nta_dc = T.reshape(linear(pooled, params["dur.wc"], params["dur.bc"]), (b,))
        parts.append(nta_dc if not is_ta.any() else T.mul(nta_dc, (~is_ta).astype(np.float64)))
    d_c = parts[0] if len(parts) == 1 else T.add(parts[0], parts[1])
    return d_c, log_ds


def expansion_rows(d_s) -> np.ndarray:
    d_s = np.asarray(d_s, dtype=np.int64)
    if np.any(d_s <= 0):
        raise DurationError(f"durations must be >= 1, got {d_s.tolist()}")
    return np.repeat(np.arange(len(d_s)), d_s)


def stream_plan(
    task: TaskSpec, mode: str, n_units: int, n_cit: int, n_frames: int, null: bool = False
) -> tuple[np.ndarray, np.ndarray]:
    """Row codes for (cross-attention context, additive stream).

    Codes ``0..n_units-1`` name C^I rows, ``n_units..n_units+n_cit-1`` name
    C^I_T rows, negatives name the dummies or a zero row.
    """
    dummy_f = np.full(n_frames, DUMMY_CIT)
    zeros_f = np.full(n_frames, ZERO_ROW)
    if null:
        if mode == "cross_attn":
            return np.array([DUMMY_CI, DUMMY_CIT]), zeros_f
        return np.array([DUMMY_CI]), dummy_f
    ci = np.arange(n_units)
    if task.is_ta:
        if n_cit != n_frames:
            raise ContractError(f"{task.task_id}: expanded content has {n_cit} rows for {n_frames} frames")
        cit = n_units + np.arange(n_frames)
    else:
        m = min(n_cit, n_frames)
        cit = np.concatenate([n_units + np.arange(m), np.full(n_frames - m, ZERO_ROW)])
    if mode == "cross_attn":
        return np.concatenate([ci, n_units + np.arange(n_cit)]), zeros_f
    if mode == "double":
        return ci, cit
    # dual and input share stream selection; input applies F once
    if task.is_ta:
        return np.array([DUMMY_CI]), cit
    return ci, dummy_f


@dataclass
class ContentBatch:
    items: list[UnitInput]
    c_i: Tensor
    unit_mask: np.ndarray
    d_c: Tensor
    log_ds: Tensor


def content_batch(params: Params, cfg: ModelConfig, items: Sequence[UnitInput]) -> ContentBatch:
    items = list(items)
    c, mask = encode_batch(params, cfg, items)
    c_i = fuse_batch(params, c, np.array([it.instruction_row for it in items]))
    d_c, log_ds = durations_batch(params, c_i, mask, np.array([it.task.is_ta for it in items]))
    return ContentBatch(items, c_i, mask, d_c, log_ds)


@dataclass
class Streams:
    k_ctx: Tensor  # [B, Lk, D]
    k_valid: np.ndarray  # [B, Lk]
    f_ctx: Tensor  # [B, Tmax, D]
    frame_valid: np.ndarray  # [B, Tmax]
    input_only: bool = False


def _special_rows(params: Params, d: int) -> Tensor:
    return T.concat([params["dummy.ci"], params["dummy.cit"], Tensor(np.zeros((1, d)))], axis=0)


def streams_batch(
    params: Params,
    cfg: ModelConfig,
    content: ContentBatch,
    durations: Sequence[np.ndarray | None],
    n_frames: Sequence[int],
    null: Sequence[bool],
    mode: str | None = None,
) -> Streams:
    """Gather both fusion streams for every sample in one pass.

    ``durations`` holds d_s per TA sample; NTA samples use the constant dummy
    duration regardless of what is passed.
    """
    mode = cfg.fusion_mode if mode is None else mode
    b, n_max, d = content.c_i.shape
    src = T.concat([T.reshape(content.c_i, (b * n_max, d)), _special_rows(params, d)], axis=0)
    special = {DUMMY_CI: b * n_max, DUMMY_CIT: b * n_max + 1, ZERO_ROW: b * n_max + 2}
    k_plans, f_plans = [], []
    for i, it in enumerate(content.items):
        ds = durations[i] if it.task.is_ta else np.full(it.n_units, NTA_DUMMY_DURATION)
        exp_rows = expansion_rows(ds)
        k_codes, f_codes = stream_plan(it.task, mode, it.n_units, len(exp_rows), n_frames[i], null[i])

        def resolve(codes, i=i, it=it, exp_rows=exp_rows):
            out = np.empty(len(codes), dtype=np.intp)
            for j, c in enumerate(codes):
                if c < 0:
                    out[j] = special[int(c)]
                elif c < it.n_units:
                    out[j] = i * n_max + c
                else:
                    out[j] = i * n_max + exp_rows[c - it.n_units]
            return out

        k_plans.append(resolve(k_codes))
        f_plans.append(resolve(f_codes))
    t_max = max(n_frames)
    if t_max > cfg.max_frames:
        raise ContractError(f"{t_max} frames exceeds max_frames={cfg.max_frames}")
    lk = max(len(k) for k in k_plans)
    kidx = np.full((b, lk), special[ZERO_ROW], dtype=np.intp)
    fidx = np.full((b, t_max), special[ZERO_ROW], dtype=np.intp)
    kvalid = np.zeros((b, lk), dtype=bool)
    fvalid = np.zeros((b, t_max), dtype=bool)
    for i in range(b):
        kidx[i, : len(k_plans[i])] = k_plans[i]
        kvalid[i, : len(k_plans[i])] = True
        fidx[i, : n_frames[i]] = f_plans[i]
        fvalid[i, : n_frames[i]] = True
    return Streams(T.lookup(src, kidx), kvalid, T.lookup(src, fidx), fvalid, mode == "input")


# ---------------------------------------------------------------------------
# backbone


def timestep_embedding(tau, dim: int) -> Tensor:
    """Sinusoidal embedding of tau in [0, 1] (scaled by 1000), [B, dim]."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    arg = T.Tensor(np.asarray(tau, dtype=np.float64).reshape(-1, 1) * 1000.0 * freqs[None, :])
    return T.concat([T.cos(arg), T.sin(arg)], axis=-1)


def adaln_batch(params: Params, cfg: ModelConfig, tau) -> list[tuple[Tensor, ...]]:
    """Per block (gamma_sa, beta_sa, alpha_sa, gamma_ffn, beta_ffn, alpha_ffn), each [B, 1, D]."""
    d = cfg.embed_size
    emb = timestep_embedding(tau, d)
    out = []
    for i in range(cfg.depth):
        p = f"blocks.{i}.adaln."
        h = T.gelu(linear(emb, params[p + "w1"], params[p + "b1"]))
        m = linear(h, params[p + "w2"], params[p + "b2"])
        m = T.reshape(m, (m.shape[0], 1, 6 * d))
        out.append(tuple(T.slice_(m, (slice(None), slice(None), slice(j * d, (j + 1) * d))) for j in range(6)))
    return out


def block_forward(
    a: Tensor,
    k_ctx: Tensor,
    f_ctx: Tensor | None,
    mods: Sequence,
    params: Params,
    prefix: str,
    cfg: ModelConfig,
    self_mask: np.ndarray | None,
    cross_mask: np.ndarray | None,
) -> Tensor:
    g_sa, b_sa, a_sa, g_ff, b_ff, a_ff = mods
    # (1) AdaLN self-attention; the skip path is the modulated normalized input
    a_norm = T.add(T.mul(T.layer_norm(a), g_sa), b_sa)
    sa = attention(a_norm, a_norm, params, prefix + "sa.", cfg.num_heads, self_mask, rotary=cfg.rotary)
    a = T.add(T.mul(T.tanh(T.sub(1.0, a_sa)), sa), a_norm)
    # (2) additive fusion of the time-aligned stream
    if f_ctx is not None:
        if f_ctx.shape[-2] != a.shape[-2]:
            raise ContractError(f"additive stream has {f_ctx.shape[-2]} rows for {a.shape[-2]} frames")
        a = T.add(a, f_ctx)
    # (3) cross-attention with plain residual
    a = T.add(attention(a, k_ctx, params, prefix + "ca.", cfg.num_heads, cross_mask), a)
    # (4) AdaLN feed-forward
    a_norm = T.add(T.mul(T.layer_norm(a), g_ff), b_ff)
    ff = linear(T.gelu(linear(a_norm, params[prefix + "ffn.w1"], params[prefix + "ffn.b1"])),
                params[prefix + "ffn.w2"], params[prefix + "ffn.b2"])
    return T.add(T.mul(T.tanh(T.sub(1.0, a_ff)), ff), a_norm)


def velocity(params: Params, cfg: ModelConfig, z: Tensor, tau, streams: Streams) -> Tensor:
    """v_theta for a padded batch z [B, T, latent_dim]."""
    a = linear(z, params["in.w"], params["in.b"])
    if streams.input_only:
        a = T.add(a, streams.f_ctx)
    self_mask = None if streams.frame_valid.all() else key_mask(streams.frame_valid)
    cross_mask = None if streams.k_valid.all() else key_mask(streams.k_valid)
    f = None if streams.input_only else streams.f_ctx
    for i, mods in enumerate(adaln_batch(params, cfg, tau)):
        a = block_forward(a, streams.k_ctx, f, mods, params, f"blocks.{i}.", cfg, self_mask, cross_mask)
    return linear(a, params["out.w"], params["out.b"])


# ---------------------------------------------------------------------------
# per-sample API


def _one(x: Tensor) -> Tensor:
    return T.reshape(x, (1,) + x.shape)


def _drop(x: Tensor) -> Tensor:
    return T.reshape(x, x.shape[1:])


def encode_content(task: TaskSpec, raw_units, params: Params, cfg: ModelConfig | None = None) -> Tensor:
    cfg = cfg or ModelConfig(embed_size=params["in.w"].shape[1], latent_dim=params["in.w"].shape[0])
    c, _ = encode_batch(params, cfg, [UnitInput(task, np.asarray(raw_units))])
    return _drop(c)


def fuse_instruction(c: Tensor, task: TaskSpec, instruction_id: int, params: Params) -> Tensor:
    row = UnitInput(task, np.zeros(0), instruction_id).instruction_row
    return _drop(fuse_batch(params, _one(c), np.array([row])))


def predict_durations(c_i: Tensor, task: TaskSpec, params: Params) -> tuple[Tensor, Tensor]:
    d_c, log_ds = durations_batch(params, _one(c_i), np.ones((1, c_i.shape[0]), bool), np.array([task.is_ta]))
    return T.reshape(d_c, ()), _drop(log_ds)


def duration_adapt(c_i: Tensor, d_s) -> Tensor:
    """Repeat row i of C^I d_s[i] times."""
    return T.lookup(c_i, expansion_rows(d_s))


def nta_expand(c_i: Tensor) -> Tensor:
    return duration_adapt(c_i, np.full(c_i.shape[0], NTA_DUMMY_DURATION))


def select_streams(
    task: TaskSpec,
    c_i: Tensor | None,
    c_i_t: Tensor | None,
    params: Params,
    fusion_mode: str = "dual",
    n_frames: int | None = None,
) -> tuple[Tensor, Tensor]:
    """(cross-attention context, additive stream) for one sample.

    Passing ``None`` for both content streams selects the null condition.
    """
    null = c_i is None and c_i_t is None
    d = params["dummy.ci"].shape[1]
    if n_frames is None:
        if c_i_t is None:
            raise ContractError("n_frames is required for the null condition")
        n_frames = c_i_t.shape[0]
    n_units = 0 if c_i is None else c_i.shape[0]
    n_cit = 0 if c_i_t is None else c_i_t.shape[0]
    k_codes, f_codes = stream_plan(task, fusion_mode, n_units, n_cit, n_frames, null)
    pieces = [t for t in (c_i, c_i_t) if t is not None] + [_special_rows(params, d)]
    src = T.concat(pieces, axis=0)
    base = n_units + n_cit
    remap = {DUMMY_CI: base, DUMMY_CIT: base + 1, ZERO_ROW: base + 2}

    def rows(codes):
        return np.array([remap[int(c)] if c < 0 else c for c in codes], dtype=np.intp)

    return T.lookup(src, rows(k_codes)), T.lookup(src, rows(f_codes))


def adaln_params(tau: float, params: Params, cfg: ModelConfig) -> list[tuple[Tensor, ...]]:
    """Six [D] modulation vectors per block."""
    if not 0.0 <= tau <= 1.0:
        raise T.ParameterError(f"tau must lie in [0, 1], got {tau}")
    return [tuple(T.reshape(m, (cfg.embed_size,)) for m in mods) for mods in adaln_batch(params, cfg, [tau])]


def dual_fusion_block(
    a: Tensor, k_ctx: Tensor, f_ctx: Tensor | None, adaln: Sequence, params: Params, cfg: ModelConfig, index: int = 0
) -> Tensor:
    """One block on a single unpadded sample; ``adaln`` holds six [D] vectors."""
    mods = [T.reshape(m, (1, 1, cfg.embed_size)) if isinstance(m, Tensor) else np.reshape(m, (1, 1, -1)) for m in adaln]
    f = None if f_ctx is None else _one(f_ctx)
    return _drop(block_forward(_one(a), _one(k_ctx), f, mods, params, f"blocks.{index}.", cfg, None, None))


def backbone_velocity(
    z_tau: Tensor,
    tau: float,
    c_i: Tensor | None,
    c_i_t: Tensor | None,
    task: TaskSpec,
    params: Params,
    cfg: ModelConfig,
) -> Tensor:
    """v_theta(z_tau, tau, C^I, C^I_T) for one sample; both streams None means unconditional."""
    z_tau = T.as_tensor(z_tau)
    n = z_tau.shape[0]
    if n > cfg.max_frames:
        raise ContractError(f"{n} frames exceeds max_frames={cfg.max_frames}")
    k, f = select_streams(task, c_i, c_i_t, params, cfg.fusion_mode, n_frames=n)
    st = Streams(_one(k), np.ones((1, k.shape[0]), bool), _one(f), np.ones((1, n), bool), cfg.fusion_mode == "input")
    return _drop(velocity(params, cfg, _one(z_tau), [tau], st))

"""GaitPTv2 and GaitFormer encoders with width-multiplier scaling and muP.

Both models are bias-free parallel-block transformers (attention and SwiGLU
MLP read the same RMS-normalized input) with rotary position embeddings.
GaitPTv2 runs four spatial/temporal stages and merges joint tokens into limb,
half-body and whole-body tokens between stages.
"""

from __future__ import annotations

import dataclasses
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np

from . import tensor as tc
from .data import N_JOINTS
from .tensor import Tensor

VARIANT_DEPTHS = {"deep": (2, 2, 12, 2), "shallow": (2, 2, 4, 2)}

DEFAULT_PARTITIONS = (
    # joints -> limbs: head, left arm, right arm, left leg, right leg
    ((0, 1, 2, 3, 4), (5, 7, 9), (6, 8, 10), (11, 13, 15), (12, 14, 16)),
    # limbs -> upper / lower body
    ((0, 1, 2), (3, 4)),
    # halves -> whole body
    ((0, 1),),
)

GROUP_INPUT = "input"
GROUP_HIDDEN = "hidden"
GROUP_READOUT = "readout"
GROUP_FIXED = "fixed"
GROUP_GAIN = "gain"

NORM_EPS = 1e-6


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    family: Literal["gaitpt_v2", "gaitformer"] = "gaitpt_v2"
    variant: Literal["deep", "shallow"] = "deep"
    width_multiplier: int = 1
    base_stage_widths: tuple[int, ...] = (32, 64, 128, 256)
    base_stage_heads: tuple[int, ...] = (1, 2, 4, 8)
    stage_depths: tuple[int, ...] | None = None
    emb_size: int = 128
    head_dim: int = 32
    crop_length: int = 48
    partition_tables: tuple = DEFAULT_PARTITIONS
    rope_base: float = 10000.0
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.family not in ("gaitpt_v2", "gaitformer"):
            raise ConfigError(f"family: unknown model family {self.family!r}")
        if self.variant not in VARIANT_DEPTHS:
            raise ConfigError(f"variant: expected 'deep' or 'shallow', got {self.variant!r}")
        depths = tuple(VARIANT_DEPTHS[self.variant])
        if self.stage_depths is None:
            object.__setattr__(self, "stage_depths", depths)
        elif tuple(self.stage_depths) != depths:
            raise ConfigError(f"stage_depths: {self.variant} variant requires {depths}, got {self.stage_depths}")
        object.__setattr__(self, "stage_depths", tuple(int(d) for d in self.stage_depths))
        object.__setattr__(self, "base_stage_widths", tuple(int(w) for w in self.base_stage_widths))
        object.__setattr__(self, "base_stage_heads", tuple(int(h) for h in self.base_stage_heads))
        object.__setattr__(
            self, "partition_tables", tuple(tuple(tuple(int(i) for i in g) for g in t) for t in self.partition_tables)
        )
        if int(self.width_multiplier) != self.width_multiplier or self.width_multiplier < 1:
            raise ConfigError("width_multiplier: must be a positive integer")
        if len(self.base_stage_widths) != 4 or len(self.base_stage_heads) != 4:
            raise ConfigError("base_stage_widths/base_stage_heads: need 4 stages")
        if self.head_dim < 2 or self.head_dim % 2:
            raise ConfigError("head_dim: rotary embeddings need an even head_dim")
        for s, (w, h) in enumerate(zip(self.stage_widths, self.stage_heads)):
            if h < 1 or w % h:
                raise ConfigError(f"base_stage_widths[{s}]: width {w} not divisible by {h} heads")
            if w // h != self.head_dim:
                raise ConfigError(f"base_stage_heads[{s}]: width/heads = {w // h}, expected head_dim {self.head_dim}")
        if self.emb_size < 1 or self.crop_length < 1 or self.mlp_ratio < 1:
            raise ConfigError("emb_size, crop_length and mlp_ratio must be positive")
        if len(self.partition_tables) != 3:
            raise ConfigError("partition_tables: need 3 stage transitions")
        n_in = N_JOINTS
        for i, table in enumerate(self.partition_tables):
            flat = sorted(j for g in table for j in g)
            if flat != list(range(n_in)) or any(len(g) == 0 for g in table):
                raise ConfigError(f"partition_tables[{i}]: groups must partition tokens 0..{n_in - 1}")
            n_in = len(table)

    @property
    def stage_widths(self) -> tuple[int, ...]:
        return tuple(self.width_multiplier * w for w in self.base_stage_widths)

    @property
    def stage_heads(self) -> tuple[int, ...]:
        return tuple(self.width_multiplier * h for h in self.base_stage_heads)

    @property
    def stage_tokens(self) -> tuple[int, ...]:
        return (N_JOINTS,) + tuple(len(t) for t in self.partition_tables)

    @property
    def flat_width(self) -> int:
        return self.stage_widths[2]

    @property
    def flat_heads(self) -> int:
        return self.stage_heads[2]

    @property
    def flat_depth(self) -> int:
        return self.stage_depths[2]

    def with_width(self, c: int) -> "ModelConfig":
        return dataclasses.replace(self, width_multiplier=c)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["partition_tables"] = [[list(g) for g in t] for t in self.partition_tables]
        for k in ("base_stage_widths", "base_stage_heads", "stage_depths"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# -- parameter layout ----------------------------------------------------------
def _block_shapes(prefix: str, d: int, h: int) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, group) for one parallel block."""
    return [
        (prefix + "norm", (d,), GROUP_GAIN),
        (prefix + "wq", (d, d), GROUP_HIDDEN),
        (prefix + "wk", (d, d), GROUP_HIDDEN),
        (prefix + "wv", (d, d), GROUP_HIDDEN),
        (prefix + "wo", (d, d), GROUP_HIDDEN),
        (prefix + "w_gate", (d, h), GROUP_HIDDEN),
        (prefix + "w_up", (d, h), GROUP_HIDDEN),
        (prefix + "w_down", (h, d), GROUP_HIDDEN),
    ]


def param_layout(cfg: ModelConfig, include_head: bool = True) -> list[tuple[str, tuple[int, ...], str]]:
    """Ordered (name, shape, muP group) for every trainable tensor."""
    out: list[tuple[str, tuple[int, ...], str]] = []
    emb = cfg.emb_size
    if cfg.family == "gaitpt_v2":
        widths = cfg.stage_widths
        out.append(("embed", (3, widths[0]), GROUP_INPUT))
        for s, (d, depth) in enumerate(zip(widths, cfg.stage_depths)):
            for layer in range(depth):
                for kind in ("spatial", "temporal"):
                    out += _block_shapes(f"stage{s}.layer{layer}.{kind}.", d, cfg.mlp_ratio * d)
            out.append((f"stage{s}.norm_out", (d,), GROUP_GAIN))
            out.append((f"stage{s}.readout", (d, emb), GROUP_READOUT))
            if s < 3:
                for g, members in enumerate(cfg.partition_tables[s]):
                    out.append((f"merge{s}.group{g}", (len(members) * d, widths[s + 1]), GROUP_HIDDEN))
        out.append(("final", (4 * emb, emb), GROUP_FIXED))
    else:
        d = cfg.flat_width
        out.append(("embed", (N_JOINTS * 3, d), GROUP_INPUT))
        for layer in range(cfg.flat_depth):
            out += _block_shapes(f"layer{layer}.temporal.", d, cfg.mlp_ratio * d)
        out.append(("norm_out", (d,), GROUP_GAIN))
        out.append(("readout", (d, emb), GROUP_READOUT))
    if include_head:
        out.append(("head.w1", (emb, emb), GROUP_FIXED))
        out.append(("head.w2", (emb, emb), GROUP_FIXED))
    return out


def linear_param_count(d_in: int, d_out: int) -> int:
    return d_in * d_out


def param_count(cfg: ModelConfig, include_head: bool = True) -> int:
    """Closed-form count of trainable parameters (all layers are bias-free)."""
    emb = cfg.emb_size

    def block(d: int) -> int:
        return d + 4 * linear_param_count(d, d) + 3 * linear_param_count(d, cfg.mlp_ratio * d)

    if cfg.family == "gaitpt_v2":
        w = cfg.stage_widths
        n = 3 * w[0] + 4 * emb * emb
        tokens = cfg.stage_tokens
        for s in range(4):
            n += 2 * cfg.stage_depths[s] * block(w[s]) + w[s] + w[s] * emb
            if s < 3:
                n += tokens[s] * w[s] * w[s + 1]
    else:
        d = cfg.flat_width
        n = N_JOINTS * 3 * d + cfg.flat_depth * block(d) + d + d * emb
    if include_head:
        n += 2 * emb * emb
    return n


# -- muP -----------------------------------------------------------------------
@dataclass(frozen=True)
class ParamScale:
    init_std_multiplier: float
    lr_multiplier: float
    forward_scale: float = 1.0


@dataclass
class MuPScales:
    width_ratio: float
    groups: dict[str, str]
    params: dict[str, ParamScale]
    attn_logit_scale: float

    def lr_multiplier(self, name: str) -> float:
        return self.params[name].lr_multiplier


_GROUP_RULES = {
    # group: (init_std exponent, lr exponent) applied to the width ratio r as r**-e
    GROUP_INPUT: (0.0, 0.0),
    GROUP_HIDDEN: (0.5, 1.0),
    GROUP_READOUT: (1.0, 1.0),
    GROUP_FIXED: (0.0, 0.0),
    GROUP_GAIN: (0.0, 0.0),
}


def mup_scales(cfg: ModelConfig, base_cfg: ModelConfig | None = None) -> MuPScales:
    """Per-parameter init/lr multipliers relative to ``base_cfg`` (default: c=1).

    Hidden matrices: init std / sqrt(r), lr / r. Readout: init std / r, lr / r.
    Input embedding, fixed-width layers and gains: unchanged. Attention logits
    use 1/head_dim.
    """
    base_cfg = base_cfg if base_cfg is not None else cfg.with_width(1)
    if cfg.stage_depths != base_cfg.stage_depths or cfg.family != base_cfg.family:
        raise ConfigError("muP transfer needs a fixed depth and family; only width may change")
    if dataclasses.replace(cfg, width_multiplier=base_cfg.width_multiplier) != base_cfg:
        raise ConfigError("muP base config must differ only in width_multiplier")
    r = cfg.width_multiplier / base_cfg.width_multiplier
    groups, params = {}, {}
    for name, _shape, group in param_layout(cfg):
        e_init, e_lr = _GROUP_RULES[group]
        groups[name] = group
        params[name] = ParamScale(r**-e_init, r**-e_lr)
    return MuPScales(r, groups, params, 1.0 / cfg.head_dim)


def standard_scales(cfg: ModelConfig) -> MuPScales:
    """Standard parametrization control: 1/sqrt(fan_in) init at the actual width, no lr scaling."""
    groups, params = {}, {}
    for name, _shape, group in param_layout(cfg):
        groups[name] = group
        params[name] = ParamScale(1.0, 1.0)
    return MuPScales(float(cfg.width_multiplier), groups, params, 1.0 / np.sqrt(cfg.head_dim))


def _base_std(cfg: ModelConfig, name: str, shape: tuple[int, ...], group: str, parametrization: str) -> float:
    if group == GROUP_GAIN:
        return 1.0
    fan_in = shape[0]
    if parametrization == "sp" or group in (GROUP_INPUT, GROUP_FIXED):
        return 1.0 / np.sqrt(fan_in)
    # fan_in measured at c = 1
    base_fan_in = fan_in // cfg.width_multiplier if group in (GROUP_HIDDEN, GROUP_READOUT) else fan_in
    return 1.0 / np.sqrt(base_fan_in)


# -- model ---------------------------------------------------------------------
class GaitModel:
    """Parameters plus the forward passes; see ``forward_embed`` and ``projection_head``."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor], scales: MuPScales, parametrization: str = "mup"):
        self.cfg = cfg
        self.params = params
        self.scales = scales
        self.parametrization = parametrization
        self.step = 0

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def num_parameters(self, include_head: bool = True) -> int:
        return sum(p.size for n, p in self.params.items() if include_head or not n.startswith("head."))

    def embed(self, batch, record: dict | None = None) -> Tensor:
        return forward_embed(self, batch, record)

    def project(self, emb: Tensor) -> Tensor:
        return projection_head(self, emb)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def build_model(
    cfg: ModelConfig,
    seed: int = 0,
    parametrization: Literal["mup", "sp"] = "mup",
    dtype=np.float64,
    include_head: bool = True,
) -> GaitModel:
    """Gaussian init with muP-scaled std (gains start at 1); deterministic in ``seed``."""
    scales = mup_scales(cfg) if parametrization == "mup" else standard_scales(cfg)
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape, group in param_layout(cfg, include_head):
        if group == GROUP_GAIN:
            arr = np.ones(shape)
        else:
            std = _base_std(cfg, name, shape, group, parametrization) * scales.params[name].init_std_multiplier
            arr = rng.normal(0.0, std, size=shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True)
    return GaitModel(cfg, params, scales, parametrization)


# -- building blocks -------------------------------------------------------------
def rope_angles(positions, head_dim: int, rope_base: float = 10000.0, thetas=None) -> np.ndarray:
    if head_dim % 2:
        raise ConfigError("rotary embeddings need an even head_dim")
    if thetas is None:
        thetas = rope_base ** (-np.arange(0, head_dim, 2) / head_dim)
    thetas = np.asarray(thetas, dtype=np.float64)
    if thetas.shape != (head_dim // 2,):
        raise ConfigError("need one rotation frequency per coordinate pair")
    return np.asarray(positions, dtype=np.float64)[:, None] * thetas[None, :]


def rope_apply(x: Tensor, positions, rope_base: float = 10000.0, thetas=None) -> Tensor:
    """Rotate each coordinate pair (2i, 2i+1) of token m by m * theta_i."""
    hd = x.shape[-1]
    ang = rope_angles(positions, hd, rope_base, thetas)
    if ang.shape[0] != x.shape[-2]:
        raise tc.ShapeError(f"rope: {ang.shape[0]} positions for {x.shape[-2]} tokens")
    cos = np.cos(ang).astype(x.dtype)
    sin = np.sin(ang).astype(x.dtype)
    x0 = x.data[..., 0::2]
    x1 = x.data[..., 1::2]
    out = np.empty_like(x.data)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos

    def bw(g):
        g0 = g[..., 0::2]
        g1 = g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = g0 * cos + g1 * sin
        gx[..., 1::2] = -g0 * sin + g1 * cos
        return (gx,)

    return Tensor.from_op(out, (x,), bw, "rope")


def attention(
    h: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor, n_heads: int,
    positions, rope_base: float, logit_scale: float,
) -> Tensor:
    """Bias-free multi-head self-attention over axis -2 with RoPE on q and k."""
    *lead, n, d = h.shape
    hd = d // n_heads

    def split(t: Tensor) -> Tensor:
        return tc.swapaxes(t.reshape(*lead, n, n_heads, hd), -2, -3)

    q = rope_apply(split(h @ wq), positions, rope_base)
    k = rope_apply(split(h @ wk), positions, rope_base)
    v = split(h @ wv)
    logits = (q @ tc.swapaxes(k, -1, -2)) * logit_scale
    mixed = tc.softmax(logits) @ v
    return tc.swapaxes(mixed, -2, -3).reshape(*lead, n, d) @ wo


def parallel_block(x: Tensor, p: dict[str, Tensor], prefix: str, n_heads: int, rope_base: float, logit_scale: float) -> Tensor:
    """x + attention(rms_norm(x)) + swiglu(rms_norm(x)) over the token axis -2."""
    h = tc.rms_norm(x, p[prefix + "norm"], NORM_EPS)
    positions = np.arange(x.shape[-2])
    a = attention(h, p[prefix + "wq"], p[prefix + "wk"], p[prefix + "wv"], p[prefix + "wo"],
                  n_heads, positions, rope_base, logit_scale)
    m = tc.swiglu_mlp(h, p[prefix + "w_gate"], p[prefix + "w_up"], p[prefix + "w_down"])
    return x + a + m


def stage_merge(tokens: Tensor, partition, weights: list[Tensor]) -> Tensor:
    """Concatenate each group's member tokens and project; (..., S_in, d) -> (..., S_out, d_out)."""
    s_in = tokens.shape[-2]
    flat = sorted(j for g in partition for j in g)
    if flat != list(range(s_in)):
        raise ConfigError(f"partition does not cover tokens 0..{s_in - 1} exactly once")
    if len(weights) != len(partition):
        raise ConfigError("one merge matrix per group is required")
    lead = tokens.shape[:-2]
    outs = []
    for members, w in zip(partition, weights):
        grp = tc.take(tokens, list(members), axis=-2)
        grp = grp.reshape(*lead, len(members) * tokens.shape[-1])
        outs.append((grp @ w).reshape(*lead, 1, w.shape[-1]))
    return tc.concat(outs, axis=-2) if len(outs) > 1 else outs[0]


def _rms(t: Tensor) -> float:
    return float(np.sqrt(np.mean(np.square(t.data, dtype=np.float64))))


def forward_embed(model: GaitModel, batch, record: dict | None = None) -> Tensor:
    """Backbone embedding (B, emb_size) for a (B, T, 17, 3) batch; no projection head.

    ``record``, when given, receives the RMS of every layer's output keyed by layer name.
    """
    cfg, p = model.cfg, model.params
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=model.dtype))
    if x.ndim != 4 or x.shape[2] != N_JOINTS or x.shape[3] != 3:
        raise tc.ShapeError(f"expected (B, T, {N_JOINTS}, 3) input, got {x.shape}")
    if not np.all(np.isfinite(x.data)):
        raise tc.NonFiniteError("forward_embed: non-finite input")
    scale = model.scales.attn_logit_scale

    def rec(name, t):
        if record is not None:
            record[name] = _rms(t)

    if cfg.family == "gaitformer":
        b, t = x.shape[:2]
        tok = x.reshape(b, t, N_JOINTS * 3) @ p["embed"]
        rec("embed", tok)
        for layer in range(cfg.flat_depth):
            tok = parallel_block(tok, p, f"layer{layer}.temporal.", cfg.flat_heads, cfg.rope_base, scale)
            rec(f"layer{layer}", tok)
        pooled = tc.rms_norm(tok, p["norm_out"], NORM_EPS).mean(axis=1)
        out = pooled @ p["readout"]
        rec("readout", out)
        return out

    tok = x @ p["embed"]
    rec("embed", tok)
    stage_outs = []
    for s in range(4):
        heads = cfg.stage_heads[s]
        for layer in range(cfg.stage_depths[s]):
            pre = f"stage{s}.layer{layer}."
            # spatial: attend across joint/limb tokens within each frame
            tok = parallel_block(tok, p, pre + "spatial.", heads, cfg.rope_base, scale)
            rec(pre + "spatial", tok)
            # temporal: attend across frames for each spatial token
            tt = tc.swapaxes(tok, 1, 2)
            tt = parallel_block(tt, p, pre + "temporal.", heads, cfg.rope_base, scale)
            tok = tc.swapaxes(tt, 1, 2)
            rec(pre + "temporal", tok)
        pooled = tc.rms_norm(tok, p[f"stage{s}.norm_out"], NORM_EPS).mean(axis=(1, 2))
        out_s = pooled @ p[f"stage{s}.readout"]
        rec(f"stage{s}.readout", out_s)
        stage_outs.append(out_s)
        if s < 3:
            table = cfg.partition_tables[s]
            tok = stage_merge(tok, table, [p[f"merge{s}.group{g}"] for g in range(len(table))])
            rec(f"merge{s}", tok)
    cat = tc.concat(stage_outs, axis=-1)
    out = cat @ p["final"]
    rec("final", out)
    return out


def projection_head(model: GaitModel, emb: Tensor) -> Tensor:
    """Training-only 2-layer MLP: linear -> silu -> linear."""
    return tc.silu(emb @ model.params["head.w1"]) @ model.params["head.w2"]


# -- checkpoints -----------------------------------------------------------------
CKPT_MAGIC = b"GCK1"
CKPT_VERSION = 1


def checkpoint_bytes(model: GaitModel) -> bytes:
    buf = io.BytesIO()
    cfg_json = json.dumps(
        {"model": model.cfg.to_dict(), "parametrization": model.parametrization}, sort_keys=True
    ).encode()
    buf.write(struct.pack("<4sHQI", CKPT_MAGIC, CKPT_VERSION, model.step, len(cfg_json)))
    buf.write(cfg_json)
    buf.write(struct.pack("<I", len(model.params)))
    for name, t in model.params.items():
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)) + nb)
        buf.write(struct.pack("<B", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return buf.getvalue()


def model_from_checkpoint_bytes(raw: bytes, dtype=np.float32) -> GaitModel:
    from .data import FormatError

    if len(raw) < 18:
        raise FormatError("truncated checkpoint header", len(raw))
    magic, version, step, n_cfg = struct.unpack_from("<4sHQI", raw, 0)
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}", 0)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    off = 18
    meta = json.loads(raw[off : off + n_cfg])
    off += n_cfg
    cfg = ModelConfig.from_dict(meta["model"])
    (n_params,) = struct.unpack_from("<I", raw, off)
    off += 4
    params = {}
    for _ in range(n_params):
        (ln,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off : off + ln].decode()
        off += ln
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if shape else 1
        if off + 4 * count > len(raw):
            raise FormatError(f"truncated tensor {name}", off)
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
        params[name] = Tensor(arr.astype(dtype), requires_grad=True)
    parametrization = meta.get("parametrization", "mup")
    scales = mup_scales(cfg) if parametrization == "mup" else standard_scales(cfg)
    model = GaitModel(cfg, params, scales, parametrization)
    model.step = step
    return model


def save_checkpoint(model: GaitModel, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path: str | Path, dtype=np.float32) -> GaitModel:
    return model_from_checkpoint_bytes(Path(path).read_bytes(), dtype)

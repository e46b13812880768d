"""The hierarchical video classifier and its deformation-equipped block.

A clip becomes a token grid via strided patch embedding plus learned
absolute positions (one vector per time/row/column index, summed).  Stages
of pre-norm attention blocks follow; between stages the spatial grid is
halved by 2x2 average merging and projected to the next channel width.
Attention keys and values are average-pooled by a per-stage stride, which
keeps the stage-0 attention matrix narrow enough to feed the deformation
predictor.  Classification is global average pooling, a layer norm, and
one linear head.

Blocks listed in ModelConfig.geo_indices additionally predict a set of
warp parameters from their own attention output and resample their
features accordingly; all other blocks pass the attention output through
unchanged.  A fresh predictor emits exact identities, so an untrained
deformation block computes the same function as a plain one.

Parameter accounting (count_params, parameter_shapes) is analytic: it
enumerates names and shapes without allocating, and the model builder
cross-checks itself against that enumeration on every construction.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .diffcore import Parameter, ShapeError, Tensor, as_tensor, ops
from .predictor import (
    CLS_WIDTHS,
    PredictorState,
    predict_raw,
    predictor_parameter_shapes,
)
from .warp import TRANSFORM_KINDS, WarpConfig, warp_features

MLP_RATIO = 4
PREDICTOR_HEADS = 4
PIXEL_CHANNELS = 3
# Stem-norm scale floor: content tokens sit near unit RMS, empty-background
# tokens near zero; the floor separates the two regimes (see _add_positions).
STEM_SCALE_FLOOR = 0.25
POS_INIT_SCALE = 0.02


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    stage_depths: tuple = (1, 2, 11, 2)
    stage_channels: tuple = (96, 192, 384, 768)
    clip_shape: tuple = (16, 224, 224)
    patch_size: tuple = (2, 4, 4)
    geo_indices: frozenset = frozenset({0})
    transform_kind: str = "affine"
    spatial_enabled: bool = True
    temporal_enabled: bool = True
    num_classes: int = 101
    heads: tuple = (1, 2, 4, 8)
    kv_stride: tuple = ((2, 8, 8), (1, 4, 4), (1, 2, 2), (1, 1, 1))
    predictor_hidden: int = 768
    predictor_embed: int = 192
    fuse_attn: bool = True
    temporal_attn: bool = True

    def __post_init__(self):
        def seti(name, value):
            object.__setattr__(self, name, value)

        seti("stage_depths", tuple(int(d) for d in self.stage_depths))
        seti("stage_channels", tuple(int(c) for c in self.stage_channels))
        seti("clip_shape", tuple(int(e) for e in self.clip_shape))
        seti("patch_size", tuple(int(e) for e in self.patch_size))
        seti("geo_indices", frozenset(int(g) for g in self.geo_indices))
        seti("heads", tuple(int(h) for h in self.heads))
        seti("kv_stride", tuple(tuple(int(e) for e in s) for s in self.kv_stride))

        n = len(self.stage_depths)
        if not n:
            raise ShapeError("at least one stage is required")
        for name in ("stage_channels", "heads", "kv_stride"):
            if len(getattr(self, name)) != n:
                raise ShapeError(
                    f"{name} has {len(getattr(self, name))} entries "
                    f"for {n} stages"
                )
        if min(self.stage_depths) < 0:
            raise ShapeError(f"negative depth in {self.stage_depths}")
        total = sum(self.stage_depths)
        bad = [g for g in self.geo_indices if not 0 <= g < total]
        if bad:
            raise ShapeError(f"geo indices {sorted(bad)} outside [0, {total})")
        if len(self.clip_shape) != 3 or len(self.patch_size) != 3:
            raise ShapeError("clip_shape and patch_size must be (T, H, W)")
        for e, p in zip(self.clip_shape, self.patch_size):
            if p < 1 or e % p:
                raise ShapeError(
                    f"clip {self.clip_shape} not divisible by "
                    f"patch {self.patch_size}"
                )
        halvings = 2 ** (n - 1)
        _, h0, w0 = token_grid(self, 0)
        if h0 % halvings or w0 % halvings:
            raise ShapeError(
                f"token grid {h0}x{w0} cannot be halved {n - 1} times"
            )
        for s in range(n):
            grid = token_grid(self, s)
            stride = self.kv_stride[s]
            if len(stride) != 3 or min(stride) < 1:
                raise ShapeError(f"bad key-pooling stride {stride}")
            for e, st in zip(grid, stride):
                if e % st:
                    raise ShapeError(
                        f"stage {s} grid {grid} not divisible by "
                        f"key-pooling stride {stride}"
                    )
            if self.stage_channels[s] % self.heads[s]:
                raise ShapeError(
                    f"stage {s} width {self.stage_channels[s]} not "
                    f"divisible by {self.heads[s]} heads"
                )
        if self.transform_kind not in TRANSFORM_KINDS:
            raise ShapeError(f"unknown transform kind {self.transform_kind!r}")
        if self.num_classes < 2:
            raise ShapeError(f"need at least 2 classes, got {self.num_classes}")
        if self.predictor_embed % PREDICTOR_HEADS:
            raise ShapeError(
                f"predictor embed width {self.predictor_embed} not "
                f"divisible by {PREDICTOR_HEADS} heads"
            )
        for g in self.geo_indices:
            s = stage_of_block(self, g)
            _, h, w = token_grid(self, s)
            if min(h, w) < 3:
                raise ShapeError(
                    f"deformation block {g} sits on a {h}x{w} token grid; "
                    f"the predictor needs at least 3x3"
                )
        if self.geo_indices and not (self.spatial_enabled or self.temporal_enabled):
            raise ShapeError("deformation blocks need at least one warp branch")


def total_blocks(cfg: ModelConfig) -> int:
    return sum(cfg.stage_depths)


def stage_of_block(cfg: ModelConfig, g: int) -> int:
    if g < 0:
        raise ShapeError(f"block index {g} is negative")
    rest = g
    for s, depth in enumerate(cfg.stage_depths):
        if rest < depth:
            return s
        rest -= depth
    raise ShapeError(f"block index {g} outside [0, {total_blocks(cfg)})")


def token_grid(cfg: ModelConfig, stage: int):
    """Token extents (T', H', W') at the given stage."""
    t, h, w = (e // p for e, p in zip(cfg.clip_shape, cfg.patch_size))
    return t, h // 2 ** stage, w // 2 ** stage


def kv_count(cfg: ModelConfig, stage: int) -> int:
    """Pooled key/value token count N at the given stage."""
    grid = token_grid(cfg, stage)
    stride = cfg.kv_stride[stage]
    n = 1
    for e, st in zip(grid, stride):
        n *= e // st
    return n


def predictor_in_channels(cfg: ModelConfig, stage: int) -> int:
    c = cfg.stage_channels[stage]
    return c + kv_count(cfg, stage) if cfg.fuse_attn else c


# -- analytic parameter accounting ----------------------------------------------

def parameter_shapes(cfg: ModelConfig) -> dict:
    """Every parameter the model owns: name -> (shape, trainable)."""
    t0, h0, w0 = token_grid(cfg, 0)
    c0 = cfg.stage_channels[0]
    cn = cfg.stage_channels[-1]
    pv = cfg.patch_size[0] * cfg.patch_size[1] * cfg.patch_size[2] * PIXEL_CHANNELS
    rows = {
        "patch.w": ((pv, c0), True),
        "patch.b": ((c0,), True),
        "pos.t": ((t0, c0), True),
        "pos.h": ((h0, c0), True),
        "pos.w": ((w0, c0), True),
    }
    g = 0
    for s, depth in enumerate(cfg.stage_depths):
        c = cfg.stage_channels[s]
        for _ in range(depth):
            pre = f"block{g}."
            rows[pre + "ln1.g"] = ((c,), True)
            rows[pre + "ln1.b"] = ((c,), True)
            for nm in "qkvo":
                rows[pre + f"attn.w{nm}"] = ((c, c), True)
                rows[pre + f"attn.b{nm}"] = ((c,), True)
            rows[pre + "ln2.g"] = ((c,), True)
            rows[pre + "ln2.b"] = ((c,), True)
            rows[pre + "mlp.w1"] = ((c, MLP_RATIO * c), True)
            rows[pre + "mlp.b1"] = ((MLP_RATIO * c,), True)
            rows[pre + "mlp.w2"] = ((MLP_RATIO * c, c), True)
            rows[pre + "mlp.b2"] = ((c,), True)
            if g in cfg.geo_indices:
                sub = predictor_parameter_shapes(
                    predictor_in_channels(cfg, s), cfg.predictor_hidden,
                    cfg.predictor_embed, cfg.transform_kind)
                for name, row in sub.items():
                    rows[pre + "pred." + name] = row
            g += 1
        if s + 1 < len(cfg.stage_depths):
            rows[f"trans{s}.w"] = ((c, cfg.stage_channels[s + 1]), True)
            rows[f"trans{s}.b"] = ((cfg.stage_channels[s + 1],), True)
    rows["norm.g"] = ((cn,), True)
    rows["norm.b"] = ((cn,), True)
    rows["head.w"] = ((cn, cfg.num_classes), True)
    rows["head.b"] = ((cfg.num_classes,), True)
    return rows


def count_params(cfg: ModelConfig) -> int:
    """Exact scalar count of learnable parameters."""
    return sum(math.prod(shape)
               for shape, trainable in parameter_shapes(cfg).values()
               if trainable)


def estimate_flops(cfg: ModelConfig) -> int:
    """Multiply-accumulate census of one single-clip forward pass."""
    t0, h0, w0 = token_grid(cfg, 0)
    c0 = cfg.stage_channels[0]
    pv = cfg.patch_size[0] * cfg.patch_size[1] * cfg.patch_size[2] * PIXEL_CHANNELS
    total = t0 * h0 * w0 * pv * c0
    g = 0
    for s, depth in enumerate(cfg.stage_depths):
        t, h, w = token_grid(cfg, s)
        seq = t * h * w
        n = kv_count(cfg, s)
        c = cfg.stage_channels[s]
        per_block = (
            2 * seq * c * c          # query and output projections
            + 2 * n * c * c          # key and value projections
            + 2 * seq * n * c        # scores and weighted values
            + 2 * seq * c * MLP_RATIO * c
        )
        total += per_block * depth
        for _ in range(depth):
            if g in cfg.geo_indices:
                total += _predictor_flops(cfg, s, t, h, w, seq, c)
            g += 1
        if s + 1 < len(cfg.stage_depths):
            total += (seq // 4) * c * cfg.stage_channels[s + 1]
    total += cfg.stage_channels[-1] * cfg.num_classes
    return total


def _predictor_flops(cfg, s, t, h, w, seq, c):
    cin = predictor_in_channels(cfg, s)
    hid, emb = cfg.predictor_hidden, cfg.predictor_embed
    maps = t + 1
    h1, w1 = (h + 1) // 2, (w + 1) // 2
    h2, w2 = (h1 + 1) // 2, (w1 + 1) // 2
    flops = maps * h1 * w1 * 9 * cin * hid
    flops += maps * h2 * w2 * 9 * hid * emb
    flops += 2 * (4 * maps * emb * emb + 2 * maps * maps * emb)
    flops += maps * emb * (CLS_WIDTHS[cfg.transform_kind] + 6)
    # Resampling: 4 (bilinear) + 8 (trilinear) fused corner terms per cell.
    branches = int(cfg.spatial_enabled) * 4 + int(cfg.temporal_enabled) * 8
    return flops + branches * seq * c


# -- construction ----------------------------------------------------------------

class Model:
    """A config, its flat name -> Parameter table, and per-block predictors."""

    __slots__ = ("cfg", "params", "predictors", "warp_cfg")

    def __init__(self, cfg, params, predictors):
        self.cfg = cfg
        self.params = params
        self.predictors = predictors
        self.warp_cfg = WarpConfig(
            transform_kind=cfg.transform_kind,
            spatial_enabled=cfg.spatial_enabled,
            temporal_enabled=cfg.temporal_enabled,
        ) if cfg.geo_indices else None

    def named_parameters(self) -> dict:
        return dict(self.params)

    def trainable_parameters(self) -> dict:
        return {n: p for n, p in self.params.items() if p.trainable}


def init_model(cfg: ModelConfig, seed=0, dtype=np.float64) -> Model:
    rng = seed if isinstance(seed, np.random.Generator) \
        else np.random.default_rng(seed)
    params = {}

    def par(name, arr):
        params[name] = Parameter(np.asarray(arr, dtype))

    def dense(name, fan_in, shape):
        par(name, rng.standard_normal(shape) / np.sqrt(fan_in))

    t0, h0, w0 = token_grid(cfg, 0)
    c0 = cfg.stage_channels[0]
    pv = cfg.patch_size[0] * cfg.patch_size[1] * cfg.patch_size[2] * PIXEL_CHANNELS
    dense("patch.w", pv, (pv, c0))
    par("patch.b", np.zeros(c0))
    # Small position vectors: tokens over empty background stay near zero
    # through the floored stem norm, so they contribute almost nothing to
    # pooled features instead of stacking into a shared constant direction.
    par("pos.t", rng.standard_normal((t0, c0)) * POS_INIT_SCALE)
    par("pos.h", rng.standard_normal((h0, c0)) * POS_INIT_SCALE)
    par("pos.w", rng.standard_normal((w0, c0)) * POS_INIT_SCALE)

    predictors = {}
    g = 0
    for s, depth in enumerate(cfg.stage_depths):
        c = cfg.stage_channels[s]
        for _ in range(depth):
            pre = f"block{g}."
            par(pre + "ln1.g", np.ones(c))
            par(pre + "ln1.b", np.zeros(c))
            for nm in "qkv":
                dense(pre + f"attn.w{nm}", c, (c, c))
                par(pre + f"attn.b{nm}", np.zeros(c))
            # Zero residual-output projections make every block an exact
            # identity at the start; each branch fades in only once its
            # output weights have grown, which keeps plain gradient
            # descent stable without warmup.
            par(pre + "attn.wo", np.zeros((c, c)))
            par(pre + "attn.bo", np.zeros(c))
            par(pre + "ln2.g", np.ones(c))
            par(pre + "ln2.b", np.zeros(c))
            dense(pre + "mlp.w1", c, (c, MLP_RATIO * c))
            par(pre + "mlp.b1", np.zeros(MLP_RATIO * c))
            par(pre + "mlp.w2", np.zeros((MLP_RATIO * c, c)))
            par(pre + "mlp.b2", np.zeros(c))
            if g in cfg.geo_indices:
                state = PredictorState(
                    rng, predictor_in_channels(cfg, s),
                    kind=cfg.transform_kind,
                    hidden=cfg.predictor_hidden, embed=cfg.predictor_embed,
                    heads=PREDICTOR_HEADS, fuse_attn=cfg.fuse_attn,
                    temporal_attn=cfg.temporal_attn, dtype=dtype)
                predictors[g] = state
                params.update(state.named_parameters(pre + "pred."))
            g += 1
        if s + 1 < len(cfg.stage_depths):
            dense(f"trans{s}.w", c, (c, cfg.stage_channels[s + 1]))
            par(f"trans{s}.b", np.zeros(cfg.stage_channels[s + 1]))
    cn = cfg.stage_channels[-1]
    par("norm.g", np.ones(cn))
    par("norm.b", np.zeros(cn))
    # Zero logits at start: the first steps then carry pure label signal
    # instead of having to unlearn random projections of the features.
    par("head.w", np.zeros((cn, cfg.num_classes)))
    par("head.b", np.zeros(cfg.num_classes))

    expected = parameter_shapes(cfg)
    got = {name: (p.shape, p.trainable) for name, p in params.items()}
    if got != expected:
        drift = set(got) ^ set(expected) or {
            n for n in got if got[n] != expected[n]}
        raise ShapeError(f"parameter table drifted from its shape law: {drift}")
    return Model(cfg, params, predictors)


# -- forward pass ----------------------------------------------------------------

def patch_embed(clip, model: Model):
    """(B, T, H, W, 3) pixels -> (B, T', H', W', C0) tokens."""
    cfg = model.cfg
    clip = as_tensor(clip)
    if clip.ndim != 5 or clip.shape[1:4] != cfg.clip_shape \
            or clip.shape[-1] != PIXEL_CHANNELS:
        raise ShapeError(
            f"expected clips shaped (B, {cfg.clip_shape[0]}, "
            f"{cfg.clip_shape[1]}, {cfg.clip_shape[2]}, {PIXEL_CHANNELS}), "
            f"got {clip.shape}"
        )
    b = clip.shape[0]
    pt, ph, pw = cfg.patch_size
    t0, h0, w0 = token_grid(cfg, 0)
    x = ops.reshape(clip, (b, t0, pt, h0, ph, w0, pw, PIXEL_CHANNELS))
    x = ops.transpose(x, (0, 1, 3, 5, 2, 4, 6, 7))
    x = ops.reshape(x, (b, t0, h0, w0, pt * ph * pw * PIXEL_CHANNELS))
    return ops.linear(x, model.params["patch.w"], model.params["patch.b"])


def _add_positions(x, model: Model):
    p = model.params
    t0, h0, w0 = token_grid(model.cfg, 0)
    c0 = model.cfg.stage_channels[0]
    x = ops.add(x, ops.reshape(p["pos.t"], (t0, 1, 1, c0)))
    x = ops.add(x, ops.reshape(p["pos.h"], (h0, 1, c0)))
    x = ops.add(x, p["pos.w"])
    # Scale-floored RMS norm: tokens with ordinary content are rescaled to
    # roughly unit RMS, but tokens over empty background pass through almost
    # unchanged instead of being amplified to unit length.  The floor keeps
    # empty patches from flooding the token pool with large constant
    # vectors, and it bounds the backward pass (at most 1/STEM_SCALE_FLOOR)
    # where a plain norm would divide near-zero variance.
    ms = ops.mean(ops.mul(x, x), axis=-1, keepdims=True)
    floor = Tensor(np.asarray(STEM_SCALE_FLOOR**2, dtype=x.dtype))
    return ops.div(x, ops.sqrt(ops.add(ms, floor)))


def _pool_tokens(x, stride):
    """Average-pool (B, T, H, W, C) by per-axis stride into (B, N, C)."""
    b, t, h, w, c = x.shape
    st, sh, sw = stride
    x = ops.reshape(x, (b, t // st, st, h // sh, sh, w // sw, sw, c))
    x = ops.mean(x, axis=(2, 4, 6))
    return ops.reshape(x, (b, -1, c))


def global_info_aggregation(x, model: Model, g: int):
    """One attention block: (B, T, H, W, C) -> (features, attention matrix).

    Pre-norm multi-head attention with stride-pooled keys/values, then a
    pre-norm MLP, both residual.  The second output is the head-averaged
    post-softmax attention, reshaped to (B, T, H, W, N).
    """
    cfg = model.cfg
    s = stage_of_block(cfg, g)
    heads = cfg.heads[s]
    p = model.params
    pre = f"block{g}."
    b, t, h, w, c = x.shape
    seq = t * h * w
    dh = c // heads

    hn = ops.layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
    kv_in = _pool_tokens(hn, cfg.kv_stride[s])
    n = kv_in.shape[1]

    def split(tok, count):
        tok = ops.reshape(tok, (b, count, heads, dh))
        return ops.transpose(tok, (0, 2, 1, 3))

    q_in = ops.reshape(hn, (b, seq, c))
    q = split(ops.linear(q_in, p[pre + "attn.wq"], p[pre + "attn.bq"]), seq)
    k = split(ops.linear(kv_in, p[pre + "attn.wk"], p[pre + "attn.bk"]), n)
    v = split(ops.linear(kv_in, p[pre + "attn.wv"], p[pre + "attn.bv"]), n)
    scores = ops.mul(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))),
                     1.0 / np.sqrt(dh))
    weights = ops.softmax(scores, axis=-1)            # (B, heads, seq, N)
    ctx = ops.reshape(ops.transpose(ops.matmul(weights, v), (0, 2, 1, 3)),
                      (b, seq, c))
    ctx = ops.linear(ctx, p[pre + "attn.wo"], p[pre + "attn.bo"])
    y = ops.add(x, ops.reshape(ctx, (b, t, h, w, c)))

    h2 = ops.layer_norm(y, p[pre + "ln2.g"], p[pre + "ln2.b"])
    mid = ops.gelu(ops.linear(h2, p[pre + "mlp.w1"], p[pre + "mlp.b1"]))
    out = ops.add(y, ops.linear(mid, p[pre + "mlp.w2"], p[pre + "mlp.b2"]))

    amap = ops.reshape(ops.mean(weights, axis=1), (b, t, h, w, n))
    return out, amap


def _cls_for_warp(raw, kind):
    if kind == "affine":
        return ops.reshape(raw, raw.shape[:-1] + (3, 4))
    return raw


def geodeformer_block(x, model: Model, g: int):
    """Aggregate, predict a deformation, and warp the aggregated features.

    Returns (warped features, (per-frame parameters, cross-frame
    parameters)) so callers can inspect what the block emitted.
    """
    y, amap = global_info_aggregation(x, model, g)
    frames, cls_raw = predict_raw(y, amap, model.predictors[g])
    out = warp_features(y, frames, _cls_for_warp(cls_raw, model.cfg.transform_kind),
                        model.warp_cfg)
    return out, (frames, cls_raw)


def _transition(x, model: Model, s: int):
    b, t, h, w, c = x.shape
    x = ops.reshape(x, (b, t, h // 2, 2, w // 2, 2, c))
    x = ops.mean(x, axis=(3, 5))
    return ops.linear(x, model.params[f"trans{s}.w"], model.params[f"trans{s}.b"])


def model_forward(clip, model: Model, deformations=None):
    """Clip(s) to class logits: (T, H, W, 3) -> (num_classes,) or batched.

    When a dict is passed as `deformations`, each deformation block's
    emitted parameters are stored under its global block index as
    (theta_frames (B, T', 2, 3), theta_cls (B, K)).
    """
    cfg = model.cfg
    clip = as_tensor(clip)
    single = clip.ndim == 4
    if single:
        clip = ops.reshape(clip, (1,) + clip.shape)
    x = _add_positions(patch_embed(clip, model), model)
    g = 0
    for s, depth in enumerate(cfg.stage_depths):
        for _ in range(depth):
            if g in cfg.geo_indices:
                x, emitted = geodeformer_block(x, model, g)
                if deformations is not None:
                    deformations[g] = emitted
            else:
                x, _ = global_info_aggregation(x, model, g)
            g += 1
        if s + 1 < len(cfg.stage_depths):
            x = _transition(x, model, s)
    b = x.shape[0]
    feat = ops.mean(ops.reshape(x, (b, -1, x.shape[-1])), axis=1)
    feat = ops.layer_norm(feat, model.params["norm.g"], model.params["norm.b"])
    # Normed features have norm sqrt(C); the 1/sqrt(C) readout scale keeps
    # the loss curvature in the classifier O(1) regardless of width, so one
    # global learning rate serves both the head and the blocks.
    feat = ops.mul(feat, 1.0 / math.sqrt(cfg.stage_channels[-1]))
    logits = ops.linear(feat, model.params["head.w"], model.params["head.b"])
    return logits[0] if single else logits


# -- reference configurations ----------------------------------------------------

def default_config(**overrides) -> ModelConfig:
    """The full-size reference model (~38.8M parameters)."""
    return ModelConfig(**overrides)


def tiny_config(**overrides) -> ModelConfig:
    """Desk-scale deformation model (~270k parameters)."""
    base = dict(
        stage_depths=(1, 1), stage_channels=(32, 64),
        clip_shape=(8, 32, 32), patch_size=(2, 4, 4),
        geo_indices=frozenset({0}), num_classes=8,
        heads=(2, 4), kv_stride=((1, 2, 2), (1, 2, 2)),
        predictor_hidden=96, predictor_embed=48,
    )
    base.update(overrides)
    return ModelConfig(**base)


def tiny_baseline_config(**overrides) -> ModelConfig:
    """Plain model sized to match tiny_config's parameter count."""
    base = dict(
        stage_depths=(1, 1), stage_channels=(58, 116),
        clip_shape=(8, 32, 32), patch_size=(2, 4, 4),
        geo_indices=frozenset(), num_classes=8,
        heads=(2, 4), kv_stride=((1, 2, 2), (1, 2, 2)),
    )
    base.update(overrides)
    return ModelConfig(**base)


def micro_config(**overrides) -> ModelConfig:
    """Smallest differentiable end-to-end model (~3k parameters)."""
    base = dict(
        stage_depths=(1,), stage_channels=(8,),
        clip_shape=(2, 12, 12), patch_size=(1, 4, 4),
        geo_indices=frozenset({0}), num_classes=3,
        heads=(2,), kv_stride=((2, 1, 1),),
        predictor_hidden=6, predictor_embed=4,
    )
    base.update(overrides)
    return ModelConfig(**base)


# -- canonical config text -------------------------------------------------------

_CONFIG_FIELDS = tuple(f.name for f in dataclasses.fields(ModelConfig))


def config_text(cfg: ModelConfig) -> str:
    """Canonical one-key-per-line rendering; parse_config_text inverts it."""
    lines = []
    for name in _CONFIG_FIELDS:
        value = getattr(cfg, name)
        if name == "kv_stride":
            text = ",".join(":".join(str(e) for e in s) for s in value)
        elif name == "geo_indices":
            text = ",".join(str(g) for g in sorted(value))
        elif isinstance(value, tuple):
            text = ",".join(str(e) for e in value)
        elif isinstance(value, bool):
            text = "true" if value else "false"
        else:
            text = str(value)
        lines.append(f"{name}={text}")
    return "\n".join(lines) + "\n"


def _parse_field(name, text):
    if name == "kv_stride":
        return tuple(tuple(int(e) for e in s.split(":"))
                     for s in text.split(",") if s)
    if name == "geo_indices":
        return frozenset(int(g) for g in text.split(",") if g)
    if name in ("stage_depths", "stage_channels", "clip_shape",
                "patch_size", "heads"):
        return tuple(int(e) for e in text.split(",") if e)
    if name in ("spatial_enabled", "temporal_enabled", "fuse_attn",
                "temporal_attn"):
        if text not in ("true", "false"):
            raise ShapeError(f"boolean field {name} got {text!r}")
        return text == "true"
    if name == "transform_kind":
        return text
    return int(text)


def parse_config_text(text: str) -> ModelConfig:
    values = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ShapeError(f"expected key=value, got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in _CONFIG_FIELDS:
            raise ShapeError(f"unknown config field {key!r}")
        values[key] = _parse_field(key, raw.strip())
    missing = [n for n in _CONFIG_FIELDS if n not in values]
    if missing:
        raise ShapeError(f"config text is missing fields {missing}")
    return ModelConfig(**values)

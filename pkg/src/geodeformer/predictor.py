"""The deformation predictor: post-attention features in, warp parameters out.

Pipeline (widths from the reference configuration, all configurable):
fuse features with the attention matrix along channels, mean over frames
for the cls summary, share one conv stack (k=3, s=2, pad 1; twice; GELU)
plus adaptive average pooling across the T+1 token maps, run two 4-head
self-attention layers over the token sequence (residual, GELU after each,
no positional encoding), then two linear heads: one for the cross-frame
parameters, one shared across frames.

The final heads start at zero and the identity parameter values live in
fixed non-trainable biases, so a freshly initialized predictor emits the
exact identity deformation for every input: inserting an untrained block
cannot disturb the features it wraps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import Parameter, ShapeError, Tensor, as_tensor, ops
from .geometry import Affine2D, Affine3D, Focusing3D, Homography3D

CLS_KINDS = {"affine": Affine3D, "focusing": Focusing3D, "homography": Homography3D}
CLS_WIDTHS = {"affine": 12, "focusing": 6, "homography": 15}

_IDENTITY_CLS = {
    "affine": np.eye(3, 4).reshape(-1),
    "focusing": np.array([1.0, 1.0, 1.0, 0.0, 0.0, 0.0]),
    "homography": np.concatenate([np.eye(3, 4).reshape(-1), np.zeros(3)]),
}
_IDENTITY_FRAME = np.eye(2, 3).reshape(-1)


@dataclass
class DeformationSet:
    """One cross-frame parameter set plus one 2x3 set per frame."""

    theta_cls: object            # Affine3D | Focusing3D | Homography3D
    theta_frames: list           # T entries of Affine2D

    def __post_init__(self):
        if not isinstance(self.theta_cls, tuple(CLS_KINDS.values())):
            raise ShapeError(
                f"theta_cls must be one of {sorted(CLS_KINDS)}, "
                f"got {type(self.theta_cls).__name__}"
            )
        for f in self.theta_frames:
            if not isinstance(f, Affine2D):
                raise ShapeError("every frame parameter must be an Affine2D")

    @classmethod
    def identity(cls, t: int, kind: str = "affine"):
        return cls(CLS_KINDS[kind].identity(), [Affine2D.identity() for _ in range(t)])

    def __len__(self):
        return len(self.theta_frames)

    def all_finite(self) -> bool:
        if not np.all(np.isfinite(self.theta_cls.p.data)):
            return False
        return all(np.all(np.isfinite(f.p.data)) for f in self.theta_frames)


@dataclass
class FusedFeatures:
    """Channel-concatenated (features, attention) maps and their frame mean."""

    z: Tensor                    # (T, H', W', C+N)
    z_cls: Tensor                # (H', W', C+N)


class AttnLayer:
    """One multi-head self-attention layer's weights."""

    def __init__(self, rng, width: int, heads: int, dtype):
        if width % heads:
            raise ShapeError(f"width {width} not divisible by {heads} heads")
        self.heads = heads
        scale = 1.0 / np.sqrt(width)
        def w():
            return Parameter((rng.standard_normal((width, width)) * scale).astype(dtype))
        self.wq, self.wk, self.wv, self.wo = w(), w(), w(), w()
        self.bq = Parameter(np.zeros(width, dtype))
        self.bk = Parameter(np.zeros(width, dtype))
        self.bv = Parameter(np.zeros(width, dtype))
        self.bo = Parameter(np.zeros(width, dtype))

    def named_parameters(self, prefix: str) -> dict:
        return {
            f"{prefix}.wq": self.wq, f"{prefix}.bq": self.bq,
            f"{prefix}.wk": self.wk, f"{prefix}.bk": self.bk,
            f"{prefix}.wv": self.wv, f"{prefix}.bv": self.bv,
            f"{prefix}.wo": self.wo, f"{prefix}.bo": self.bo,
        }


def attend(x: Tensor, layer: AttnLayer):
    """Multi-head self-attention over (..., S, E) token sequences.

    Returns (updated tokens, head-averaged post-softmax attention weights);
    the weights have shape (..., S, S).
    """
    s, e = x.shape[-2], x.shape[-1]
    nh = layer.heads
    dh = e // nh
    lead = x.shape[:-2]

    def split_heads(v):
        v = ops.reshape(v, lead + (s, nh, dh))
        axes = tuple(range(len(lead))) + (x.ndim - 1, x.ndim - 2, x.ndim)
        return ops.transpose(v, axes)             # (..., nh, S, dh)

    q = split_heads(ops.linear(x, layer.wq, layer.bq))
    k = split_heads(ops.linear(x, layer.wk, layer.bk))
    v = split_heads(ops.linear(x, layer.wv, layer.bv))

    kt_axes = tuple(range(q.ndim - 2)) + (q.ndim - 1, q.ndim - 2)
    scores = ops.mul(ops.matmul(q, ops.transpose(k, kt_axes)), 1.0 / np.sqrt(dh))
    weights = ops.softmax(scores, axis=-1)        # (..., nh, S, S)
    mixed = ops.matmul(weights, v)                # (..., nh, S, dh)

    back_axes = tuple(range(len(lead))) + (x.ndim - 1, x.ndim - 2, x.ndim)
    merged = ops.reshape(ops.transpose(mixed, back_axes), lead + (s, e))
    out = ops.linear(merged, layer.wo, layer.bo)
    return out, ops.mean(weights, axis=len(lead))


class PredictorState:
    """Learnable weights of the deformation predictor plus its ablation flags."""

    def __init__(self, rng, in_channels: int, kind: str = "affine",
                 hidden: int = 768, embed: int = 192, heads: int = 4,
                 fuse_attn: bool = True, temporal_attn: bool = True,
                 dtype=np.float64):
        if kind not in CLS_WIDTHS:
            raise ShapeError(f"unknown transform kind {kind!r}")
        self.kind = kind
        self.fuse_attn = fuse_attn
        self.temporal_attn = temporal_attn
        self.in_channels = in_channels
        cls_width = CLS_WIDTHS[kind]

        def conv(cin, cout):
            scale = np.sqrt(2.0 / (9 * cin))
            return Parameter((rng.standard_normal((3, 3, cin, cout)) * scale).astype(dtype))

        self.conv1_w = conv(in_channels, hidden)
        self.conv1_b = Parameter(np.zeros(hidden, dtype))
        self.conv2_w = conv(hidden, embed)
        self.conv2_b = Parameter(np.zeros(embed, dtype))
        self.attn1 = AttnLayer(rng, embed, heads, dtype)
        self.attn2 = AttnLayer(rng, embed, heads, dtype)
        # Zero heads + constant identity biases: identity-at-init.
        self.fc_cls_w = Parameter(np.zeros((embed, cls_width), dtype))
        self.fc_cls_b = Parameter(np.zeros(cls_width, dtype))
        self.fc_frame_w = Parameter(np.zeros((embed, 6), dtype))
        self.fc_frame_b = Parameter(np.zeros(6, dtype))
        self.identity_bias_cls = Parameter(
            _IDENTITY_CLS[kind].astype(dtype), trainable=False)
        self.identity_bias_frame = Parameter(
            _IDENTITY_FRAME.astype(dtype), trainable=False)

    def named_parameters(self, prefix: str = "") -> dict:
        params = {
            f"{prefix}conv1.w": self.conv1_w, f"{prefix}conv1.b": self.conv1_b,
            f"{prefix}conv2.w": self.conv2_w, f"{prefix}conv2.b": self.conv2_b,
            f"{prefix}fc_cls.w": self.fc_cls_w, f"{prefix}fc_cls.b": self.fc_cls_b,
            f"{prefix}fc_frame.w": self.fc_frame_w,
            f"{prefix}fc_frame.b": self.fc_frame_b,
            f"{prefix}identity_bias.cls": self.identity_bias_cls,
            f"{prefix}identity_bias.frame": self.identity_bias_frame,
        }
        params.update(self.attn1.named_parameters(f"{prefix}attn1"))
        params.update(self.attn2.named_parameters(f"{prefix}attn2"))
        return params


def predictor_parameter_shapes(in_channels: int, hidden: int = 768,
                               embed: int = 192, kind: str = "affine"):
    """Name -> (shape, trainable) for a PredictorState, without allocating.

    Must stay in lockstep with PredictorState.named_parameters; the model
    builder cross-checks the two on every construction.
    """
    if kind not in CLS_WIDTHS:
        raise ShapeError(f"unknown transform kind {kind!r}")
    cls_width = CLS_WIDTHS[kind]
    rows = {
        "conv1.w": ((3, 3, in_channels, hidden), True),
        "conv1.b": ((hidden,), True),
        "conv2.w": ((3, 3, hidden, embed), True),
        "conv2.b": ((embed,), True),
        "fc_cls.w": ((embed, cls_width), True),
        "fc_cls.b": ((cls_width,), True),
        "fc_frame.w": ((embed, 6), True),
        "fc_frame.b": ((6,), True),
        "identity_bias.cls": ((cls_width,), False),
        "identity_bias.frame": ((6,), False),
    }
    for tag in ("attn1", "attn2"):
        for nm in "qkvo":
            rows[f"{tag}.w{nm}"] = ((embed, embed), True)
            rows[f"{tag}.b{nm}"] = ((embed,), True)
    return rows


def fuse_features(x_tilde, attn, use_attn: bool = True) -> FusedFeatures:
    """Concatenate features with the attention matrix along channels (Z),
    and average the frames for the cls summary (z_cls)."""
    x_tilde = as_tensor(x_tilde)
    if x_tilde.ndim != 4:
        raise ShapeError(f"expected one clip (T, H, W, C), got {x_tilde.shape}")
    if use_attn:
        attn = as_tensor(attn)
        if attn.ndim != 4 or attn.shape[:3] != x_tilde.shape[:3]:
            raise ShapeError(
                f"attention layout {attn.shape} does not align with "
                f"features {x_tilde.shape} over (T, H, W)"
            )
        z = ops.concat([x_tilde, attn], axis=-1)
    else:
        z = x_tilde
    return FusedFeatures(z=z, z_cls=ops.mean(z, axis=0))


def embed_token_maps(maps, state: PredictorState) -> Tensor:
    """Shared conv stack + pooling: (M, H', W', Cin) maps to (M, E) vectors."""
    maps = as_tensor(maps)
    h, w = maps.shape[-3], maps.shape[-2]
    if min(h, w) < 3:
        raise ShapeError(
            f"spatial extents {h}x{w} too small for the k=3 stack; "
            f"needs at least 3x3 token maps"
        )
    out = ops.gelu(ops.conv2d(maps, state.conv1_w, state.conv1_b, stride=2, pad=1))
    out = ops.gelu(ops.conv2d(out, state.conv2_w, state.conv2_b, stride=2, pad=1))
    return ops.adaptive_avg_pool2d(out)


def extract_frame_embeddings(fused: FusedFeatures, state: PredictorState) -> Tensor:
    """(T+1, E) embeddings: cls token first, then one per frame."""
    cls_map = ops.reshape(fused.z_cls, (1,) + fused.z_cls.shape)
    tokens = ops.concat([cls_map, fused.z], axis=0)
    return embed_token_maps(tokens, state)


def temporal_integrate(embeddings, state: PredictorState) -> Tensor:
    """Two residual self-attention layers over the (..., T+1, E) sequence."""
    x = as_tensor(embeddings)
    if not state.temporal_attn:
        return x
    for layer in (state.attn1, state.attn2):
        out, _ = attend(x, layer)
        x = ops.gelu(ops.add(x, out))
    return x


def emit_params_raw(hstar, state: PredictorState):
    """Linear heads over (..., T+1, E): frame parameters and cls parameters.

    Returns (theta_frames (..., T, 2, 3), theta_cls (..., cls_width)).
    """
    hstar = as_tensor(hstar)
    h_cls = hstar[..., 0, :]
    h_frames = hstar[..., 1:, :]
    theta_cls = ops.add(
        ops.linear(h_cls, state.fc_cls_w, state.fc_cls_b),
        state.identity_bias_cls,
    )
    flat = ops.add(
        ops.linear(h_frames, state.fc_frame_w, state.fc_frame_b),
        state.identity_bias_frame,
    )
    theta_frames = ops.reshape(flat, flat.shape[:-1] + (2, 3))
    return theta_frames, theta_cls


def _wrap_cls(theta_cls: Tensor, kind: str):
    if kind == "affine":
        return Affine3D(ops.reshape(theta_cls, (3, 4)))
    return CLS_KINDS[kind](theta_cls)


def emit_params(hstar, state: PredictorState) -> DeformationSet:
    """Per-clip heads: (T+1, E) embeddings to a DeformationSet."""
    theta_frames, theta_cls = emit_params_raw(hstar, state)
    t = theta_frames.shape[0]
    return DeformationSet(
        theta_cls=_wrap_cls(theta_cls, state.kind),
        theta_frames=[Affine2D(theta_frames[k]) for k in range(t)],
    )


def predict(x_tilde, attn, state: PredictorState) -> DeformationSet:
    """Full predictor on one clip: fuse, embed, integrate, emit."""
    fused = fuse_features(x_tilde, attn, use_attn=state.fuse_attn)
    embeddings = extract_frame_embeddings(fused, state)
    hstar = temporal_integrate(embeddings, state)
    return emit_params(hstar, state)


def predict_raw(x_tilde, attn, state: PredictorState):
    """Batched predictor: (B, T, H', W', C) [+ (B, T, H', W', N)] in,
    (theta_frames (B, T, 2, 3), theta_cls (B, cls_width)) out."""
    x_tilde = as_tensor(x_tilde)
    if x_tilde.ndim != 5:
        raise ShapeError(f"expected (B, T, H, W, C), got {x_tilde.shape}")
    b, t, h, w, _ = x_tilde.shape
    if state.fuse_attn:
        attn = as_tensor(attn)
        if attn.shape[:4] != (b, t, h, w):
            raise ShapeError(
                f"attention layout {attn.shape} does not align with "
                f"features {x_tilde.shape} over (B, T, H, W)"
            )
        z = ops.concat([x_tilde, attn], axis=-1)
    else:
        z = x_tilde
    z_cls = ops.mean(z, axis=1, keepdims=True)          # (B, 1, H, W, Cin)
    tokens = ops.concat([z_cls, z], axis=1)             # (B, T+1, H, W, Cin)
    cin = tokens.shape[-1]
    flat = ops.reshape(tokens, (b * (t + 1), h, w, cin))
    embeddings = ops.reshape(embed_token_maps(flat, state), (b, t + 1, -1))
    hstar = temporal_integrate(embeddings, state)
    return emit_params_raw(hstar, state)

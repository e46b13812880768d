"""Differentiable resampling of video features along mapped coordinates.

Two samplers: per-frame bilinear (4 lattice neighbors) and cross-frame
trilinear (8 neighbors). Coordinates are normalized as in
:mod:`geodeformer.geometry`; index conversion is the exact inverse of that
normalization, so identity coordinates land on sample centers and reproduce
the input. Out-of-bounds samples zero-fill with a linear fade: a neighbor
outside the lattice contributes value 0 at its normal weight, so features
slide off the edge smoothly instead of clamping to it.

Both samplers differentiate w.r.t. the features and the coordinates; the
scatter side of the backward pass uses index-ordered accumulation, keeping
gradients bit-deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import ShapeError, Tensor, as_tensor, from_op, ops
from .geometry import (
    SampleGrid,
    make_grid,
    map_affine2d_frames,
    map_affine3d,
    map_focusing,
    map_homography,
)

TRANSFORM_KINDS = ("affine", "focusing", "homography")


@dataclass(frozen=True)
class WarpConfig:
    transform_kind: str = "affine"
    spatial_enabled: bool = True
    temporal_enabled: bool = True
    oob_policy: str = "zero-fill"

    def __post_init__(self):
        if self.transform_kind not in TRANSFORM_KINDS:
            raise ShapeError(
                f"transform_kind must be one of {TRANSFORM_KINDS}, "
                f"got {self.transform_kind!r}"
            )
        if not (self.spatial_enabled or self.temporal_enabled):
            raise ShapeError("at least one of spatial/temporal must be enabled")
        if self.oob_policy != "zero-fill":
            raise ShapeError("zero-fill is the only out-of-bounds policy")


def _to_index(c: np.ndarray, n: int) -> np.ndarray:
    # Inverse of the [-1, 1] normalization. A size-1 axis collapses to index
    # 0 for any coordinate: no second sample exists to define a fade slope.
    return (c + 1.0) * (0.5 * (n - 1))


def _corner(idx0: np.ndarray, offset: int, n: int):
    """Integer corner index, its validity mask, and a gather-safe clipped copy."""
    idx = idx0 + offset
    valid = (idx >= 0) & (idx < n)
    return np.clip(idx, 0, n - 1), valid


def sample_bilinear(frames, coords) -> Tensor:
    """Resample each frame at (x, y) source coordinates.

    frames: (..., H, W, C); coords: (..., Ho, Wo, 2) with matching leading
    axes, last axis (x, y). Every output element blends the 4 same-frame
    neighbors of its source point.
    """
    frames = as_tensor(frames)
    coords = as_tensor(coords)
    if frames.ndim < 3 or coords.ndim < 3 or coords.shape[-1] != 2:
        raise ShapeError(
            f"bilinear wants frames (..., H, W, C) and coords (..., Ho, Wo, 2), "
            f"got {frames.shape} and {coords.shape}"
        )
    lead = frames.shape[:-3]
    if coords.shape[:-3] != lead:
        raise ShapeError(
            f"leading axes differ: frames {lead}, coords {coords.shape[:-3]}"
        )
    h, w, ch = frames.shape[-3:]
    ho, wo = coords.shape[-3:-1]
    lsize = int(np.prod(lead, dtype=np.int64)) if lead else 1

    src = frames.data.reshape(lsize * h * w, ch)
    cx = coords.data[..., 0].reshape(lsize, ho, wo)
    cy = coords.data[..., 1].reshape(lsize, ho, wo)
    ix = _to_index(cx, w)
    iy = _to_index(cy, h)
    x0 = np.floor(ix).astype(np.int64)
    y0 = np.floor(iy).astype(np.int64)
    fx = ix - x0
    fy = iy - y0
    base = np.arange(lsize, dtype=np.int64)[:, None, None] * (h * w)

    out = np.zeros((lsize, ho, wo, ch), dtype=frames.dtype)
    corner_cache = []
    for dy in (0, 1):
        yc, yv = _corner(y0, dy, h)
        wy = fy if dy else 1.0 - fy
        for dx in (0, 1):
            xc, xv = _corner(x0, dx, w)
            wx = fx if dx else 1.0 - fx
            flat = base + yc * w + xc
            weight = (wx * wy) * (xv & yv)
            vals = src[flat]
            out += weight[..., None] * vals
            corner_cache.append((flat, xv & yv, dx, dy))

    out = out.reshape(lead + (ho, wo, ch))

    def vjp(g):
        g = g.reshape(lsize, ho, wo, ch)
        gsrc = np.zeros_like(src)
        gfx = np.zeros((lsize, ho, wo))
        gfy = np.zeros_like(gfx)
        for flat, valid, dx, dy in corner_cache:
            wx = fx if dx else 1.0 - fx
            wy = fy if dy else 1.0 - fy
            np.add.at(gsrc, flat.reshape(-1),
                      ((wx * wy * valid)[..., None] * g).reshape(-1, ch))
            gv = np.einsum("lijc,lijc->lij", g, src[flat]) * valid
            gfx += (1.0 if dx else -1.0) * wy * gv
            gfy += (1.0 if dy else -1.0) * wx * gv
        gcoords = np.empty_like(coords.data)
        gcoords[..., 0] = (gfx * (0.5 * (w - 1))).reshape(lead + (ho, wo))
        gcoords[..., 1] = (gfy * (0.5 * (h - 1))).reshape(lead + (ho, wo))
        return (gsrc.reshape(frames.shape), gcoords)

    return from_op(out, (frames, coords), vjp)


def sample_trilinear(video, coords) -> Tensor:
    """Resample a clip at (z, x, y) source coordinates.

    video: (..., T, H, W, C); coords: (..., To, Ho, Wo, 3) with matching
    leading axes, last axis (z, x, y). Every output element blends the 8
    spatio-temporal neighbors of its source point.
    """
    video = as_tensor(video)
    coords = as_tensor(coords)
    if video.ndim < 4 or coords.ndim < 4 or coords.shape[-1] != 3:
        raise ShapeError(
            f"trilinear wants video (..., T, H, W, C) and coords "
            f"(..., To, Ho, Wo, 3), got {video.shape} and {coords.shape}"
        )
    lead = video.shape[:-4]
    if coords.shape[:-4] != lead:
        raise ShapeError(
            f"leading axes differ: video {lead}, coords {coords.shape[:-4]}"
        )
    t, h, w, ch = video.shape[-4:]
    to, ho, wo = coords.shape[-4:-1]
    lsize = int(np.prod(lead, dtype=np.int64)) if lead else 1

    src = video.data.reshape(lsize * t * h * w, ch)
    cz = coords.data[..., 0].reshape(lsize, to, ho, wo)
    cx = coords.data[..., 1].reshape(lsize, to, ho, wo)
    cy = coords.data[..., 2].reshape(lsize, to, ho, wo)
    iz = _to_index(cz, t)
    ix = _to_index(cx, w)
    iy = _to_index(cy, h)
    z0 = np.floor(iz).astype(np.int64)
    x0 = np.floor(ix).astype(np.int64)
    y0 = np.floor(iy).astype(np.int64)
    fz = iz - z0
    fx = ix - x0
    fy = iy - y0
    base = np.arange(lsize, dtype=np.int64)[:, None, None, None] * (t * h * w)

    out = np.zeros((lsize, to, ho, wo, ch), dtype=video.dtype)
    corner_cache = []
    for dz in (0, 1):
        zc, zv = _corner(z0, dz, t)
        wz = fz if dz else 1.0 - fz
        for dy in (0, 1):
            yc, yv = _corner(y0, dy, h)
            wy = fy if dy else 1.0 - fy
            for dx in (0, 1):
                xc, xv = _corner(x0, dx, w)
                wx = fx if dx else 1.0 - fx
                flat = base + (zc * h + yc) * w + xc
                valid = zv & yv & xv
                weight = (wz * wy * wx) * valid
                out += weight[..., None] * src[flat]
                corner_cache.append((flat, valid, dz, dy, dx))

    out = out.reshape(lead + (to, ho, wo, ch))

    def vjp(g):
        g = g.reshape(lsize, to, ho, wo, ch)
        gsrc = np.zeros_like(src)
        gfz = np.zeros((lsize, to, ho, wo))
        gfx = np.zeros_like(gfz)
        gfy = np.zeros_like(gfz)
        for flat, valid, dz, dy, dx in corner_cache:
            wz = fz if dz else 1.0 - fz
            wy = fy if dy else 1.0 - fy
            wx = fx if dx else 1.0 - fx
            np.add.at(gsrc, flat.reshape(-1),
                      ((wz * wy * wx * valid)[..., None] * g).reshape(-1, ch))
            gv = np.einsum("ltijc,ltijc->ltij", g, src[flat]) * valid
            gfz += (1.0 if dz else -1.0) * wy * wx * gv
            gfy += (1.0 if dy else -1.0) * wz * wx * gv
            gfx += (1.0 if dx else -1.0) * wz * wy * gv
        gcoords = np.empty_like(coords.data)
        gcoords[..., 0] = (gfz * (0.5 * (t - 1))).reshape(lead + (to, ho, wo))
        gcoords[..., 1] = (gfx * (0.5 * (w - 1))).reshape(lead + (to, ho, wo))
        gcoords[..., 2] = (gfy * (0.5 * (h - 1))).reshape(lead + (to, ho, wo))
        return (gsrc.reshape(video.shape), gcoords)

    return from_op(out, (video, coords), vjp)


_GRIDS: dict = {}


def _grid_for(t: int, h: int, w: int) -> SampleGrid:
    key = (t, h, w)
    if key not in _GRIDS:
        _GRIDS[key] = make_grid(t, h, w)
    return _GRIDS[key]


_CLS_MAPS = {
    "affine": map_affine3d,
    "focusing": map_focusing,
    "homography": map_homography,
}


def warp_features(features, theta_frames, theta_cls, cfg: WarpConfig) -> Tensor:
    """Warp (..., T, H, W, C) features by stacked parameter tensors.

    theta_frames: (..., T, 2, 3); theta_cls: trailing shape per
    cfg.transform_kind — (3, 4) affine, (6,) focusing, (15,) homography.
    Both branches resample the SAME input features; enabled branches'
    sampled values are averaged (a lone branch passes through unhalved).
    """
    features = as_tensor(features)
    if features.ndim < 4:
        raise ShapeError(f"features must be (..., T, H, W, C), got {features.shape}")
    t, h, w, _ = features.shape[-4:]
    grid = _grid_for(t, h, w)

    branches = []
    if cfg.spatial_enabled:
        theta_frames = as_tensor(theta_frames)
        if theta_frames.shape[-3:] != (t, 2, 3):
            raise ShapeError(
                f"need one 2x3 parameter set per frame: features have {t} "
                f"frames, parameters are {theta_frames.shape}"
            )
        coords = map_affine2d_frames(theta_frames, grid)
        branches.append(sample_bilinear(features, coords))
    if cfg.temporal_enabled:
        coords = _CLS_MAPS[cfg.transform_kind](theta_cls, grid)
        branches.append(sample_trilinear(features, coords))

    if len(branches) == 1:
        return branches[0]
    return ops.mul(ops.add(branches[0], branches[1]), 0.5)


def warp_block(features, defs, cfg: WarpConfig) -> Tensor:
    """Warp one clip (T, H, W, C) by a DeformationSet, averaging branches."""
    features = as_tensor(features)
    if features.ndim != 4:
        raise ShapeError(f"expected one clip (T, H, W, C), got {features.shape}")
    t = features.shape[0]
    if len(defs.theta_frames) != t:
        raise ShapeError(
            f"deformation set carries {len(defs.theta_frames)} frame "
            f"parameters but the clip has {t} frames"
        )
    frames_p = ops.stack([f.p for f in defs.theta_frames], axis=0)
    return warp_features(features, frames_p, defs.theta_cls.p, cfg)

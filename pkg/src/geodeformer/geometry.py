"""Transformation parameterizations and coordinate-mapping functions.

Coordinates are normalized to [-1, 1] with the endpoints at the outermost
sample centers: index k of an axis with N samples sits at -1 + 2k/(N-1)
(0 when N == 1). Identity parameters therefore map every grid element to
itself at any resolution. Grid triples are stored (z, x, y): temporal axis
first, then column, then row.

All maps are built from the differentiable primitive set, so gradients
flow from mapped coordinates back to the parameters that produced them.
"""

from __future__ import annotations

import numpy as np

from .diffcore import ShapeError, Tensor, as_tensor, ops

HOMOGRAPHY_EPS = 1e-4


def lin(k: int, n: int) -> float:
    """Normalized coordinate of sample k on an axis of n samples."""
    if n <= 1:
        return 0.0
    return -1.0 + 2.0 * k / (n - 1)


def _axis(n: int) -> np.ndarray:
    if n <= 1:
        return np.zeros(max(n, 0))
    a = -1.0 + 2.0 * np.arange(n) / (n - 1)
    # Antisymmetrize so mirrored indices get exactly opposite coordinates;
    # per-entry rounding of 2k/(n-1) alone can break that by one ulp.
    return (a - a[::-1]) / 2.0


class SampleGrid:
    """The lattice of output coordinates over a T x H x W clip."""

    def __init__(self, t: int, h: int, w: int):
        if t < 1 or h < 1 or w < 1:
            raise ShapeError(f"grid extents must be positive, got ({t},{h},{w})")
        self.extents = (t, h, w)
        z = _axis(t)[:, None, None]
        y = _axis(h)[None, :, None]
        x = _axis(w)[None, None, :]
        coords = np.empty((t, h, w, 3))
        coords[..., 0] = z
        coords[..., 1] = x
        coords[..., 2] = y
        coords.flags.writeable = False
        self.coords = coords

    def homogeneous(self) -> np.ndarray:
        """All grid triples with a trailing 1: (T*H*W, 4) rows (z, x, y, 1)."""
        t, h, w = self.extents
        out = np.ones((t * h * w, 4))
        out[:, :3] = self.coords.reshape(-1, 3)
        return out

    def frame_homogeneous(self) -> np.ndarray:
        """One frame's spatial pairs with a trailing 1: (H*W, 3) rows (x, y, 1)."""
        _, h, w = self.extents
        out = np.ones((h * w, 3))
        out[:, :2] = self.coords[0, :, :, 1:].reshape(-1, 2)
        return out


def make_grid(t: int, h: int, w: int) -> SampleGrid:
    return SampleGrid(t, h, w)


class _ParamSet:
    """Fixed-shape parameter bundle; ``p`` may be a live graph node."""

    shape: tuple = ()
    n_params: int = 0

    def __init__(self, p):
        p = as_tensor(p)
        if p.shape != self.shape:
            raise ShapeError(
                f"{type(self).__name__} wants shape {self.shape}, got {p.shape}"
            )
        self.p = p

    @classmethod
    def identity(cls):
        return cls(cls._identity_values())

    def __repr__(self):
        return f"{type(self).__name__}({np.array2string(self.p.data, precision=4)})"


class Affine2D(_ParamSet):
    """Frame-wise map [[p1,p2,p3],[p4,p5,p6]] applied to (x, y, 1)."""

    shape = (2, 3)
    n_params = 6

    @staticmethod
    def _identity_values():
        return np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


class Affine3D(_ParamSet):
    """Cross-frame 3x4 map applied to (z, x, y, 1)."""

    shape = (3, 4)
    n_params = 12

    @staticmethod
    def _identity_values():
        return np.eye(3, 4)


class Focusing3D(_ParamSet):
    """Diagonal scales (p0,p1,p2) plus translations (p3,p4,p5): crop/zoom/shift."""

    shape = (6,)
    n_params = 6

    @staticmethod
    def _identity_values():
        return np.array([1.0, 1.0, 1.0, 0.0, 0.0, 0.0])


class Homography3D(_ParamSet):
    """15 free entries of a 4x4 projective map; the bottom-right entry is 1."""

    shape = (15,)
    n_params = 15

    @staticmethod
    def _identity_values():
        return np.array([1.0, 0, 0, 0, 0, 1.0, 0, 0, 0, 0, 1.0, 0, 0, 0, 0])


def _theta(value, kind) -> Tensor:
    """Accept a wrapper of type ``kind`` or a bare tensor of matching shape."""
    if isinstance(value, kind):
        return value.p
    value = as_tensor(value)
    if value.shape[-len(kind.shape):] != kind.shape:
        raise ShapeError(
            f"{kind.__name__} parameters want trailing shape {kind.shape}, "
            f"got {value.shape}"
        )
    return value


def _swap_last(theta: Tensor) -> Tensor:
    axes = tuple(range(theta.ndim - 2)) + (theta.ndim - 1, theta.ndim - 2)
    return ops.transpose(theta, axes)


def map_affine2d(theta, grid: SampleGrid, frame: int) -> Tensor:
    """Source (x^s, y^s) for one frame: theta . (x^o, y^o, 1)."""
    t, h, w = grid.extents
    if not 0 <= frame < t:
        raise ShapeError(f"frame {frame} out of range for {t} frames")
    theta = _theta(theta, Affine2D)
    hom = Tensor(grid.frame_homogeneous())
    out = ops.matmul(hom, _swap_last(theta))
    return ops.reshape(out, theta.shape[:-2] + (h, w, 2))


def map_affine2d_frames(thetas, grid: SampleGrid) -> Tensor:
    """Per-frame sources for a whole clip: thetas has trailing shape (T, 2, 3)."""
    t, h, w = grid.extents
    thetas = as_tensor(thetas)
    if thetas.shape[-3:] != (t, 2, 3):
        raise ShapeError(
            f"per-frame parameters want trailing shape ({t}, 2, 3), "
            f"got {thetas.shape}"
        )
    hom = Tensor(grid.frame_homogeneous())
    out = ops.matmul(hom, _swap_last(thetas))      # (..., T, H*W, 2)
    return ops.reshape(out, thetas.shape[:-2] + (h, w, 2))


def map_affine3d(theta, grid: SampleGrid) -> Tensor:
    """Source (z^s, x^s, y^s) per grid element: theta . (z^o, x^o, y^o, 1)."""
    t, h, w = grid.extents
    theta = _theta(theta, Affine3D)
    hom = Tensor(grid.homogeneous())
    out = ops.matmul(hom, _swap_last(theta))
    return ops.reshape(out, theta.shape[:-2] + (t, h, w, 3))


def expand_focusing(p) -> Tensor:
    """Focusing parameters as the equivalent 3x4 map (zeros off-diagonal)."""
    p = _theta(p, Focusing3D)
    zero = p[..., 0] * 0.0
    rows = [
        ops.stack([p[..., 0], zero, zero, p[..., 3]], axis=-1),
        ops.stack([zero, p[..., 1], zero, p[..., 4]], axis=-1),
        ops.stack([zero, zero, p[..., 2], p[..., 5]], axis=-1),
    ]
    return ops.stack(rows, axis=-2)


def map_focusing(theta, grid: SampleGrid) -> Tensor:
    return map_affine3d(expand_focusing(theta), grid)


def map_homography(theta, grid: SampleGrid, eps: float = HOMOGRAPHY_EPS) -> Tensor:
    """Projective map: 4-vector theta . (z,x,y,1), then divide by the guarded m.

    The denominator is replaced by sign(m) * max(|m|, eps) so the map stays
    total and differentiable; the sign is treated as a constant.
    """
    if eps <= 0:
        raise ShapeError(f"eps must be positive, got {eps}")
    t, h, w = grid.extents
    p = _theta(theta, Homography3D)
    affine = ops.reshape(p[..., :12], p.shape[:-1] + (3, 4))
    one = p[..., 0:1] * 0.0 + 1.0
    bottom = ops.reshape(
        ops.concat([p[..., 12:15], one], axis=-1), p.shape[:-1] + (1, 4)
    )
    matrix = ops.concat([affine, bottom], axis=-2)
    hom = Tensor(grid.homogeneous())
    out = ops.matmul(hom, _swap_last(matrix))      # (..., T*H*W, 4)
    zxy = out[..., :3]
    m = out[..., 3:4]
    sign = Tensor(np.where(m.data >= 0.0, 1.0, -1.0))
    guarded = ops.mul(ops.maximum(ops.absval(m), eps), sign)
    mapped = ops.div(zxy, guarded)
    return ops.reshape(mapped, p.shape[:-1] + (t, h, w, 3))


def compose_affine2d(a, b) -> Affine2D:
    """The map equal to applying b first, then a (homogeneous 3x3 product)."""
    pa = _theta(a, Affine2D)
    pb = _theta(b, Affine2D)
    lin_part = ops.matmul(pa[:, :2], pb)           # [A2.B2 | A2.tb]
    shift = ops.reshape(lin_part[:, 2] + pa[:, 2], (2, 1))
    return Affine2D(ops.concat([lin_part[:, :2], shift], axis=1))

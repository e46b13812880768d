"""Named finite-difference audit units over the differentiable stack.

Each unit rebuilds a small real-64 problem from a seed, compares the
analytic backward pass against central finite differences, and reports
the worst entrywise error together with the index it occurred at. The
registry covers the coordinate maps (gradients w.r.t. their parameters),
both samplers (w.r.t. features and w.r.t. the parameters behind the
sampling grid), the deformation predictor, and a two-stage end-to-end
model small enough to probe every weight.

Samplers are looked up through ``SAMPLERS`` at call time so a test can
swap in a deliberately broken backward and watch the unit fail (negative
control for the harness itself).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import warp
from .blocks import ModelConfig, count_params, init_model, model_forward
from .diffcore import Parameter, Tensor, backward, no_grad, ops
from .diffcore.fdcheck import finite_diff_grad
from .geometry import (
    Affine2D,
    Affine3D,
    Focusing3D,
    Homography3D,
    make_grid,
    map_affine2d_frames,
    map_affine3d,
    map_focusing,
    map_homography,
)
from .predictor import PredictorState, predict_raw

UNIT_TOL = 1e-5
MODEL_TOL = 1e-4

SAMPLERS = {
    "bilinear": warp.sample_bilinear,
    "trilinear": warp.sample_trilinear,
}


@dataclass(frozen=True)
class UnitReport:
    unit: str
    seed: int
    error: float
    index: tuple
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.error <= self.tolerance

    def line(self) -> str:
        state = "ok" if self.ok else "FAIL"
        return (f"{self.unit:<28} seed {self.seed}: worst {self.error:.3e} "
                f"at {self.index} (tol {self.tolerance:.0e}) {state}")


def _worst_entry(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64)
    f = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0, ()
    err = np.abs(a - f) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(f)))
    flat = int(err.argmax())
    return float(err.reshape(-1)[flat]), tuple(
        int(i) for i in np.unravel_index(flat, err.shape))


def _input_check(fn, x0: np.ndarray):
    """Worst (error, index) of d fn / d x against finite differences."""
    leaf = Parameter(np.array(x0, dtype=np.float64))
    leaf.zero_grad()
    backward(fn(leaf))
    numeric = finite_diff_grad(fn, Tensor(leaf.data.copy()))
    return _worst_entry(leaf.grad, numeric.data)


def _param_check(params: dict, loss_fn):
    """Worst (error, (name, *index)) over a named Parameter table."""
    for p in params.values():
        p.zero_grad()
    backward(loss_fn())
    analytic = {name: p.grad.copy() for name, p in params.items()}

    worst, where = 0.0, ("",)
    for name, p in params.items():
        def probe(values, p=p):
            saved = p.data.copy()
            p.assign(values.data)
            try:
                with no_grad():
                    return loss_fn()
            finally:
                p.assign(saved)

        numeric = finite_diff_grad(probe, Tensor(p.data.copy()))
        err, idx = _worst_entry(analytic[name], numeric.data)
        if err >= worst:
            worst, where = err, (name,) + idx
    return worst, where


def _weights(rng, shape) -> Tensor:
    return Tensor(rng.standard_normal(shape))


# -- coordinate-map units ----------------------------------------------------------


def _unit_affine2d(seed):
    rng = np.random.default_rng((seed, 1))
    grid = make_grid(2, 4, 5)
    theta = np.tile(Affine2D._identity_values(), (2, 1, 1))
    theta += rng.standard_normal(theta.shape) * 0.2
    w = _weights(rng, (2, 4, 5, 2))
    return _input_check(
        lambda p: ops.mean(ops.mul(map_affine2d_frames(p, grid), w)), theta)


def _unit_affine3d(seed):
    rng = np.random.default_rng((seed, 2))
    grid = make_grid(3, 4, 5)
    theta = Affine3D._identity_values() + rng.standard_normal((3, 4)) * 0.2
    w = _weights(rng, (3, 4, 5, 3))
    return _input_check(
        lambda p: ops.mean(ops.mul(map_affine3d(p, grid), w)), theta)


def _unit_focusing(seed):
    rng = np.random.default_rng((seed, 3))
    grid = make_grid(3, 4, 5)
    theta = Focusing3D._identity_values() + rng.standard_normal(6) * 0.2
    w = _weights(rng, (3, 4, 5, 3))
    return _input_check(
        lambda p: ops.mean(ops.mul(map_focusing(p, grid), w)), theta)


def _unit_homography(seed):
    rng = np.random.default_rng((seed, 4))
    grid = make_grid(3, 4, 5)
    theta = Homography3D._identity_values() + rng.standard_normal(15) * 0.05
    w = _weights(rng, (3, 4, 5, 3))
    return _input_check(
        lambda p: ops.mean(ops.mul(map_homography(p, grid), w)), theta)


# -- sampler units -----------------------------------------------------------------
#
# Interpolation is piecewise linear in the sampling coordinates: the
# derivative jumps where a point crosses a pixel boundary, and finite
# differences are meaningless on the jump itself. The parameter bases
# below are nudged until every mapped point sits well clear of integer
# index positions (and of the clamped border), which keeps the +-1e-5
# probes on a single linear piece.

_KINK_MARGIN = 1e-3


def _frac_distance(coords, extents):
    """Distance of mapped points to the nearest interpolation kink."""
    dist = np.inf
    trailing = coords.shape[-1]
    sizes = extents[-trailing:] if trailing == 2 else extents
    if trailing == 2:
        sizes = (extents[2], extents[1])       # (x, y) order
    else:
        sizes = (extents[0], extents[2], extents[1])   # (z, x, y)
    for k, n in enumerate(sizes):
        idx = (coords[..., k] + 1.0) * 0.5 * (n - 1)
        dist = min(dist, float(np.abs(idx - np.round(idx)).min()))
    return dist


def _settle(base, mapper, grid):
    """Shift the translation entries until no point straddles a kink.

    A pure translation moves every mapped point by the same amount, so a
    few unequal nudges per axis always find a clear placement."""
    base = np.array(base, dtype=np.float64)
    axes = 1.0 + np.arange(base.shape[-2])
    for attempt in range(64):
        theta = base.copy()
        theta[..., -1] += (attempt % 9 - 4) * 0.0023 * axes * (1 + attempt // 9)
        with no_grad():
            coords = mapper(Tensor(theta), grid).numpy()
        inside = np.abs(coords).max() < 0.99
        if inside and _frac_distance(coords, grid.extents) > _KINK_MARGIN:
            return theta
    raise ArithmeticError("could not place sampling points clear of kinks")


_FRAME_BASE = np.array([[0.82, 0.04, 0.08], [-0.05, 0.85, 0.06]])
_CLS_BASE = np.array([
    [0.80, 0.03, -0.04, 0.07],
    [0.02, 0.83, 0.05, -0.06],
    [-0.03, 0.04, 0.81, 0.05],
])


def _unit_bilinear_features(seed):
    rng = np.random.default_rng((seed, 5))
    grid = make_grid(2, 5, 6)
    theta = _settle(
        np.tile(_FRAME_BASE, (2, 1, 1)) + rng.standard_normal((2, 2, 3)) * 0.01,
        map_affine2d_frames, grid)
    with no_grad():
        coords = map_affine2d_frames(Tensor(theta), grid)
    features = rng.standard_normal((2, 5, 6, 3))
    w = _weights(rng, (2, 5, 6, 3))
    return _input_check(
        lambda f: ops.mean(ops.mul(SAMPLERS["bilinear"](f, coords), w)),
        features)


def _unit_bilinear_theta(seed):
    rng = np.random.default_rng((seed, 6))
    grid = make_grid(2, 5, 6)
    theta = _settle(
        np.tile(_FRAME_BASE, (2, 1, 1)) + rng.standard_normal((2, 2, 3)) * 0.01,
        map_affine2d_frames, grid)
    features = Tensor(rng.standard_normal((2, 5, 6, 3)))
    w = _weights(rng, (2, 5, 6, 3))
    return _input_check(
        lambda p: ops.mean(ops.mul(
            SAMPLERS["bilinear"](features, map_affine2d_frames(p, grid)), w)),
        theta)


def _unit_trilinear_features(seed):
    rng = np.random.default_rng((seed, 7))
    grid = make_grid(3, 5, 6)
    theta = _settle(_CLS_BASE + rng.standard_normal((3, 4)) * 0.01,
                    map_affine3d, grid)
    with no_grad():
        coords = map_affine3d(Tensor(theta), grid)
    video = rng.standard_normal((3, 5, 6, 3))
    w = _weights(rng, (3, 5, 6, 3))
    return _input_check(
        lambda f: ops.mean(ops.mul(SAMPLERS["trilinear"](f, coords), w)),
        video)


def _unit_trilinear_theta(seed):
    rng = np.random.default_rng((seed, 8))
    grid = make_grid(3, 5, 6)
    theta = _settle(_CLS_BASE + rng.standard_normal((3, 4)) * 0.01,
                    map_affine3d, grid)
    video = Tensor(rng.standard_normal((3, 5, 6, 3)))
    w = _weights(rng, (3, 5, 6, 3))
    return _input_check(
        lambda p: ops.mean(ops.mul(
            SAMPLERS["trilinear"](video, map_affine3d(p, grid)), w)),
        theta)


# -- network units -----------------------------------------------------------------


def _unit_predictor(seed):
    rng = np.random.default_rng((seed, 9))
    state = PredictorState(rng, in_channels=7, kind="affine", hidden=4,
                           embed=4, heads=2, fuse_attn=True,
                           temporal_attn=True)
    # Fresh emission heads are exactly zero, which zeroes every upstream
    # gradient; audit from a perturbed state.
    for p in (state.fc_cls_w, state.fc_cls_b, state.fc_frame_w,
              state.fc_frame_b):
        p.assign(rng.standard_normal(p.shape) * 0.1)
    x = Tensor(rng.standard_normal((1, 2, 4, 4, 3)))
    amap = Tensor(rng.random((1, 2, 4, 4, 4)))
    wf = _weights(rng, (1, 2, 2, 3))
    wc = _weights(rng, (1, 12))

    def loss_fn():
        frames, cls_raw = predict_raw(x, amap, state)
        return ops.add(ops.mean(ops.mul(frames, wf)),
                       ops.mean(ops.mul(cls_raw, wc)))

    params = {name: p for name, p in state.named_parameters().items()
              if p.trainable}
    return _param_check(params, loss_fn)


def e2e_config() -> ModelConfig:
    """Two-stage model small enough to probe every weight: covers the
    deformation block, a plain block, the stage transition, and the head."""
    return ModelConfig(
        stage_depths=(1, 1), stage_channels=(4, 6), clip_shape=(2, 12, 12),
        patch_size=(1, 3, 3), geo_indices=frozenset({0}),
        transform_kind="affine", num_classes=3, heads=(2, 2),
        kv_stride=((1, 2, 2), (1, 1, 1)),
        predictor_hidden=4, predictor_embed=4)


def _unit_model(seed):
    rng = np.random.default_rng((seed, 10))
    model = init_model(e2e_config(), seed=rng)
    assert count_params(model.cfg) <= 5000
    state = model.predictors[0]
    zeroed = [state.fc_cls_w, state.fc_cls_b, state.fc_frame_w,
              state.fc_frame_b, model.params["head.w"]]
    zeroed += [p for n, p in model.params.items()
               if n.endswith(("attn.wo", "mlp.w2", "pos.t", "pos.h", "pos.w"))]
    for p in zeroed:
        p.assign(rng.standard_normal(p.shape) * 0.1)
    clip = Tensor(rng.random((1, 2, 12, 12, 3)))
    w = _weights(rng, (1, 3))

    def loss_fn():
        return ops.mean(ops.mul(model_forward(clip, model), w))

    return _param_check(model.trainable_parameters(), loss_fn)


# -- registry ----------------------------------------------------------------------

UNITS = (
    ("map.affine2d", UNIT_TOL, _unit_affine2d),
    ("map.affine3d", UNIT_TOL, _unit_affine3d),
    ("map.focusing", UNIT_TOL, _unit_focusing),
    ("map.homography", UNIT_TOL, _unit_homography),
    ("sampler.bilinear.features", UNIT_TOL, _unit_bilinear_features),
    ("sampler.bilinear.theta", UNIT_TOL, _unit_bilinear_theta),
    ("sampler.trilinear.features", UNIT_TOL, _unit_trilinear_features),
    ("sampler.trilinear.theta", UNIT_TOL, _unit_trilinear_theta),
    ("predictor", UNIT_TOL, _unit_predictor),
    ("model.two_stage", MODEL_TOL, _unit_model),
)

UNIT_NAMES = tuple(name for name, _, _ in UNITS)


def run_unit(name: str, seed: int) -> UnitReport:
    for unit, tol, fn in UNITS:
        if unit == name:
            error, index = fn(seed)
            return UnitReport(unit, seed, error, index, tol)
    raise KeyError(f"unknown gradient unit {name!r}; have {UNIT_NAMES}")


def run_suite(seeds=(0, 1, 2), names=UNIT_NAMES, log=None):
    """All (unit, seed) reports; log, when given, sees one line each."""
    reports = []
    for name in names:
        for seed in seeds:
            report = run_unit(name, seed)
            reports.append(report)
            if log:
                log(report.line())
    return reports


def suite_passed(reports) -> bool:
    return all(r.ok for r in reports)

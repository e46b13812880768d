"""Coordinate-map oracles.

The independent oracles here are deliberately dumb: explicit Python loops
over grid elements doing one small matrix multiply (and one homogeneous
divide) per point with plain numpy, no shared code with the library path.
"""

import numpy as np
import numpy.testing as npt
import pytest

from geodeformer.diffcore import ShapeError, Tensor, check_input_grad, ops
from geodeformer.geometry import (
    HOMOGRAPHY_EPS,
    Affine2D,
    Affine3D,
    Focusing3D,
    Homography3D,
    compose_affine2d,
    expand_focusing,
    lin,
    make_grid,
    map_affine2d,
    map_affine2d_frames,
    map_affine3d,
    map_focusing,
    map_homography,
)

SEEDS = (0, 1, 2)


# -- independent per-point oracles


def oracle_affine2d(theta, grid, frame):
    t, h, w = grid.extents
    out = np.zeros((h, w, 2))
    for i in range(h):
        for j in range(w):
            x, y = grid.coords[frame, i, j, 1], grid.coords[frame, i, j, 2]
            v = np.asarray(theta) @ np.array([x, y, 1.0])
            out[i, j] = v
    return out

def oracle_affine3d(theta, grid):
    t, h, w = grid.extents
    out = np.zeros((t, h, w, 3))
    for k in range(t):
        for i in range(h):
            for j in range(w):
                z, x, y = grid.coords[k, i, j]
                out[k, i, j] = np.asarray(theta) @ np.array([z, x, y, 1.0])
    return out

def oracle_homography(p, grid, eps):
    t, h, w = grid.extents
    mat = np.concatenate([np.asarray(p), [1.0]]).reshape(4, 4)
    out = np.zeros((t, h, w, 3))
    for k in range(t):
        for i in range(h):
            for j in range(w):
                z, x, y = grid.coords[k, i, j]
                v = mat @ np.array([z, x, y, 1.0])
                m = v[3]
                sign = 1.0 if m >= 0 else -1.0
                m = sign * max(abs(m), eps)
                out[k, i, j] = v[:3] / m
    return out


# -- grid construction


def test_grid_two_point_axis_hits_centers():
    g = make_grid(1, 2, 2)
    npt.assert_array_equal(np.unique(g.coords[..., 1]), [-1.0, 1.0])
    npt.assert_array_equal(np.unique(g.coords[..., 2]), [-1.0, 1.0])

def test_grid_three_frames_z():
    g = make_grid(3, 1, 1)
    npt.assert_array_equal(g.coords[:, 0, 0, 0], [-1.0, 0.0, 1.0])

def test_grid_degenerate_axes_sit_at_zero():
    g = make_grid(1, 1, 1)
    npt.assert_array_equal(g.coords.reshape(3), [0.0, 0.0, 0.0])

def test_grid_rejects_zero_extent():
    with pytest.raises(ShapeError):
        make_grid(0, 2, 2)

def test_grid_layout_and_lin_agree():
    g = make_grid(4, 3, 5)
    assert g.coords.shape == (4, 3, 5, 3)
    for k in range(4):
        for i in range(3):
            for j in range(5):
                npt.assert_allclose(
                    g.coords[k, i, j],
                    [lin(k, 4), lin(j, 5), lin(i, 3)],
                    atol=1e-15,
                )

def test_grid_axes_affine_and_symmetric():
    for n in (2, 3, 7, 56):
        axis = make_grid(1, n, 1).coords[0, :, 0, 2]
        npt.assert_array_equal(axis, -axis[::-1])
        second = np.diff(axis, n=2)
        assert np.all(np.abs(second) <= 1e-10)


# -- identity fixpoints


def test_identity_laws_are_exact():
    g = make_grid(3, 4, 5)
    out2 = map_affine2d(Affine2D.identity(), g, frame=1)
    npt.assert_array_equal(out2.numpy(), g.coords[1, :, :, 1:])
    out3 = map_affine3d(Affine3D.identity(), g)
    npt.assert_array_equal(out3.numpy(), g.coords)
    outf = map_focusing(Focusing3D.identity(), g)
    npt.assert_array_equal(outf.numpy(), g.coords)
    outh = map_homography(Homography3D.identity(), g)
    npt.assert_array_equal(outh.numpy(), g.coords)


def test_parameter_count_ordering():
    assert Focusing3D.n_params < Affine3D.n_params < Homography3D.n_params
    assert (Focusing3D.n_params, Affine3D.n_params, Homography3D.n_params) == (6, 12, 15)


# -- 2D affine


def test_affine2d_translation_point():
    g = make_grid(1, 3, 3)
    out = map_affine2d(Affine2D([[1, 0, 0.5], [0, 1, 0]]), g, 0)
    npt.assert_allclose(out.numpy()[1, 1], [0.5, 0.0], atol=1e-15)

def test_affine2d_rotation_point():
    g = make_grid(1, 3, 3)
    theta = Affine2D([[0, -1, 0], [1, 0, 0]])
    out = map_affine2d(theta, g, 0)
    # (x,y)=(1,0) lives at row 1, col 2
    npt.assert_allclose(out.numpy()[1, 2], [0.0, 1.0], atol=1e-15)

@pytest.mark.parametrize("seed", SEEDS)
def test_affine2d_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    theta = rng.standard_normal((2, 3))
    g = make_grid(2, 4, 6)
    out = map_affine2d(Affine2D(theta), g, 1)
    npt.assert_allclose(out.numpy(), oracle_affine2d(theta, g, 1), atol=1e-12)

def test_affine2d_frame_out_of_range():
    with pytest.raises(ShapeError):
        map_affine2d(Affine2D.identity(), make_grid(2, 2, 2), 2)

@pytest.mark.parametrize("seed", SEEDS)
def test_affine2d_frames_stack_matches_per_frame(seed):
    rng = np.random.default_rng(seed)
    g = make_grid(3, 4, 5)
    thetas = rng.standard_normal((3, 2, 3))
    stacked = map_affine2d_frames(thetas, g)
    assert stacked.shape == (3, 4, 5, 2)
    for t in range(3):
        npt.assert_allclose(stacked.numpy()[t],
                            oracle_affine2d(thetas[t], g, t), atol=1e-12)


# -- 3D affine


def test_affine3d_z_row_substitution():
    g = make_grid(3, 2, 2)
    theta = np.eye(3, 4)
    theta[0, 3] = 0.5           # p4: z translation
    theta[0, 0] = 2.0           # p1: z scale
    out = map_affine3d(Affine3D(theta), g)
    npt.assert_allclose(out.numpy()[..., 0], 2.0 * g.coords[..., 0] + 0.5,
                        atol=1e-15)
    npt.assert_array_equal(out.numpy()[..., 1:], g.coords[..., 1:])

@pytest.mark.parametrize("seed", SEEDS)
def test_affine3d_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    theta = rng.standard_normal((3, 4))
    g = make_grid(2, 3, 3)
    out = map_affine3d(Affine3D(theta), g)
    npt.assert_allclose(out.numpy(), oracle_affine3d(theta, g), atol=1e-12)

def test_affine3d_affinity_second_differences_vanish():
    rng = np.random.default_rng(9)
    g = make_grid(5, 6, 7)
    out = map_affine3d(Affine3D(rng.standard_normal((3, 4))), g).numpy()
    for axis in range(3):
        second = np.diff(out, n=2, axis=axis)
        assert np.max(np.abs(second)) <= 1e-10


# -- focusing


def test_focusing_identity_and_scale():
    g = make_grid(2, 3, 3)
    npt.assert_array_equal(
        map_focusing(Focusing3D([1, 1, 1, 0, 0, 0]), g).numpy(), g.coords)
    out = map_focusing(Focusing3D([1, 2, 1, 0, 0, 0]), g).numpy()
    npt.assert_allclose(out[..., 1], 2.0 * g.coords[..., 1], atol=1e-15)
    npt.assert_array_equal(out[..., [0, 2]], g.coords[..., [0, 2]])

def test_focusing_expansion_layout():
    mat = expand_focusing(Focusing3D([2, 3, 4, 5, 6, 7])).numpy()
    npt.assert_array_equal(mat, [[2, 0, 0, 5], [0, 3, 0, 6], [0, 0, 4, 7]])

@pytest.mark.parametrize("seed", SEEDS)
def test_focusing_equals_expanded_affine(seed):
    rng = np.random.default_rng(seed)
    p = rng.standard_normal(6)
    g = make_grid(2, 4, 3)
    direct = map_focusing(Focusing3D(p), g)
    via_affine = map_affine3d(Affine3D(expand_focusing(Focusing3D(p)).numpy()), g)
    npt.assert_allclose(direct.numpy(), via_affine.numpy(), atol=1e-12)


# -- homography


def test_homography_zero_projective_row_equals_affine():
    rng = np.random.default_rng(4)
    affine = rng.standard_normal(12)
    p = np.concatenate([affine, np.zeros(3)])
    g = make_grid(3, 4, 4)
    via_h = map_homography(Homography3D(p), g)
    via_a = map_affine3d(Affine3D(affine.reshape(3, 4)), g)
    npt.assert_allclose(via_h.numpy(), via_a.numpy(), atol=1e-12)

@pytest.mark.parametrize("seed", SEEDS)
def test_homography_matches_divide_oracle(seed):
    rng = np.random.default_rng(seed)
    p = rng.standard_normal(15) * 0.5
    g = make_grid(2, 5, 4)
    out = map_homography(Homography3D(p), g)
    npt.assert_allclose(out.numpy(), oracle_homography(p, g, HOMOGRAPHY_EPS),
                        atol=1e-10)

def test_homography_guard_keeps_map_total_and_finite():
    # Projective row tuned so m crosses 0 inside the grid.
    p = np.array([1.0, 0, 0, 0, 0, 1.0, 0, 0, 0, 0, 1.0, 0, 0.0, 1.0, 0.0])
    g = make_grid(1, 3, 5)
    out = map_homography(Homography3D(p), g, eps=1e-4)
    assert np.all(np.isfinite(out.numpy()))
    npt.assert_allclose(out.numpy(), oracle_homography(p, g, 1e-4), atol=1e-10)

def test_homography_rejects_nonpositive_eps():
    with pytest.raises(ShapeError):
        map_homography(Homography3D.identity(), make_grid(1, 2, 2), eps=0.0)


# -- composition


def test_compose_identity_is_neutral():
    rng = np.random.default_rng(2)
    b = Affine2D(rng.standard_normal((2, 3)))
    out = compose_affine2d(Affine2D.identity(), b)
    npt.assert_allclose(out.p.numpy(), b.p.numpy(), atol=1e-15)

def test_compose_translations_add():
    a = Affine2D([[1, 0, 0.2], [0, 1, 0]])
    b = Affine2D([[1, 0, 0.3], [0, 1, 0]])
    out = compose_affine2d(a, b)
    npt.assert_allclose(out.p.numpy(), [[1, 0, 0.5], [0, 1, 0]], atol=1e-15)

@pytest.mark.parametrize("seed", SEEDS)
def test_compose_matches_pointwise_oracle(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((2, 2, 3))
    g = make_grid(1, 5, 5)
    composed = oracle_affine2d(compose_affine2d(Affine2D(a), Affine2D(b)).p.numpy(),
                               g, 0)
    for i in range(5):
        for j in range(5):
            x, y = g.coords[0, i, j, 1], g.coords[0, i, j, 2]
            mid = np.asarray(b) @ np.array([x, y, 1.0])
            end = np.asarray(a) @ np.array([mid[0], mid[1], 1.0])
            npt.assert_allclose(composed[i, j], end, atol=1e-12)


# -- differentiability w.r.t. parameters


@pytest.mark.parametrize("seed", SEEDS)
def test_map_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    g = make_grid(2, 3, 4)
    w2 = Tensor(rng.standard_normal((3, 4, 2)))
    w3 = Tensor(rng.standard_normal((2, 3, 4, 3)))

    err = check_input_grad(
        lambda p: ops.sum_along(map_affine2d(p, g, 1) * w2),
        Tensor(rng.standard_normal((2, 3))))
    assert err <= 1e-6

    err = check_input_grad(
        lambda p: ops.sum_along(map_affine3d(p, g) * w3),
        Tensor(rng.standard_normal((3, 4))))
    assert err <= 1e-6

    err = check_input_grad(
        lambda p: ops.sum_along(map_focusing(p, g) * w3),
        Tensor(rng.standard_normal(6)))
    assert err <= 1e-6

    err = check_input_grad(
        lambda p: ops.sum_along(map_homography(p, g) * w3),
        Tensor(rng.standard_normal(15) * 0.3))
    assert err <= 1e-6

    wt = Tensor(rng.standard_normal((2, 3, 4, 2)))
    err = check_input_grad(
        lambda p: ops.sum_along(map_affine2d_frames(p, g) * wt),
        Tensor(rng.standard_normal((2, 2, 3))))
    assert err <= 1e-6

"""Synthetic dataset contracts: determinism, motion-class oracles via
centroid/mass tracking, nuisance algebra, stratified splitting, and the
on-disk round trip.
"""

import os

import numpy as np
import numpy.testing as npt
import pytest

from geodeformer.diffcore import ShapeError
from geodeformer.synthvideo import (
    MOTION_CLASSES,
    DatasetConfig,
    _apply_nuisance,
    centroid,
    clip_centroids,
    generate_dataset,
    hard_config,
    load_dataset,
    make_sample,
    render_frame,
    split,
    split_indices,
    write_dataset,
)


def zero_nuisance(**kw):
    return DatasetConfig(nuisance_rotation=0.0, nuisance_scale=(1.0, 1.0),
                         nuisance_translation=0.0, **kw)


def per_class_sample(cfg, name, k=0):
    label = MOTION_CLASSES.index(name)
    return make_sample(cfg, label * cfg.samples_per_class + k)


def test_label_set_fixed_and_ordered():
    assert MOTION_CLASSES == (
        "translate-left", "translate-right", "translate-up", "translate-down",
        "rotate-cw", "rotate-ccw", "zoom-in", "zoom-out")


def test_same_seed_bit_identical():
    cfg = DatasetConfig(samples_per_class=2, seed=9)
    a = generate_dataset(cfg)
    b = generate_dataset(cfg)
    assert len(a) == len(b) == 16
    for (ca, la), (cb, lb) in zip(a, b):
        assert la == lb
        npt.assert_array_equal(ca, cb)


def test_pixels_in_unit_range_and_balanced():
    cfg = DatasetConfig(samples_per_class=3, seed=1)
    data = generate_dataset(cfg)
    labels = [lab for _, lab in data]
    assert all(labels.count(c) == 3 for c in range(8))
    for clip, _ in data:
        assert clip.shape == (8, 32, 32, 3)
        assert clip.min() >= 0.0 and clip.max() <= 1.0
        assert clip.reshape(8, -1).sum(axis=1).min() > 0.0   # sprite visible


@pytest.mark.parametrize("name,axis,sign", [
    ("translate-right", 0, 1), ("translate-left", 0, -1),
    ("translate-down", 1, 1), ("translate-up", 1, -1),
])
def test_translation_centroid_oracle(name, axis, sign):
    cfg = zero_nuisance(samples_per_class=4, seed=5)
    for k in range(4):
        clip, _ = per_class_sample(cfg, name, k)
        track = clip_centroids(clip)[:, axis]
        steps = np.diff(track) * sign
        assert np.all(steps > 0), f"{name} sample {k} not monotone: {steps}"


@pytest.mark.parametrize("name,sign", [("rotate-cw", 1), ("rotate-ccw", -1)])
def test_orbit_direction_oracle(name, sign):
    cfg = zero_nuisance(samples_per_class=4, seed=6)
    for k in range(4):
        clip, _ = per_class_sample(cfg, name, k)
        c = clip_centroids(clip)
        cross = c[:-1, 0] * c[1:, 1] - c[:-1, 1] * c[1:, 0]
        assert np.all(cross * sign > 0), f"{name} sample {k}: {cross}"


@pytest.mark.parametrize("name,sign", [("zoom-in", 1), ("zoom-out", -1)])
def test_zoom_mass_oracle(name, sign):
    cfg = zero_nuisance(samples_per_class=4, seed=7)
    for k in range(4):
        clip, _ = per_class_sample(cfg, name, k)
        mass = clip.reshape(clip.shape[0], -1).sum(axis=1)
        assert np.all(np.diff(mass) * sign > 0), f"{name} sample {k}: {mass}"


def test_identity_nuisance_is_a_fixpoint():
    poses = [(0.1, -0.2, 0.3, 0.25), (0.0, 0.4, -1.0, 0.2)]
    npt.assert_allclose(_apply_nuisance(poses, 0.0, 1.0, 0.0, 0.0), poses,
                        atol=1e-15)


def test_nuisance_moves_pixels_but_not_labels():
    plain = zero_nuisance(samples_per_class=2, seed=8)
    noisy = DatasetConfig(samples_per_class=2, seed=8)
    moved = 0
    for i in range(16):
        ca, la = make_sample(plain, i)
        cb, lb = make_sample(noisy, i)
        assert la == lb
        moved += int(not np.array_equal(ca, cb))
    assert moved >= 15          # nuisance draws are almost never identity


def test_hard_variant_replays_the_same_motion():
    cfg = DatasetConfig(samples_per_class=2, seed=11)
    hard = hard_config(cfg)
    assert hard.nuisance_rotation == 2 * cfg.nuisance_rotation
    assert hard.nuisance_translation == 2 * cfg.nuisance_translation
    plain_zero = zero_nuisance(samples_per_class=2, seed=11)
    for i in range(16):
        a, _ = make_sample(plain_zero, i)
        b, _ = make_sample(zero_nuisance(samples_per_class=2, seed=11,
                                         motion_range=hard.motion_range), i)
        npt.assert_array_equal(a, b)


def test_split_is_stratified_and_disjoint():
    cfg = DatasetConfig(samples_per_class=100)
    train, test = split_indices(cfg, 0.8, seed=3)
    assert len(train) == 640 and len(test) == 160
    assert not set(train) & set(test)
    for label in range(8):
        lo, hi = label * 100, (label + 1) * 100
        assert sum(lo <= i < hi for i in train) == 80
        assert sum(lo <= i < hi for i in test) == 20
    assert split_indices(cfg, 0.8, seed=3) == (train, test)
    assert split_indices(cfg, 0.8, seed=4) != (train, test)


def test_split_rejects_unstratifiable_classes():
    with pytest.raises(ShapeError):
        split_indices(DatasetConfig(samples_per_class=1), 0.5, 0)
    with pytest.raises(ShapeError):
        split_indices(DatasetConfig(samples_per_class=5), 0.99, 0)
    with pytest.raises(ShapeError):
        split_indices(DatasetConfig(), 1.0, 0)


def test_split_returns_matching_hard_samples():
    cfg = DatasetConfig(samples_per_class=3, seed=13)
    data = generate_dataset(cfg)
    train, test, hard = split(data, 2 / 3, seed=0, cfg=cfg)
    assert len(train) == 16 and len(test) == 8 and len(hard) == 8
    assert [l for _, l in test] == [l for _, l in hard]
    mismatches = sum(int(not np.array_equal(a, b))
                     for (a, _), (b, _) in zip(test, hard))
    assert mismatches >= 7      # nuisance differs even though motion matches


@pytest.mark.parametrize("bad", [
    dict(samples_per_class=0),
    dict(clip_shape=(1, 32, 32)),
    dict(sprite="squares"),
    dict(motion_range=(0.0, 0.05)),
    dict(motion_range=(0.09, 0.05)),
    dict(motion_range=(0.2, 0.2)),          # 0.2 * 7 frames exits the frame
    dict(nuisance_scale=(0.0, 1.0)),
    dict(nuisance_rotation=-1.0),
])
def test_config_rejects(bad):
    with pytest.raises(ShapeError):
        DatasetConfig(**bad)


def test_sample_index_bounds():
    cfg = DatasetConfig(samples_per_class=2)
    with pytest.raises(ShapeError):
        make_sample(cfg, 16)
    with pytest.raises(ShapeError):
        make_sample(cfg, -1)


def test_centroid_oracle_on_known_masses():
    frame = np.zeros((9, 9, 3))
    frame[2, 6] = 1.0
    x, y = centroid(frame)
    assert (x, y) == (0.5, -0.5)
    with pytest.raises(ShapeError):
        centroid(np.zeros((4, 4, 3)))


def test_sprites_render_distinctly():
    frames = [render_frame((0.0, 0.0, 0.4, 0.5), kind, (1.0, 1.0, 1.0), 32, 32)
              for kind in ("disc", "bar", "cross")]
    for i in range(3):
        for j in range(i + 1, 3):
            assert np.abs(frames[i] - frames[j]).max() > 0.5


def test_disk_round_trip(tmp_path):
    cfg = DatasetConfig(samples_per_class=2, seed=21)
    out = tmp_path / "data"
    index_path = write_dataset(str(out), cfg, fraction=0.5)
    with open(index_path, encoding="utf-8") as fh:
        header = fh.readline().strip()
    assert header == "path,label,split"
    splits = load_dataset(str(out))
    assert len(splits["train"]) == 8
    assert len(splits["test"]) == 8
    assert len(splits["hard"]) == 8
    clip, label = splits["train"][0]
    assert clip.shape == (8, 32, 32, 3) and 0 <= label < 8

    before = (out / "index.csv").read_bytes()
    sample_file = sorted((out / "clips").iterdir())[0]
    clip_before = sample_file.read_bytes()
    write_dataset(str(out), cfg, fraction=0.5)
    assert (out / "index.csv").read_bytes() == before
    assert sample_file.read_bytes() == clip_before

"""Deterministic synthetic motion clips with geometric labels.

Each sample is a single anti-aliased sprite (disc, bar, or cross) moving
over a black background for T frames.  The eight classes are pure motions:
four translation directions, two orbit directions around the frame center,
and two zoom polarities.  After the motion poses are laid out, one
clip-constant similarity nuisance (rotation, uniform scale, translation)
is composed onto every frame, so the class stays a function of relative
inter-frame motion only.

Randomness derives from (seed, sample index) with separate motion and
nuisance substreams: regenerating a sample under scaled nuisance ranges
(the "hard" variant) replays the exact same motion.  Rendering is analytic
per-pixel signed-distance coverage, so sub-pixel motion moves centroids
smoothly; pixels always land in [0, 1].
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, replace

import numpy as np

from .diffcore import ShapeError, Tensor, gdt
from .geometry import lin

MOTION_CLASSES = (
    "translate-left", "translate-right", "translate-up", "translate-down",
    "rotate-cw", "rotate-ccw", "zoom-in", "zoom-out",
)
SPRITE_KINDS = ("disc", "bar", "cross")

_MAX_RETRIES = 200
_ORBIT_GAIN = np.pi          # orbit radians per frame per unit magnitude


@dataclass(frozen=True)
class DatasetConfig:
    samples_per_class: int = 20
    clip_shape: tuple = (8, 32, 32)
    sprite: str = "mixed"                    # disc | bar | cross | mixed
    motion_range: tuple = (0.05, 0.09)       # per-frame magnitude
    nuisance_rotation: float = 15.0          # +- degrees
    nuisance_scale: tuple = (0.85, 1.18)
    nuisance_translation: float = 0.18       # +- normalized units
    background: float = 0.0                  # flat backdrop, below sprite range
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "clip_shape",
                           tuple(int(e) for e in self.clip_shape))
        object.__setattr__(self, "motion_range",
                           tuple(float(e) for e in self.motion_range))
        object.__setattr__(self, "nuisance_scale",
                           tuple(float(e) for e in self.nuisance_scale))
        if self.samples_per_class < 1:
            raise ShapeError(f"samples_per_class={self.samples_per_class}")
        t, h, w = self.clip_shape
        if t < 2 or h < 4 or w < 4:
            raise ShapeError(f"clip {self.clip_shape} too small to animate")
        if self.sprite not in SPRITE_KINDS + ("mixed",):
            raise ShapeError(f"unknown sprite kind {self.sprite!r}")
        lo, hi = self.motion_range
        if not 0 < lo <= hi:
            raise ShapeError(f"empty motion range {self.motion_range}")
        if hi * (t - 1) > 1.0:
            raise ShapeError(
                f"motion magnitude {hi} travels off-frame over {t} frames")
        slo, shi = self.nuisance_scale
        if not 0 < slo <= shi:
            raise ShapeError(f"empty scale range {self.nuisance_scale}")
        if self.nuisance_rotation < 0 or self.nuisance_translation < 0:
            raise ShapeError("nuisance ranges must be nonnegative")
        if not 0.0 <= self.background < 0.55:
            raise ShapeError(
                f"background {self.background} would wash out the sprites")


def hard_config(cfg: DatasetConfig) -> DatasetConfig:
    """Same motions, nuisance ranges doubled (about their identity point)."""
    lo, hi = cfg.nuisance_scale
    return replace(
        cfg,
        nuisance_rotation=cfg.nuisance_rotation * 2.0,
        nuisance_translation=cfg.nuisance_translation * 2.0,
        nuisance_scale=(max(0.05, 1.0 - 2.0 * (1.0 - lo)),
                        1.0 + 2.0 * (hi - 1.0)),
    )


# -- analytic rendering ----------------------------------------------------------

def _sdf(kind, px, py, r):
    """Signed distance to the sprite boundary in its own frame."""
    if kind == "disc":
        return np.hypot(px, py) - r
    if kind == "bar":
        ax, ay = r, 0.35 * r
    else:                        # cross: union of two perpendicular bars
        ax, ay = r, 0.28 * r
    qx, qy = np.abs(px) - ax, np.abs(py) - ay
    d = np.hypot(np.maximum(qx, 0.0), np.maximum(qy, 0.0)) \
        + np.minimum(np.maximum(qx, qy), 0.0)
    if kind == "bar":
        return d
    qx2, qy2 = np.abs(px) - ay, np.abs(py) - ax
    d2 = np.hypot(np.maximum(qx2, 0.0), np.maximum(qy2, 0.0)) \
        + np.minimum(np.maximum(qx2, qy2), 0.0)
    return np.minimum(d, d2)


def render_frame(pose, kind, color, h, w, background=0.0):
    """Coverage-anti-aliased (H, W, 3) frame for one sprite pose.

    pose = (cx, cy, phi, scale) in normalized [-1, 1] coordinates.
    The sprite is composited over a flat backdrop.
    """
    cx, cy, phi, scale = pose
    x = lin(np.arange(w), w)[None, :]
    y = lin(np.arange(h), h)[:, None]
    dx, dy = x - cx, y - cy
    c, s = np.cos(-phi), np.sin(-phi)
    px = (c * dx - s * dy) / scale
    py = (s * dx + c * dy) / scale
    d = _sdf(kind, px, py, 1.0) * scale
    pitch = 2.0 / min(h, w)
    alpha = np.clip(0.5 - d / pitch, 0.0, 1.0)[:, :, None]
    return background + alpha * (np.asarray(color)[None, None, :] - background)


def render_clip(poses, kind, color, clip_shape, background=0.0):
    t, h, w = clip_shape
    return np.stack([render_frame(p, kind, color, h, w, background)
                     for p in poses])


# -- motion layout ---------------------------------------------------------------

def _motion_poses(rng, label, t, motion_range):
    """Per-frame (cx, cy, phi, scale) for one class, pre-nuisance."""
    name = MOTION_CLASSES[label]
    m = rng.uniform(*motion_range)
    phi0 = rng.uniform(0.0, 2 * np.pi)
    jx, jy = rng.uniform(-0.08, 0.08, 2)
    if name.startswith("translate"):
        dx, dy = {"left": (-1, 0), "right": (1, 0),
                  "up": (0, -1), "down": (0, 1)}[name.split("-")[1]]
        r = rng.uniform(0.30, 0.44)
        span = m * (t - 1) / 2.0
        return [(jx + dx * (m * k - span), jy + dy * (m * k - span), phi0, r)
                for k in range(t)]
    if name.startswith("rotate"):
        # y points down in image coordinates: screen-clockwise is the
        # mathematically positive direction.
        sign = 1.0 if name == "rotate-cw" else -1.0
        rho = rng.uniform(0.24, 0.38)
        alpha0 = rng.uniform(0.0, 2 * np.pi)
        omega = sign * m * _ORBIT_GAIN
        r = rng.uniform(0.26, 0.36)
        return [(rho * np.cos(alpha0 + omega * k) + jx * 0.5,
                 rho * np.sin(alpha0 + omega * k) + jy * 0.5,
                 phi0 + 2.0 * omega * k, r) for k in range(t)]
    factor = 1.0 + m if name.endswith("in") else 1.0 / (1.0 + m)
    r0 = rng.uniform(0.18, 0.28) if name.endswith("in") \
        else rng.uniform(0.40, 0.55)
    return [(jx, jy, phi0 + m * k, r0 * factor ** k) for k in range(t)]


def _visible(poses, margin=0.0):
    for cx, cy, _, r in poses:
        if r < 0.03 or r > 0.62:
            return False
        room = 1.0 - 0.5 * r - margin
        if abs(cx) > room or abs(cy) > room:
            return False
    return True


def _apply_nuisance(poses, beta, sigma, tx, ty):
    c, s = np.cos(beta), np.sin(beta)
    return [(sigma * (c * cx - s * cy) + tx,
             sigma * (s * cx + c * cy) + ty,
             phi + beta, sigma * r) for cx, cy, phi, r in poses]


def make_sample(cfg: DatasetConfig, index: int):
    """Render sample `index`: returns (clip (T,H,W,3) real-64, label)."""
    n_total = cfg.samples_per_class * len(MOTION_CLASSES)
    if not 0 <= index < n_total:
        raise ShapeError(f"sample index {index} outside [0, {n_total})")
    label = index // cfg.samples_per_class
    t = cfg.clip_shape[0]

    motion_rng = np.random.default_rng((cfg.seed, index, 0))
    kind = cfg.sprite if cfg.sprite != "mixed" \
        else SPRITE_KINDS[motion_rng.integers(len(SPRITE_KINDS))]
    color = motion_rng.uniform(0.55, 1.0, 3)
    for _ in range(_MAX_RETRIES):
        poses = _motion_poses(motion_rng, label, t, cfg.motion_range)
        if _visible(poses):
            break
    else:
        raise ShapeError(
            f"could not lay out a visible {MOTION_CLASSES[label]} motion "
            f"under {cfg}")

    nuisance_rng = np.random.default_rng((cfg.seed, index, 1))
    for _ in range(_MAX_RETRIES):
        beta = np.deg2rad(nuisance_rng.uniform(-cfg.nuisance_rotation,
                                               cfg.nuisance_rotation))
        sigma = nuisance_rng.uniform(*cfg.nuisance_scale)
        tx, ty = nuisance_rng.uniform(-cfg.nuisance_translation,
                                      cfg.nuisance_translation, 2)
        final = _apply_nuisance(poses, beta, sigma, tx, ty)
        if _visible(final):
            break
    else:
        raise ShapeError(
            f"nuisance ranges of {cfg} keep pushing the sprite off-frame")

    return render_clip(final, kind, color, cfg.clip_shape,
                       cfg.background), label


def generate_dataset(cfg: DatasetConfig):
    """All samples in index order: class-contiguous, exactly balanced."""
    n = cfg.samples_per_class * len(MOTION_CLASSES)
    return [make_sample(cfg, i) for i in range(n)]


# -- splitting -------------------------------------------------------------------

def split_indices(cfg: DatasetConfig, fraction: float, seed: int):
    """Class-stratified (train, test) index lists."""
    if not 0.0 < fraction < 1.0:
        raise ShapeError(f"split fraction {fraction} outside (0, 1)")
    spc = cfg.samples_per_class
    n_train = round(fraction * spc)
    if n_train < 1 or n_train >= spc:
        raise ShapeError(
            f"{spc} samples per class cannot be split {fraction}/"
            f"{1 - fraction}")
    rng = np.random.default_rng((seed, 0x5B11))
    train, test = [], []
    for label in range(len(MOTION_CLASSES)):
        order = label * spc + rng.permutation(spc)
        train.extend(int(i) for i in order[:n_train])
        test.extend(int(i) for i in order[n_train:])
    return sorted(train), sorted(test)


def split(dataset, fraction: float, seed: int, cfg: DatasetConfig):
    """(train, test, hard) sample lists; hard re-renders the test indices
    under doubled nuisance ranges but identical motions."""
    n = cfg.samples_per_class * len(MOTION_CLASSES)
    if len(dataset) != n:
        raise ShapeError(
            f"dataset has {len(dataset)} samples, config says {n}")
    train_idx, test_idx = split_indices(cfg, fraction, seed)
    hard = hard_config(cfg)
    return ([dataset[i] for i in train_idx],
            [dataset[i] for i in test_idx],
            [make_sample(hard, i) for i in test_idx])


# -- disk format -----------------------------------------------------------------

def write_dataset(out_dir, cfg: DatasetConfig, fraction=0.8, split_seed=None):
    """GDT clip files plus index.csv (columns path,label,split)."""
    split_seed = cfg.seed if split_seed is None else split_seed
    clip_dir = os.path.join(out_dir, "clips")
    os.makedirs(clip_dir, exist_ok=True)
    train_idx, test_idx = split_indices(cfg, fraction, split_seed)
    membership = {i: "train" for i in train_idx}
    membership.update({i: "test" for i in test_idx})
    hard = hard_config(cfg)

    rows = []
    for i in sorted(membership):
        clip, label = make_sample(cfg, i)
        path = os.path.join("clips", f"{i:05d}.gdt")
        gdt.save_tensor(os.path.join(out_dir, path), Tensor(clip))
        rows.append((path, label, membership[i]))
    for i in test_idx:
        clip, label = make_sample(hard, i)
        path = os.path.join("clips", f"hard_{i:05d}.gdt")
        gdt.save_tensor(os.path.join(out_dir, path), Tensor(clip))
        rows.append((path, label, "hard"))

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("path", "label", "split"))
    writer.writerows(rows)
    index_path = os.path.join(out_dir, "index.csv")
    tmp = index_path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, index_path)
    return index_path


def load_dataset(out_dir):
    """index.csv + clips back into {"train": [...], "test": [...], "hard": [...]}."""
    index_path = os.path.join(out_dir, "index.csv")
    splits = {"train": [], "test": [], "hard": []}
    with open(index_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["path", "label", "split"]:
            raise gdt.FormatError(f"unexpected index.csv header {header}")
        for path, label, part in reader:
            if part not in splits:
                raise gdt.FormatError(f"unknown split {part!r} in index.csv")
            clip = gdt.load_tensor(os.path.join(out_dir, path)).numpy()
            splits[part].append((clip, int(label)))
    return splits


# -- oracles ---------------------------------------------------------------------

def centroid(frame):
    """Intensity-weighted sprite position (x, y) in normalized coordinates.

    The per-frame median intensity estimates the backdrop (sprites cover
    well under half the frame); only brighter-than-backdrop mass counts,
    so flat backgrounds and dark warp borders do not pull the estimate.
    """
    weight = np.asarray(frame).mean(axis=-1)
    weight = np.clip(weight - np.median(weight), 0.0, None)
    total = weight.sum()
    if total <= 0.0:
        raise ShapeError("cannot locate a sprite: no above-backdrop mass")
    h, w = weight.shape
    x = (weight * lin(np.arange(w), w)[None, :]).sum() / total
    y = (weight * lin(np.arange(h), h)[:, None]).sum() / total
    return float(x), float(y)


def clip_centroids(clip):
    return np.array([centroid(frame) for frame in np.asarray(clip)])

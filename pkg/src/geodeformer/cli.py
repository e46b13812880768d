"""Command surface: dataset generation, training, evaluation, gradient
checking, accounting, and qualitative warp export.

Configs are flat ``key=value`` text with dotted section keys::

    model.preset=tiny
    model.geo_indices=0
    data.samples_per_class=40
    train.lr=0.05
    fraction=0.5
    out=runs/exp1

Later lines win, command-line ``--seed``/``--out`` flags override the file,
and trailing ``key=value`` arguments override everything. Every command
writes a resolved snapshot of its full configuration into the output
directory; feeding that snapshot back reproduces the run (the seed rides
along as a real key). Unless set explicitly, ``data.seed`` and
``train.seed`` follow the run seed.

Exit codes: 0 success, 1 usage or config error, 2 runtime failure,
3 gradient-check failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import io
import os
import sys

import numpy as np

from . import gradcheck as gradcheck_mod
from .blocks import (
    ModelConfig,
    count_params,
    default_config,
    estimate_flops,
    init_model,
    micro_config,
    model_forward,
    tiny_baseline_config,
    tiny_config,
)
from .diffcore import ShapeError, Tensor, gdt, no_grad
from .synthvideo import DatasetConfig, load_dataset, write_dataset
from .train import (
    TrainConfig,
    evaluate,
    fit,
    load_checkpoint,
    load_params,
    read_checkpoint,
)
from .warp import WarpConfig, warp_features

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_GRADCHECK = 3

PRESETS = {
    "default": default_config,
    "tiny": tiny_config,
    "tiny-baseline": tiny_baseline_config,
    "micro": micro_config,
}

_TOP_KEYS = ("seed", "out", "dataset", "checkpoint", "clip", "apply_cls",
             "fraction")


class UsageError(Exception):
    """Bad invocation or bad configuration; exits with code 1."""


@dataclasses.dataclass(frozen=True)
class RunConfig:
    command: str
    seed: int
    out: str | None
    model: ModelConfig
    data: DatasetConfig
    train: TrainConfig
    fraction: float
    dataset: str | None
    checkpoint: str | None
    clip: str | None
    apply_cls: bool


# -- key=value plumbing ------------------------------------------------------------


def parse_kv_lines(text: str) -> dict:
    """Flat key=value lines; '#' starts a comment; later keys win."""
    table = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        table[key.strip()] = value.strip()
    return table


def _coerce(proto, text: str, key: str):
    """Parse ``text`` into the type of the prototype value."""
    try:
        if isinstance(proto, bool):
            if text not in ("true", "false"):
                raise ValueError(f"expected boolean true/false, got {text!r}")
            return text == "true"
        if isinstance(proto, int):
            return int(text)
        if isinstance(proto, float):
            return float(text)
        if isinstance(proto, str):
            return text
        if isinstance(proto, frozenset):
            return frozenset(int(p) for p in text.split(",") if p != "")
        if isinstance(proto, tuple):
            sample = proto[0] if proto else 0
            if isinstance(sample, tuple):
                return tuple(tuple(int(x) for x in part.split(":"))
                             for part in text.split(","))
            if isinstance(sample, float):
                return tuple(float(p) for p in text.split(","))
            return tuple(int(p) for p in text.split(","))
    except ValueError as err:
        raise UsageError(f"{key}: {err}") from None
    raise UsageError(f"{key}: unsupported field type {type(proto).__name__}")


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, str)):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, frozenset):
        return ",".join(str(i) for i in sorted(value))
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ",".join(":".join(str(x) for x in part) for part in value)
        return ",".join(_format(v) for v in value)
    raise UsageError(f"cannot serialize {value!r}")


def _apply_overrides(base, section: str, entries: dict):
    """Coerce each entry under its dotted key, then replace all fields in
    one shot so cross-field constraints see the final combination only."""
    names = {f.name for f in dataclasses.fields(base)}
    values = {}
    for key, text in entries.items():
        if key not in names:
            raise UsageError(f"{section}.{key}: unknown key")
        values[key] = _coerce(getattr(base, key), text, f"{section}.{key}")
    if not values:
        return base
    try:
        return dataclasses.replace(base, **values)
    except ShapeError as err:
        raise UsageError(f"{section}: {err}") from None


def resolve(command: str, file_kv: dict, override_kv: dict,
            seed=None, out=None) -> RunConfig:
    merged = dict(file_kv)
    if seed is not None:
        merged["seed"] = str(seed)
    if out is not None:
        merged["out"] = out
    merged.update(override_kv)

    sections = {"model": {}, "data": {}, "train": {}}
    top = {}
    for key, value in merged.items():
        if "." in key:
            section, _, field = key.partition(".")
            if section not in sections:
                raise UsageError(f"{key}: unknown section {section!r}")
            sections[section][field] = value
        elif key in _TOP_KEYS:
            top[key] = value
        else:
            raise UsageError(f"{key}: unknown key")

    run_seed = _coerce(0, top.get("seed", "0"), "seed")
    fraction = _coerce(0.0, top.get("fraction", "0.8"), "fraction")
    apply_cls = _coerce(False, top.get("apply_cls", "false"), "apply_cls")

    preset = sections["model"].pop("preset", "tiny")
    if preset not in PRESETS:
        raise UsageError(
            f"model.preset: unknown preset {preset!r}; have {sorted(PRESETS)}")
    try:
        model = _apply_overrides(PRESETS[preset](), "model", sections["model"])
    except ShapeError as err:
        raise UsageError(f"model: {err}") from None

    data_kv = dict(sections["data"])
    data_kv.setdefault("seed", str(run_seed))
    data = _apply_overrides(DatasetConfig(), "data", data_kv)

    train_kv = dict(sections["train"])
    train_kv.setdefault("seed", str(run_seed))
    train = _apply_overrides(TrainConfig(), "train", train_kv)

    return RunConfig(
        command=command, seed=run_seed, out=top.get("out"),
        model=model, data=data, train=train, fraction=fraction,
        dataset=top.get("dataset"), checkpoint=top.get("checkpoint"),
        clip=top.get("clip"), apply_cls=apply_cls)


def snapshot_text(rc: RunConfig) -> str:
    buf = io.StringIO()
    buf.write(f"# command={rc.command}\n")
    buf.write(f"seed={rc.seed}\n")
    if rc.out:
        buf.write(f"out={rc.out}\n")
    buf.write(f"fraction={_format(rc.fraction)}\n")
    buf.write(f"apply_cls={_format(rc.apply_cls)}\n")
    for key in ("dataset", "checkpoint", "clip"):
        value = getattr(rc, key)
        if value:
            buf.write(f"{key}={value}\n")
    for section, cfg in (("model", rc.model), ("data", rc.data),
                         ("train", rc.train)):
        for field in dataclasses.fields(cfg):
            buf.write(f"{section}.{field.name}="
                      f"{_format(getattr(cfg, field.name))}\n")
    return buf.getvalue()


def _atomic_write(path: str, payload):
    tmp = path + ".tmp"
    mode = "wb" if isinstance(payload, bytes) else "w"
    with open(tmp, mode) as fh:
        fh.write(payload)
    os.replace(tmp, path)


def write_snapshot(rc: RunConfig):
    if rc.out:
        os.makedirs(rc.out, exist_ok=True)
        _atomic_write(os.path.join(rc.out, "config.txt"), snapshot_text(rc))


def _require(rc: RunConfig, *keys):
    for key in keys:
        if not getattr(rc, key):
            raise UsageError(f"{rc.command} needs {key}=... (or --out for out)")


# -- PPM frames --------------------------------------------------------------------


def write_ppm(path: str, frame: np.ndarray):
    """One (H, W, 3) float frame in [0, 1] as binary PPM (P6, max 255)."""
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[-1] != 3:
        raise ShapeError(f"expected (H, W, 3) pixels, got {frame.shape}")
    h, w = frame.shape[:2]
    data = np.clip(np.round(frame * 255.0), 0, 255).astype(np.uint8)
    _atomic_write(path, b"P6\n%d %d\n255\n" % (w, h) + data.tobytes())


def read_ppm(path: str) -> np.ndarray:
    """Binary PPM back to (H, W, 3) floats in [0, 1]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    parts = blob.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P6" or parts[2] != b"255":
        raise ShapeError(f"{path} is not a P6/255 PPM file")
    w, h = (int(v) for v in parts[1].split())
    pixels = np.frombuffer(parts[3][:w * h * 3], dtype=np.uint8)
    return pixels.reshape(h, w, 3).astype(np.float64) / 255.0


# -- deformation-parameter text ------------------------------------------------------


def theta_text(frames: np.ndarray, cls_raw: np.ndarray, kind: str) -> str:
    """Emitted parameters as exact text (repr round-trips real-64)."""
    buf = io.StringIO()
    buf.write(f"kind={kind}\n")
    for t, row in enumerate(np.asarray(frames).reshape(len(frames), -1)):
        buf.write(f"frame {t}: " + " ".join(repr(float(v)) for v in row) + "\n")
    buf.write("cls: " + " ".join(repr(float(v))
                                 for v in np.asarray(cls_raw)) + "\n")
    return buf.getvalue()


def parse_theta_text(text: str):
    """(frames (T, 2, 3), cls_raw (K,), kind) back from theta_text output."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("kind="):
        raise ShapeError("parameter text must start with kind=...")
    kind = lines[0][len("kind="):]
    frames, cls_raw = [], None
    for line in lines[1:]:
        label, _, rest = line.partition(":")
        values = [float(v) for v in rest.split()]
        if label.startswith("frame "):
            if len(values) != 6:
                raise ShapeError(f"{label!r} wants 6 values, got {len(values)}")
            frames.append(np.array(values).reshape(2, 3))
        elif label == "cls":
            cls_raw = np.array(values)
        else:
            raise ShapeError(f"unexpected line {line!r}")
    if not frames or cls_raw is None:
        raise ShapeError("parameter text needs frame lines and a cls line")
    return np.stack(frames), cls_raw, kind


# -- commands ----------------------------------------------------------------------


def cmd_gendata(rc: RunConfig) -> int:
    _require(rc, "out")
    write_snapshot(rc)
    write_dataset(rc.out, rc.data, rc.fraction)
    n = rc.data.samples_per_class * 8
    print(f"wrote {n} clips (plus hard renders of the test split) to {rc.out}")
    return EXIT_OK


def cmd_train(rc: RunConfig) -> int:
    _require(rc, "out", "dataset")
    splits = load_dataset(rc.dataset)
    if not splits["train"] or not splits["test"]:
        raise ShapeError(f"dataset at {rc.dataset} has an empty split")
    write_snapshot(rc)
    model = init_model(rc.model, seed=rc.seed)
    history = fit(model, splits["train"], splits["test"], rc.train,
                  out_dir=rc.out, log=print)
    if history["diverged"]:
        print(f"training diverged; last finite epoch: "
              f"{history['last_finite_epoch']}")
        return EXIT_RUNTIME
    print(f"best test top1 {history['best_top1']:.4f} "
          f"at epoch {history['best_epoch']}")
    return EXIT_OK


def _model_from_checkpoint(rc: RunConfig, model_overridden: bool):
    if not os.path.exists(rc.checkpoint):
        raise ShapeError(f"checkpoint {rc.checkpoint} not found")
    if model_overridden:
        _, params, epoch = read_checkpoint(rc.checkpoint)
        model = init_model(rc.model, seed=rc.seed)
        load_params(model, params)
        return model, epoch
    return load_checkpoint(rc.checkpoint)


def cmd_eval(rc: RunConfig, model_overridden: bool = False) -> int:
    _require(rc, "checkpoint", "dataset")
    model, _ = _model_from_checkpoint(rc, model_overridden)
    splits = load_dataset(rc.dataset)
    write_snapshot(rc)
    lines = ["split,top1,top5"]
    code = EXIT_OK
    for name in ("test", "hard"):
        samples = splits[name]
        if not samples:
            continue
        _, top1, top5 = evaluate(model, samples, rc.train.batch_size)
        print(f"{name}: top1 {top1:.4f} top5 {top5:.4f}")
        lines.append(f"{name},{top1:.4f},{top5:.4f}")
    if rc.out:
        _atomic_write(os.path.join(rc.out, "eval.csv"),
                      "\n".join(lines) + "\n")
    return code


def cmd_gradcheck(rc: RunConfig) -> int:
    seeds = (rc.seed, rc.seed + 1, rc.seed + 2)
    lines = []

    def log(line):
        print(line)
        lines.append(line)

    reports = gradcheck_mod.run_suite(seeds=seeds, log=log)
    ok = gradcheck_mod.suite_passed(reports)
    log(f"gradient suite: {'PASS' if ok else 'FAIL'} "
        f"({len(reports)} unit runs)")
    if rc.out:
        write_snapshot(rc)
        _atomic_write(os.path.join(rc.out, "gradcheck.txt"),
                      "\n".join(lines) + "\n")
    return EXIT_OK if ok else EXIT_GRADCHECK


def cmd_warp(rc: RunConfig) -> int:
    _require(rc, "out", "checkpoint", "clip")
    model, _ = _model_from_checkpoint(rc, False)
    cfg = model.cfg
    if not cfg.geo_indices:
        raise ShapeError("checkpointed model has no deformation block")
    if not os.path.exists(rc.clip):
        raise ShapeError(f"clip {rc.clip} not found")
    clip = gdt.load_tensor(rc.clip).numpy()
    if clip.shape != cfg.clip_shape + (3,):
        raise ShapeError(
            f"clip shape {clip.shape} does not fit the model's "
            f"{cfg.clip_shape + (3,)}")
    write_snapshot(rc)

    recorder = {}
    with no_grad():
        model_forward(Tensor(clip[None]), model, deformations=recorder)
    g = min(recorder)
    frames = recorder[g][0].numpy()[0]        # (T', 2, 3)
    cls_raw = recorder[g][1].numpy()[0]       # (K,)

    # Token time may be coarser than pixel time; repeat each per-frame map
    # over the pixels it was predicted from.
    pt = cfg.patch_size[0]
    theta_px = np.repeat(frames, pt, axis=0)

    cls_param = cls_raw.reshape(3, 4) if cfg.transform_kind == "affine" \
        else cls_raw
    wcfg = WarpConfig(transform_kind=cfg.transform_kind,
                      spatial_enabled=True, temporal_enabled=rc.apply_cls)
    with no_grad():
        after = warp_features(Tensor(clip), Tensor(theta_px),
                              Tensor(cls_param) if rc.apply_cls else None,
                              wcfg).numpy()

    frame_dir = os.path.join(rc.out, "frames")
    os.makedirs(frame_dir, exist_ok=True)
    for t in range(clip.shape[0]):
        write_ppm(os.path.join(frame_dir, f"frame_{t:02d}_before.ppm"),
                  clip[t])
        write_ppm(os.path.join(frame_dir, f"frame_{t:02d}_after.ppm"),
                  after[t])
    _atomic_write(os.path.join(rc.out, "theta.txt"),
                  theta_text(frames, cls_raw, cfg.transform_kind))
    print(f"wrote {clip.shape[0]} before/after frame pairs to {frame_dir}")
    return EXIT_OK


def cmd_count(rc: RunConfig) -> int:
    lines = []
    for label, cfg in (("configured", rc.model), ("full-scale", default_config())):
        lines.append(f"{label}: params {count_params(cfg)} "
                     f"flops {estimate_flops(cfg):.4e}")
        print(lines[-1])
    if rc.out:
        write_snapshot(rc)
        _atomic_write(os.path.join(rc.out, "count.txt"),
                      "\n".join(lines) + "\n")
    return EXIT_OK


# -- entry point -------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="geodeformer", add_help=True)
    parser.add_argument("command",
                        choices=("gendata", "train", "eval", "gradcheck",
                                 "warp", "count"))
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("--seed", type=int, help="run seed (default 0)")
    parser.add_argument("--out", help="output directory")
    return parser


def main(argv=None) -> int:
    try:
        args, extras = build_parser().parse_known_args(argv)
        for extra in extras:
            if "=" not in extra or extra.startswith("-"):
                raise UsageError(f"unrecognized argument {extra!r}")
        args.overrides = extras
        file_kv = {}
        if args.config:
            if not os.path.exists(args.config):
                raise UsageError(f"config file {args.config} not found")
            with open(args.config, encoding="utf-8") as fh:
                file_kv = parse_kv_lines(fh.read())
        override_kv = parse_kv_lines("\n".join(args.overrides))
        rc = resolve(args.command, file_kv, override_kv,
                     seed=args.seed, out=args.out)
        model_overridden = any(k.startswith("model.")
                               for k in list(file_kv) + list(override_kv))
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE

    handlers = {
        "gendata": cmd_gendata,
        "train": cmd_train,
        "gradcheck": cmd_gradcheck,
        "warp": cmd_warp,
        "count": cmd_count,
    }
    try:
        if rc.command == "eval":
            return cmd_eval(rc, model_overridden)
        return handlers[rc.command](rc)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (ShapeError, gdt.FormatError, OSError, ArithmeticError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

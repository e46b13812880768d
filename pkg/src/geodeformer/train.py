"""Training loop: momentum gradient descent, cross-entropy, per-epoch
metrics, and GDT-archive checkpoints that carry the model configuration.

Everything is seed-deterministic in single-session mode: batch order comes
from (seed, epoch), the update rule has no hidden state beyond the
velocity buffers, and metrics.csv is rewritten atomically each epoch.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass

import numpy as np

from .blocks import Model, config_text, init_model, model_forward, parse_config_text
from .diffcore import ShapeError, Tensor, backward, gdt, ops

METRICS_HEADER = ("epoch", "split", "loss", "top1")
SCHEDULES = ("constant", "cosine")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 0.1
    momentum: float = 0.9
    schedule: str = "cosine"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ShapeError(
                f"epochs={self.epochs}, batch_size={self.batch_size}")
        if self.lr <= 0 or not 0.0 <= self.momentum < 1.0:
            raise ShapeError(f"lr={self.lr}, momentum={self.momentum}")
        if self.schedule not in SCHEDULES:
            raise ShapeError(f"unknown schedule {self.schedule!r}")


class Momentum:
    """Gradient descent with velocity buffers over a Parameter table."""

    def __init__(self, params: dict, momentum: float = 0.9):
        self.params = dict(params)
        self.momentum = momentum
        self.velocity = {n: np.zeros_like(p.data) for n, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float):
        for name, p in self.params.items():
            v = self.velocity[name]
            v *= self.momentum
            v += p.grad
            p.assign(p.data - lr * v)


def schedule_lr(cfg: TrainConfig, epoch: int) -> float:
    if cfg.schedule == "constant":
        return cfg.lr
    return cfg.lr * 0.5 * (1.0 + np.cos(np.pi * epoch / cfg.epochs))


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer labels under (B, K) logits."""
    labels = np.asarray(labels)
    b = logits.shape[0]
    shifted = ops.sub(logits, Tensor(logits.numpy().max(axis=-1, keepdims=True)))
    log_norm = ops.log(ops.sum_along(ops.exp(shifted), axis=-1, keepdims=True))
    log_probs = ops.sub(shifted, log_norm)
    picked = ops.getitem(log_probs, (np.arange(b), labels))
    return ops.neg(ops.mean(picked))


def top_k_hits(logits, labels, k: int) -> int:
    """Hits where the true class ranks in the top k; ties favor the
    lower class index."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    hits = 0
    for row, label in zip(logits, labels):
        order = np.lexsort((np.arange(row.size), -row))
        hits += int(label in order[:k])
    return hits


def _batches(n, batch_size, order=None):
    idx = np.arange(n) if order is None else order
    for start in range(0, n, batch_size):
        yield idx[start:start + batch_size]


def _stack(samples, picks):
    clips = np.stack([samples[i][0] for i in picks])
    labels = np.array([samples[i][1] for i in picks])
    return Tensor(clips), labels


def evaluate(model: Model, samples, batch_size: int = 16, k: int = 5):
    """(mean loss, top-1 fraction, top-k fraction) over a sample list."""
    total, hits1, hitsk = 0.0, 0, 0
    for picks in _batches(len(samples), batch_size):
        clips, labels = _stack(samples, picks)
        logits = model_forward(clips, model)
        total += cross_entropy(logits, labels).item() * len(picks)
        hits1 += top_k_hits(logits.numpy(), labels, 1)
        hitsk += top_k_hits(logits.numpy(), labels, k)
    n = len(samples)
    return total / n, hits1 / n, hitsk / n


def _write_metrics(path, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_HEADER)
    for epoch, part, loss, top1 in rows:
        writer.writerow((epoch, part, f"{loss:.6f}", f"{top1:.4f}"))
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def fit(model: Model, train_set, test_set, cfg: TrainConfig,
        out_dir=None, start_epoch: int = 0, log=None):
    """Train in place; returns a history dict.

    Writes metrics.csv and the best-by-test-top1 checkpoint into out_dir
    when given.  A non-finite training loss aborts the run; the last
    finite epoch is recorded in the history and on disk.
    """
    optimizer = Momentum(model.trainable_parameters(), cfg.momentum)
    history = {"rows": [], "best_top1": -1.0, "best_epoch": None,
               "diverged": False, "last_finite_epoch": start_epoch - 1}
    metrics_path = os.path.join(out_dir, "metrics.csv") if out_dir else None
    ckpt_path = os.path.join(out_dir, "checkpoint.gdt") if out_dir else None

    for epoch in range(start_epoch, start_epoch + cfg.epochs):
        order = np.random.default_rng((cfg.seed, epoch)).permutation(
            len(train_set))
        lr = schedule_lr(cfg, epoch - start_epoch)
        losses, hits, seen = [], 0, 0
        for picks in _batches(len(train_set), cfg.batch_size, order):
            clips, labels = _stack(train_set, picks)
            optimizer.zero_grad()
            logits = model_forward(clips, model)
            loss = cross_entropy(logits, labels)
            value = loss.item()
            if not np.isfinite(value):
                history["diverged"] = True
                if metrics_path:
                    _write_metrics(metrics_path, history["rows"])
                return history
            backward(loss)
            optimizer.step(lr)
            losses.append(value * len(picks))
            hits += top_k_hits(logits.numpy(), labels, 1)
            seen += len(picks)
        train_loss = sum(losses) / seen
        train_top1 = hits / seen
        test_loss, test_top1, _ = evaluate(model, test_set, cfg.batch_size)
        history["rows"].append((epoch, "train", train_loss, train_top1))
        history["rows"].append((epoch, "test", test_loss, test_top1))
        history["last_finite_epoch"] = epoch
        if log:
            log(f"epoch {epoch}: lr {lr:.4f} train {train_loss:.4f}"
                f"/{train_top1:.3f} test {test_loss:.4f}/{test_top1:.3f}")
        if test_top1 > history["best_top1"]:
            history["best_top1"] = test_top1
            history["best_epoch"] = epoch
            if ckpt_path:
                save_checkpoint(ckpt_path, model, epoch)
        if metrics_path:
            _write_metrics(metrics_path, history["rows"])
    return history


# -- checkpoints -----------------------------------------------------------------

def save_checkpoint(path, model: Model, epoch: int):
    """GDT archive: every named parameter plus a config/epoch manifest."""
    entries = {f"param/{name}": Tensor(p.data)
               for name, p in model.named_parameters().items()}
    entries["meta/config"] = gdt.text_to_tensor(config_text(model.cfg))
    entries["meta/epoch"] = Tensor(np.float64(epoch))
    gdt.save_archive(path, entries)


def read_checkpoint(path):
    """(ModelConfig, name -> ndarray, epoch) from a checkpoint archive."""
    entries = gdt.load_archive(path)
    if "meta/config" not in entries or "meta/epoch" not in entries:
        raise gdt.FormatError(f"{path} is not a checkpoint archive")
    cfg = parse_config_text(gdt.tensor_to_text(entries["meta/config"]))
    epoch = int(entries["meta/epoch"].item())
    params = {name[len("param/"):]: tensor.numpy()
              for name, tensor in entries.items() if name.startswith("param/")}
    return cfg, params, epoch


def load_params(model: Model, params: dict):
    """Assign a name -> array table onto a model, never silently skipping."""
    table = model.named_parameters()
    for name in table:
        if name not in params:
            raise ShapeError(f"checkpoint is missing tensor {name!r}")
        if params[name].shape != table[name].shape:
            raise ShapeError(
                f"tensor {name!r}: checkpoint shape {params[name].shape} "
                f"does not fit the configured {table[name].shape}")
    extra = sorted(set(params) - set(table))
    if extra:
        raise ShapeError(f"checkpoint carries unknown tensors {extra}")
    for name, value in params.items():
        table[name].assign(value)


def load_checkpoint(path, dtype=np.float64):
    """Rebuild the stored model: returns (model, epoch)."""
    cfg, params, epoch = read_checkpoint(path)
    model = init_model(cfg, seed=0, dtype=dtype)
    load_params(model, params)
    return model, epoch

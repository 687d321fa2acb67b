"""Losses, AdamW, LR schedule, synthetic data, the training loop, and
loss-landscape slicing.

Everything is deterministic for a fixed seed: per-epoch randomness is derived
functionally from (seed, epoch) so an interrupted run resumed from a
checkpoint replays bit-identically.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .tensor import (
    ConfigError,
    NumericError,
    ShapeError,
    Tape,
    Tensor,
    backward,
    log_softmax_lastdim,
    mul,
    reduce_sum,
)

LOSS_MODES = ("onehot", "distill")
METRICS_CSV_SCHEMA = "epoch,loss,train_acc,eval_acc,lr"  # v1


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def smoothed_ce_loss(logits: Tensor, labels: np.ndarray, eps: float = 0.1) -> Tensor:
    """Cross-entropy against (1 - eps) * onehot + eps / num_classes."""
    if not 0.0 <= eps < 1.0:
        raise ConfigError(f"label smoothing must be in [0, 1), got {eps}")
    b, c = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (b,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.min() < 0 or labels.max() >= c:
        raise ConfigError(f"label out of range for {c} classes")
    target = np.full((b, c), eps / c, dtype=logits.dtype)
    target[np.arange(b), labels] += 1.0 - eps
    logp = log_softmax_lastdim(logits)
    return mul(reduce_sum(mul(logp, Tensor(target))), -1.0 / b)


def soft_distill_loss(student_logits: Tensor, teacher_logits: Tensor) -> Tensor:
    """Soft cross-entropy between teacher and student distributions.

    The teacher side is a plain softmax -- no logarithm -- and no one-hot
    term is mixed in. Minimized (at the teacher's entropy) exactly when the
    student matches the teacher.
    """
    if student_logits.shape != teacher_logits.shape:
        raise ShapeError(
            f"student {student_logits.shape} vs teacher {teacher_logits.shape}"
        )
    b = student_logits.shape[0]
    t = teacher_logits.data
    t = t - t.max(axis=-1, keepdims=True)
    e = np.exp(t)
    probs = e / e.sum(axis=-1, keepdims=True)  # teacher is a constant here
    logp = log_softmax_lastdim(student_logits)
    return mul(reduce_sum(mul(logp, Tensor(probs))), -1.0 / b)


def lr_schedule(
    epoch: float,
    total_epochs: int,
    warmup_epochs: int,
    base_lr: float,
    floor: float = 1e-5,
) -> float:
    """Linear warmup from zero, then cosine decay to the floor."""
    if warmup_epochs >= total_epochs:
        raise ConfigError("warmup must be shorter than the run")
    if epoch < warmup_epochs:
        return base_lr * epoch / warmup_epochs
    t = (epoch - warmup_epochs) / (total_epochs - warmup_epochs)
    return float(floor + 0.5 * (base_lr - floor) * (1.0 + np.cos(np.pi * min(t, 1.0))))


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamWState:
    """First/second moments per parameter name plus the shared step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


class AdamW:
    """Bias-corrected Adam with decoupled weight decay.

    Decay only touches tensors of rank >= 2: residual-gain scalars, norm
    affines and biases are all excluded.
    """

    def __init__(
        self,
        registry: dict[str, Tensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.05,
    ):
        self.registry = registry
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = AdamWState()
        for name, p in registry.items():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    def decays(self, name: str) -> bool:
        return self.registry[name].ndim >= 2

    def step(self, grads: dict[Tensor, np.ndarray], lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.state.t += 1
        t = self.state.t
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        for name, p in self.registry.items():
            g = grads.get(p)
            if g is None:
                g = np.zeros_like(p.data)
            m = self.state.m[name]
            v = self.state.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and self.decays(name):
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * update.astype(p.data.dtype, copy=False)


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


class SynthDataset:
    """Class-conditional Gaussian color blobs: class k sits at a fixed
    position on a circle with its own color, over light background noise.
    Linearly separable at desk scale, deterministic per seed."""

    def __init__(
        self,
        seed: int = 0,
        num_classes: int = 4,
        resolution: int = 32,
        samples: int = 256,
        eval_fraction: float = 0.2,
    ):
        if num_classes < 2:
            raise ConfigError("need at least two classes")
        rng = np.random.default_rng([seed, 0xDA7A])
        r = resolution
        self.seed = seed
        self.num_classes = num_classes
        self.resolution = r
        labels = rng.integers(0, num_classes, size=samples)
        yy, xx = np.mgrid[0:r, 0:r].astype(np.float32)
        palette = np.stack(
            [
                0.25 + 0.75 * np.cos(2 * np.pi * (np.arange(num_classes) / num_classes + ph))
                for ph in (0.0, 1 / 3, 2 / 3)
            ],
            axis=1,
        ).astype(np.float32)  # (classes, 3), distinct colors
        images = np.empty((samples, 3, r, r), dtype=np.float32)
        for i, k in enumerate(labels):
            angle = 2 * np.pi * k / num_classes
            cx = r / 2 + (r / 4) * np.cos(angle) + rng.normal(0, r / 32)
            cy = r / 2 + (r / 4) * np.sin(angle) + rng.normal(0, r / 32)
            blob = np.exp(-(((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * (r / 8) ** 2)))
            images[i] = palette[k][:, None, None] * blob[None]
        images += rng.normal(0, 0.05, size=images.shape).astype(np.float32)
        self.images = images
        self.labels = labels.astype(np.int64)
        split = int(samples * (1.0 - eval_fraction))
        self.train_idx = np.arange(split)
        self.eval_idx = np.arange(split, samples)

    def batches(self, batch_size: int, rng: np.random.Generator):
        order = rng.permutation(self.train_idx)
        for start in range(0, len(order), batch_size):
            sel = order[start : start + batch_size]
            yield self.images[sel], self.labels[sel]

    def eval_split(self):
        return self.images[self.eval_idx], self.labels[self.eval_idx]


def load_image_dir(path) -> "SynthDataset":
    """Dataset from a directory of .npy images plus a labels.csv index
    (``filename,label`` per line). No third-party loaders."""
    import os

    index = os.path.join(path, "labels.csv")
    if not os.path.exists(index):
        raise ConfigError(f"missing labels index {index}")
    names, labels = [], []
    with open(index) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("filename"):
                continue
            fname, label = line.rsplit(",", 1)
            names.append(fname)
            labels.append(int(label))
    if not names:
        raise ConfigError(f"empty labels index {index}")
    images = np.stack([np.load(os.path.join(path, n)).astype(np.float32) for n in names])
    if images.ndim != 4 or images.shape[1] != 3:
        raise ConfigError(f"images must be (3, r, r) arrays, got {images.shape[1:]}")
    ds = SynthDataset.__new__(SynthDataset)
    ds.num_classes = int(max(labels)) + 1
    ds.resolution = images.shape[-1]
    ds.images = images
    ds.labels = np.asarray(labels, dtype=np.int64)
    split = max(1, int(len(names) * 0.8))
    ds.train_idx = np.arange(split)
    ds.eval_idx = np.arange(split, len(names))
    return ds


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainSettings:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.05
    warmup_epochs: int = 5
    label_smoothing: float = 0.1
    loss_mode: str = "onehot"
    seed: int = 0

    def __post_init__(self):
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"unknown loss mode {self.loss_mode!r}")


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    train_acc: float
    eval_acc: float
    lr: float


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, 0x5EED])


def _batch_rng(seed: int, epoch: int, batch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, batch, 0xBA7C])


def _teacher_logits(teacher, x: Tensor, rng: np.random.Generator) -> Tensor:
    """Frozen-teacher forward that sees the student's stochastic view.

    Runs in train mode with an rng twin of the student's, so an identical
    architecture with identical weights produces bit-identical logits (the
    distillation fixed point); the running-stat side effect is rolled back.
    """
    snapshot = {k: v.copy() for k, v in teacher.buffers.items()}
    try:
        logits = teacher.forward(x, mode="train", rng=rng)
    finally:
        teacher.buffers.update(snapshot)
    return logits.detach()


def _model_loss(model, images, labels, settings, teacher, mode, rng, teacher_rng=None):
    x = Tensor(images)
    mixed = hasattr(model, "forward_branches")
    if mixed:
        logits_a, logits_b = model.forward_branches(x, mode=mode, rng=rng)
        outputs = [logits_a, logits_b]
    else:
        outputs = [model.forward(x, mode=mode, rng=rng)]
    if settings.loss_mode == "distill":
        t_logits = _teacher_logits(teacher, x, teacher_rng)
        losses = [soft_distill_loss(o, t_logits) for o in outputs]
    else:
        losses = [smoothed_ce_loss(o, labels, settings.label_smoothing) for o in outputs]
    loss = losses[0] if len(losses) == 1 else mul(sum(losses[1:], losses[0]), 1.0 / len(losses))
    return loss, outputs[0]


def evaluate(model, dataset, batch_size: int = 64) -> float:
    images, labels = dataset.eval_split()
    if len(labels) == 0:
        return float("nan")
    hits = 0
    for start in range(0, len(labels), batch_size):
        x = Tensor(images[start : start + batch_size])
        logits = model.forward(x, mode="eval")
        hits += int((logits.data.argmax(axis=1) == labels[start : start + batch_size]).sum())
    return hits / len(labels)


def train_loop(
    model,
    dataset,
    settings: TrainSettings,
    teacher=None,
    optimizer: Optional[AdamW] = None,
    start_epoch: int = 0,
) -> tuple[list[EpochMetrics], AdamW]:
    """Standard loop: shuffled minibatches, taped backward, AdamW with the
    warmup+cosine schedule. Returns per-epoch metrics and the optimizer (so
    callers can checkpoint its state)."""
    if settings.loss_mode == "distill":
        if teacher is None:
            raise ConfigError("distillation requires a teacher model")
        if teacher.config.num_classes != model.config.num_classes:
            raise ConfigError("teacher logits shape does not match the student")
    if optimizer is None:
        optimizer = AdamW(
            model.registry, lr=settings.lr, weight_decay=settings.weight_decay
        )
    history: list[EpochMetrics] = []
    for epoch in range(start_epoch, settings.epochs):
        shuffle_rng = _epoch_rng(settings.seed, epoch)
        lr = lr_schedule(epoch, settings.epochs, settings.warmup_epochs, settings.lr)
        losses, hits, seen = [], 0, 0
        for batch_idx, (images, labels) in enumerate(
            dataset.batches(settings.batch_size, shuffle_rng)
        ):
            with Tape() as tape:
                loss, logits = _model_loss(
                    model, images, labels, settings, teacher, "train",
                    _batch_rng(settings.seed, epoch, batch_idx),
                    teacher_rng=_batch_rng(settings.seed, epoch, batch_idx),
                )
            if not np.isfinite(loss.data).all():
                raise NumericError(f"training loss diverged at epoch {epoch}")
            grads = backward(loss, tape)
            optimizer.step(grads, lr=lr)
            losses.append(loss.item())
            hits += int((logits.data.argmax(axis=1) == labels).sum())
            seen += len(labels)
        history.append(
            EpochMetrics(
                epoch=epoch,
                loss=float(np.mean(losses)),
                train_acc=hits / max(seen, 1),
                eval_acc=evaluate(model, dataset),
                lr=lr,
            )
        )
    return history, optimizer


def write_metrics_csv(path, history: list[EpochMetrics]) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_CSV_SCHEMA.split(","))
        for m in history:
            writer.writerow([m.epoch, f"{m.loss:.6f}", f"{m.train_acc:.4f}",
                             f"{m.eval_acc:.4f}", f"{m.lr:.6g}"])


# ---------------------------------------------------------------------------
# Loss-landscape slicing
# ---------------------------------------------------------------------------


def landscape_slice(
    model,
    dataset,
    radius: float,
    grid: int,
    settings: Optional[TrainSettings] = None,
    seed: int = 0,
    max_batch: int = 64,
) -> np.ndarray:
    """Mean eval loss on a 2-d slice through weight space.

    Two random directions, filter-normalized per parameter tensor (each
    direction tensor rescaled to its parameter's norm), sampled on a
    grid x grid lattice over [-radius, radius]^2. The center cell is the
    unperturbed loss exactly; ``grid`` must be odd so the center exists.
    """
    if grid < 1 or grid % 2 == 0:
        raise ConfigError("grid must be odd so the center is the current weights")
    settings = settings or TrainSettings(label_smoothing=0.0)
    rng = np.random.default_rng([seed, 0x10CA1])
    names = sorted(model.registry)
    theta = {n: model.registry[n].data.copy() for n in names}
    dirs = []
    for _ in range(2):
        d = {}
        for n in names:
            v = rng.normal(size=theta[n].shape)
            norm = np.linalg.norm(v)
            scale = np.linalg.norm(theta[n]) / norm if norm > 0 else 0.0
            d[n] = (v * scale).astype(theta[n].dtype)
        dirs.append(d)

    images, labels = dataset.eval_split()
    if len(labels) == 0:
        images, labels = dataset.images[dataset.train_idx], dataset.labels[dataset.train_idx]
    images, labels = images[:max_batch], labels[:max_batch]

    def eval_loss() -> float:
        x = Tensor(images)
        logits = model.forward(x, mode="eval")
        return smoothed_ce_loss(logits, labels, settings.label_smoothing).item()

    coords = np.linspace(-radius, radius, grid)
    coords[grid // 2] = 0.0  # exact center: theta + 0*d1 + 0*d2 is theta bitwise
    surface = np.empty((grid, grid))
    try:
        for i, a in enumerate(coords):
            for j, b in enumerate(coords):
                for n in names:
                    model.registry[n].data[...] = theta[n] + a * dirs[0][n] + b * dirs[1][n]
                surface[i, j] = eval_loss()
    finally:
        for n in names:
            model.registry[n].data[...] = theta[n]
    return surface


def write_landscape_csv(path, surface: np.ndarray) -> None:
    np.savetxt(path, surface, delimiter=",", fmt="%.8g")

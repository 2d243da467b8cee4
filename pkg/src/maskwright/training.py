"""Optimizers, parameter freezing, and the two training phases.

Phase one fits the base network on the task loss alone. Phase two freezes
the base, assembles the masked model, and trains only the explanation
network on task loss plus mask penalties. Both phases are bitwise
deterministic given (seed, data, config).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward, tape
from .errors import ConfigError, DivergenceError, ShapeError, StateError
from .layers import ModelGraph
from .objectives import (
    RegularizerConfig,
    cross_entropy_loss,
    mse_loss,
    regularizer_terms,
)

LOG_HEADER = "epoch\ttask_loss\tl1\tl2\tentropy\tmetric\tmean_mask"


class SGD:
    """Plain gradient descent: p <- p - lr * g."""

    kind = "sgd"

    def __init__(self, lr: float = 1e-2):
        if lr <= 0:
            raise ConfigError(f"lr must be positive, got {lr}")
        self.lr = lr
        self.step_count = 0

    def step(self, params: dict):
        _require_grads(params)
        self.step_count += 1
        for p in params.values():
            p.data -= self.lr * p.grad
            p.zero_grad()


class Adam:
    """Bias-corrected adaptive moments (beta1=0.9, beta2=0.999, eps=1e-8).

    ``max_step_ratio`` tracks max |update| / lr across all steps taken, which
    tests use to assert the effective-step bound.
    """

    kind = "adam"

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ConfigError(f"lr must be positive, got {lr}")
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0
        self.max_step_ratio = 0.0

    def step(self, params: dict):
        _require_grads(params)
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in params.items():
            g = p.grad
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if update.size:
                self.max_step_ratio = max(self.max_step_ratio, np.abs(update).max() / self.lr)
            p.data -= update
            p.zero_grad()


def _require_grads(params: dict):
    for name, p in params.items():
        if p.grad is None:
            raise StateError(f"trainable parameter {name!r} has no gradient")


def make_optimizer(kind: str, lr: float | None = None):
    """Build an optimizer; lr defaults to 1e-3 for adam and 1e-2 for sgd."""
    if kind == "adam":
        return Adam(lr=1e-3 if lr is None else lr)
    if kind == "sgd":
        return SGD(lr=1e-2 if lr is None else lr)
    raise ConfigError(f"unknown optimizer {kind!r}")


def optimizer_step(opt, params: dict):
    """Apply one update to every tensor in ``params`` and zero their grads."""
    opt.step(params)


def freeze_parameters(model: ModelGraph, frozen: bool):
    """Toggle trainability (and gradient flow) of every model weight.

    Buffers such as batch-norm running statistics are never trainable and
    are not touched here.
    """
    for name, p in model.params.items():
        p.requires_grad = not frozen
        model.trainable[name] = not frozen
        p.grad = None if frozen else np.zeros_like(p.data)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    shuffle: bool = True
    reg: RegularizerConfig = field(default_factory=RegularizerConfig)
    eval_every: int = 1
    lr: float | None = None
    optimizer: str = "adam"
    max_steps: int | None = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0 when given")


@dataclass
class LogRow:
    epoch: int
    task_loss: float
    l1: float
    l2: float
    entropy: float
    metric: float
    mean_mask: float

    def line(self) -> str:
        return "\t".join(
            [str(self.epoch)]
            + [
                f"{v:.6f}"
                for v in (self.task_loss, self.l1, self.l2, self.entropy, self.metric, self.mean_mask)
            ]
        )


class TrainLog:
    """Line-delimited per-epoch records of losses, penalties, and metrics."""

    def __init__(self):
        self.rows: list[LogRow] = []

    def append(self, row: LogRow):
        self.rows.append(row)

    def lines(self) -> list[str]:
        return [LOG_HEADER] + [r.line() for r in self.rows]

    def text(self) -> str:
        return "\n".join(self.lines()) + "\n"

    def last_metric(self) -> float:
        for row in reversed(self.rows):
            if not np.isnan(row.metric):
                return row.metric
        return float("nan")


def _task_loss(out: Tensor, targets, classification: bool) -> Tensor:
    if classification:
        return cross_entropy_loss(out, targets)
    pred = out
    if pred.ndim == 2 and pred.shape[1] == 1:
        pred = ad.reshape(pred, (pred.shape[0],))
    return mse_loss(pred, targets)


def _infer_metric(forward, inputs, targets, classification: bool, batch_size: int = 256) -> float:
    outs = []
    for start in range(0, len(inputs), batch_size):
        outs.append(forward(inputs[start : start + batch_size]).data)
    out = np.concatenate(outs, axis=0)
    if classification:
        pred = np.argmax(out, axis=1)
        return float(np.mean(pred == np.asarray(targets)))
    vals = out.reshape(len(targets))
    return float(np.sqrt(np.mean((vals - np.asarray(targets)) ** 2)))


def _check_finite(value: float, epoch: int, batch: int):
    if not np.isfinite(value):
        raise DivergenceError(f"non-finite loss {value} at epoch {epoch}, batch {batch}")


def train_base(model: ModelGraph, data, cfg: TrainConfig) -> TrainLog:
    """Fit the base network on its task loss alone.

    The log's penalty columns are zero and mean_mask is 1.0 (an unmasked
    pass is an identity mask).
    """
    n = len(data.targets)
    if n == 0:
        raise ConfigError("dataset is empty")
    classification = data.is_classification
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(cfg.optimizer, cfg.lr)
    log = TrainLog()
    model.set_mode("train")
    steps = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        total, batches = 0.0, 0
        for bstart in range(0, n, cfg.batch_size):
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
            idx = order[bstart : bstart + cfg.batch_size]
            with tape():
                out = model.forward(data.inputs[idx], rng=rng, mode="train")
                loss = _task_loss(out, data.targets[idx], classification)
                value = loss.item()
                _check_finite(value, epoch, batches)
                backward(loss)
            optimizer_step(opt, model.trainable_params())
            total += value
            batches += 1
            steps += 1
        if batches == 0:
            break
        metric = float("nan")
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs - 1:
            model.set_mode("infer")
            metric = _infer_metric(
                lambda xs: model.forward(xs, mode="infer"), data.inputs, data.targets, classification
            )
            model.set_mode("train")
        log.append(LogRow(epoch, total / batches, 0.0, 0.0, 0.0, metric, 1.0))
    model.set_mode("infer")
    return log


def train_explainer(mm, data, cfg: TrainConfig) -> TrainLog:
    """Train the explanation network against the frozen base model.

    Minimizes task loss of the masked forward pass plus the configured
    penalties on the mask (batch-mean convention). Defensively re-freezes
    the base model first.
    """
    from .masking import masked_forward  # local import to avoid a cycle

    n = len(data.targets)
    if n == 0:
        raise ConfigError("dataset is empty")
    freeze_parameters(mm.split.feature_extractor, True)
    freeze_parameters(mm.split.classifier, True)
    classification = data.is_classification
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(cfg.optimizer, cfg.lr)
    log = TrainLog()
    mm.explainer.set_mode("train")
    steps = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        sums = np.zeros(4)
        mask_mean, batches = 0.0, 0
        for bstart in range(0, n, cfg.batch_size):
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
            idx = order[bstart : bstart + cfg.batch_size]
            with tape():
                out, mask = masked_forward(mm, data.inputs[idx])
                task = _task_loss(out, data.targets[idx], classification)
                l1, l2, ent = regularizer_terms(mask, cfg.reg, batch_axis=0)
                loss = ad.add(ad.add(ad.add(task, l1), l2), ent)
                value = loss.item()
                _check_finite(value, epoch, batches)
                backward(loss)
            optimizer_step(opt, mm.explainer.trainable_params())
            sums += [task.item(), l1.item(), l2.item(), ent.item()]
            mask_mean += float(mask.data.mean())
            batches += 1
            steps += 1
        if batches == 0:
            break
        metric = float("nan")
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs - 1:
            mm.explainer.set_mode("infer")
            metric = _infer_metric(
                lambda xs: masked_forward(mm, xs)[0], data.inputs, data.targets, classification
            )
            mm.explainer.set_mode("train")
        avg = sums / batches
        log.append(LogRow(epoch, avg[0], avg[1], avg[2], avg[3], metric, mask_mean / batches))
    mm.explainer.set_mode("infer")
    return log

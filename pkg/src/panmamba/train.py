"""Deterministic training loop: L1 loss, Adam, per-epoch cosine decay, global-norm clipping."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import ImageTriple
from .errors import ConfigError, DimensionError, UsageError
from .metrics import reduced_resolution_report
from .model import PanMambaModel, forward
from .tensor import Tensor, backward, no_grad, sub, tabs

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr_init: float = 5e-4
    lr_final: float = 5e-8
    epochs: int = 500
    clip_norm: float = 4.0
    batch_size: int = 4
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_every: int = 0  # epochs between metric evaluations; 0 disables
    max_steps: int = 0  # stop after this many optimizer steps; 0 means no cap

    def validate(self) -> TrainConfig:
        if not 0 < self.lr_final <= self.lr_init:
            raise ConfigError(f"need 0 < lr_final <= lr_init, got {self.lr_final}, {self.lr_init}")
        if self.clip_norm <= 0:
            raise ConfigError(f"clip_norm must be positive, got {self.clip_norm}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.adam_eps <= 0:
            raise ConfigError("invalid Adam hyperparameters")
        return self


def l1_loss(pred: Tensor, gt) -> Tensor:
    """Mean absolute error; the subgradient at ties is 0."""
    gt_t = gt if isinstance(gt, Tensor) else Tensor(np.asarray(gt, dtype=pred.dtype))
    if pred.shape != gt_t.shape:
        raise DimensionError(f"l1_loss: {pred.shape} vs {gt_t.shape}")
    return tabs(sub(pred, gt_t)).mean()


def cosine_lr(epoch: float, cfg: TrainConfig, horizon: int | None = None) -> float:
    """``lr_final + (lr_init - lr_final) * (1 + cos(pi * epoch / horizon)) / 2``.

    Written as a convex combination so both endpoints come out exact.
    """
    horizon = cfg.epochs if horizon is None else horizon
    if not 0 <= epoch <= horizon:
        raise UsageError(f"epoch {epoch} outside [0, {horizon}]")
    w = 0.5 * (1.0 + math.cos(math.pi * epoch / horizon)) if horizon > 0 else 1.0
    return cfg.lr_init * w + cfg.lr_final * (1.0 - w)


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.dot(g.ravel().astype(np.float64), g.ravel().astype(np.float64)))
                         for g in grads))


def clip_global_norm(grads: Sequence[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Scale all gradients by ``max_norm / norm`` when the global L2 norm exceeds ``max_norm``.

    Returns the (possibly rescaled) gradients and the pre-clip norm.
    """
    if max_norm <= 0:
        raise UsageError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return list(grads), norm
    scale = max_norm / norm
    return [g * np.asarray(scale, dtype=g.dtype) for g in grads], norm


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> OptimizerState:
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: OptimizerState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> OptimizerState:
    """Bias-corrected Adam update, applied in place to ``params`` and ``state``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("adam_step: params, grads and state differ in length")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        upd = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - upd).astype(p.dtype, copy=False)
    return state


@dataclass
class TrainLog:
    step_loss: list[float] = field(default_factory=list)
    step_lr: list[float] = field(default_factory=list)
    grad_norm: list[float] = field(default_factory=list)
    clipped_norm: list[float] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)

    def write_csv(self, path) -> None:
        rows = self.epochs
        if not rows:
            return
        keys = list(dict.fromkeys(k for row in rows for k in row))
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            w.writerows(rows)

    def write_steps_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "lr", "loss", "grad_norm", "clipped_norm"])
            for i, row in enumerate(zip(self.step_lr, self.step_loss, self.grad_norm, self.clipped_norm)):
                w.writerow([i, *(f"{x:.10g}" for x in row)])


def _batch(triples: Sequence[ImageTriple], dtype):
    pan = np.stack([t.pan for t in triples]).astype(dtype)
    lrms = np.stack([t.lrms for t in triples]).astype(dtype)
    gt = np.stack([t.gt for t in triples]).astype(dtype)
    return pan, lrms, gt


def check_compatible(model: PanMambaModel, dataset: Sequence[ImageTriple]) -> None:
    cfg = model.config
    if not dataset:
        raise UsageError("empty dataset")
    first = dataset[0].pan.shape
    for i, t in enumerate(dataset):
        if t.gt is None:
            raise DimensionError(f"sample {i}: training needs ground truth")
        if t.pan.shape != first:
            raise DimensionError(f"sample {i}: pan {t.pan.shape} differs from {first}; patch the data first")
        if t.lrms.shape[0] != cfg.ms_bands or t.gt.shape[0] != cfg.ms_bands:
            raise DimensionError(f"sample {i}: {t.lrms.shape[0]} bands, model expects {cfg.ms_bands}")
        if t.ratio != cfg.ratio or t.pan.shape[1] != cfg.ratio * t.lrms.shape[1]:
            raise DimensionError(f"sample {i}: ratio {t.ratio} but model uses {cfg.ratio}")


def train_step(model: PanMambaModel, params: list[Tensor], state: OptimizerState, batch, lr: float,
               cfg: TrainConfig) -> tuple[float, float, float]:
    """One forward/backward/clip/Adam step; returns (loss, grad norm, post-clip norm)."""
    pan, lrms, gt = batch
    model.zero_grad()
    loss = l1_loss(forward(model, pan, lrms), gt)
    backward(loss)
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]
    grads, norm = clip_global_norm(grads, cfg.clip_norm)
    clipped = global_norm(grads)
    adam_step(params, grads, state, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    return loss.item(), norm, clipped


def evaluate(model: PanMambaModel, dataset: Sequence[ImageTriple]) -> dict[str, float]:
    rows = []
    with no_grad():
        for t in dataset:
            pred = forward(model, t.pan, t.lrms).data[0]
            rows.append(reduced_resolution_report(np.clip(pred, 0, 1), t.gt, model.config.ratio).items())
    keys = [k for k, _ in rows[0]]
    return {k: float(np.mean([dict(r)[k] for r in rows])) for k in keys}


def train(model: PanMambaModel, dataset: Sequence[ImageTriple], cfg: TrainConfig,
          eval_set: Sequence[ImageTriple] | None = None,
          on_epoch: Callable[[int, PanMambaModel, TrainLog], None] | None = None) -> tuple[PanMambaModel, TrainLog]:
    """Train in place. The last epoch runs at ``lr_final``; shuffling is seeded by ``cfg.seed``."""
    cfg.validate()
    check_compatible(model, dataset)
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    state = OptimizerState.zeros_like(params)
    tlog = TrainLog()
    horizon = max(cfg.epochs - 1, 1)
    dtype = model.config.dtype
    for epoch in range(cfg.epochs):
        lr = cosine_lr(min(epoch, horizon), cfg, horizon) if cfg.epochs > 1 else cfg.lr_init
        order = rng.permutation(len(dataset))
        losses = []
        for s in range(0, len(order), cfg.batch_size):
            batch = _batch([dataset[i] for i in order[s:s + cfg.batch_size]], dtype)
            loss, norm, clipped = train_step(model, params, state, batch, lr, cfg)
            losses.append(loss)
            tlog.step_loss.append(loss)
            tlog.step_lr.append(lr)
            tlog.grad_norm.append(norm)
            tlog.clipped_norm.append(clipped)
            if cfg.max_steps and state.step >= cfg.max_steps:
                break
        row = {"epoch": epoch, "lr": lr, "loss": float(np.mean(losses))}
        if cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
            row.update(evaluate(model, eval_set if eval_set is not None else dataset))
        tlog.epochs.append(row)
        log.info("epoch %d lr %.3g loss %.6f", epoch, lr, row["loss"])
        if on_epoch is not None:
            on_epoch(epoch, model, tlog)
        if cfg.max_steps and state.step >= cfg.max_steps:
            break
    return model, tlog

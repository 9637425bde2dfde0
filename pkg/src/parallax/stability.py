"""Optimiser, schedule, clipping and divergence monitoring for classifier training."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import IO, Iterable, Sequence

import numpy as np

from parallax import tensor as T
from parallax.errors import ExplosionError, UsageError
from parallax.metrics import accuracy
from parallax.tensor import Tensor

LOGIT_CAP = 4000.0
GRAD_CAP = 1e4
PATIENCE = 3


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.05
    epochs: int = 200
    batch_size: int = 128
    clip_threshold: float | None = 10.0
    milestones: tuple = (0.3, 0.6, 0.9)
    lr_decay_factor: float = 0.1
    seed: int = 0
    augment_flips: bool = True
    max_steps: int | None = None
    logit_cap: float = LOGIT_CAP
    grad_cap: float = GRAD_CAP
    patience: int = PATIENCE

    def __post_init__(self):
        self.milestones = tuple(float(m) for m in self.milestones)
        self.validate()

    def validate(self) -> None:
        if not self.lr > 0:
            raise UsageError(f"lr must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise UsageError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.epochs < 1 or self.batch_size < 1:
            raise UsageError("epochs and batch_size must be >= 1")
        if self.clip_threshold is not None and not self.clip_threshold > 0:
            raise UsageError(f"clip_threshold must be positive when set, got {self.clip_threshold}")
        ms = self.milestones
        if any(not 0 < m < 1 for m in ms) or any(b <= a for a, b in zip(ms, ms[1:])):
            raise UsageError(f"milestones must be strictly increasing in (0, 1), got {ms}")
        if self.patience < 1:
            raise UsageError("patience must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d


# Presets: "stabilizing" is the recipe that trains the parallel block reliably;
# "provocation" is the unclipped, high-lr setting used to elicit divergence.
PRESETS = {
    "stabilizing": dict(lr=1e-4, weight_decay=0.05, clip_threshold=10.0),
    "provocation": dict(lr=1e-3, weight_decay=0.0, clip_threshold=None),
}


def preset(name: str, **overrides) -> TrainConfig:
    return TrainConfig(**{**PRESETS[name], **overrides})


@dataclass
class StepStats:
    step: int
    epoch: int
    loss: float
    max_abs_logit: float
    grad_max: float
    grad_l2: float
    lr: float

    @property
    def finite(self) -> bool:
        return all(math.isfinite(v) for v in (self.loss, self.max_abs_logit, self.grad_max, self.grad_l2))

    def record(self) -> dict:
        return {
            "step": self.step,
            "epoch": self.epoch,
            "loss": self.loss,
            "max_abs_logit": self.max_abs_logit,
            "grad_max": self.grad_max,
            "grad_l2": self.grad_l2,
            "lr": self.lr,
        }


# ----------------------------------------------------------------------
# AdamW
# ----------------------------------------------------------------------
@dataclass
class OptimizerState:
    m: list
    v: list
    step: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor], betas=(0.9, 0.999), eps=1e-8) -> "OptimizerState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], 0, tuple(betas), eps)


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: OptimizerState,
               lr: float, weight_decay: float) -> None:
    """One AdamW update with decoupled weight decay and bias correction.

    Raises :class:`ExplosionError` before touching any parameter if a gradient is non-finite.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise UsageError("params, grads and optimizer state must align")
    for g in grads:
        if g is not None and not np.all(np.isfinite(g)):
            raise ExplosionError("non-finite gradient")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    decay = 1.0 - lr * weight_decay
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if weight_decay:
            p.data *= decay
        if g is None:
            g = np.zeros_like(p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v / c2)
        denom += state.eps
        p.data -= (lr / c1) * m / denom


class AdamW:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.state = OptimizerState.for_params(self.params, betas, eps)

    def step(self) -> None:
        adamw_step(self.params, [p.grad for p in self.params], self.state, self.lr, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ----------------------------------------------------------------------
# clipping, schedule, monitoring
# ----------------------------------------------------------------------
def global_norm(grads: Iterable[np.ndarray | None]) -> float:
    """Joint L2 norm; scaled by the largest magnitude so huge float64 entries do not overflow."""
    grads = [g.astype(np.float64, copy=False) for g in grads if g is not None and g.size]
    if not grads:
        return 0.0
    scale = max(float(np.max(np.abs(g))) for g in grads)
    if scale == 0.0 or not math.isfinite(scale):
        return scale
    total = sum(float(np.sum((g / scale) ** 2)) for g in grads)
    return scale * math.sqrt(total)


def clip_global_norm(grads: Sequence[np.ndarray | None], threshold: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``threshold``; returns the factor."""
    if not threshold > 0:
        raise UsageError("clip threshold must be positive")
    norm = global_norm(grads)
    if not norm > threshold:
        return 1.0
    factor = threshold / (norm + 1e-6)
    for g in grads:
        if g is not None:
            g *= g.dtype.type(factor)
    return factor


def multistep_lr(base_lr: float, epoch: int, total_epochs: int, milestones=(0.3, 0.6, 0.9),
                 factor: float = 0.1) -> float:
    """Decay ``base_lr`` by ``factor`` at epochs ``floor(fraction * total_epochs)``."""
    if not 0 <= epoch < total_epochs:
        raise UsageError(f"epoch {epoch} outside [0, {total_epochs})")
    passed = sum(1 for m in milestones if epoch >= math.floor(m * total_epochs))
    return base_lr * factor**passed


def record_step_stats(model, logits: Tensor, step: int, loss: float = float("nan"), lr: float = 0.0,
                      epoch: int = 0) -> StepStats:
    grads = [p.grad for p in model.parameters() if p.grad is not None]
    grad_max = max((float(np.max(np.abs(g))) for g in grads if g.size), default=0.0)
    return StepStats(
        step=step,
        epoch=epoch,
        loss=float(loss),
        max_abs_logit=float(np.max(np.abs(logits.data))) if logits.size else 0.0,
        grad_max=grad_max,
        grad_l2=global_norm(grads),
        lr=float(lr),
    )


def detect_explosion(stats: StepStats, logit_cap: float = LOGIT_CAP, grad_cap: float = GRAD_CAP) -> bool:
    if not stats.finite:
        return True
    return stats.max_abs_logit > logit_cap or stats.grad_max > grad_cap


# ----------------------------------------------------------------------
# metric records
# ----------------------------------------------------------------------
def _json_value(v):
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, dict):
        return {k: _json_value(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_value(x) for x in v]
    return v


def emit_metrics(stream: IO[str], record: dict) -> None:
    """Write one JSON object per line; non-finite reals become the strings "nan"/"inf"/"-inf"."""
    stream.write(json.dumps(_json_value(record), separators=(",", ":")) + "\n")
    stream.flush()


def epoch_record(epoch: int, split: str, acc: float) -> dict:
    return {"epoch": epoch, "split": split, "accuracy": float(acc)}


# ----------------------------------------------------------------------
# training loop
# ----------------------------------------------------------------------
@dataclass
class TrainResult:
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    halted: bool = False
    explosion: StepStats | None = None
    onset_step: int | None = None

    @property
    def final_train_accuracy(self) -> float | None:
        train = [r["accuracy"] for r in self.epochs if r["split"] == "train"]
        return train[-1] if train else None

    @property
    def final_test_accuracy(self) -> float | None:
        test = [r["accuracy"] for r in self.epochs if r["split"] == "test"]
        return test[-1] if test else None


def evaluate(model, dataset, batch_size: int = 256) -> float:
    """Top-1 accuracy of ``model`` on a labelled dataset (no augmentation)."""
    correct = 0.0
    with T.no_grad():
        for start in range(0, len(dataset), batch_size):
            x = dataset.images[start : start + batch_size]
            y = dataset.labels[start : start + batch_size]
            correct += accuracy(model(Tensor(x)).data, y) * len(y)
    return correct / len(dataset)


class Trainer:
    """Epoch-resumable classifier training with per-step stability statistics.

    Each step: seeded shuffle -> optional flip -> forward -> cross-entropy ->
    backward -> stats -> clip -> AdamW; the learning rate follows
    :func:`multistep_lr`.  Training halts when :func:`detect_explosion` fires
    on ``patience`` consecutive steps.
    """

    def __init__(self, model, config: TrainConfig, sink: IO[str] | None = None):
        self.model = model
        self.config = config
        self.params = model.parameters()
        self.opt_state = OptimizerState.for_params(self.params)
        self.rng = np.random.default_rng(config.seed)
        self.epoch = 0
        self.step = 0
        self.sink = sink
        self.result = TrainResult()
        self._flagged_run = 0

    # -- persistence hooks --------------------------------------------
    def state(self) -> dict:
        return {
            "model": self.model.state_dict(),
            "m": list(self.opt_state.m),
            "v": list(self.opt_state.v),
            "opt_step": self.opt_state.step,
            "epoch": self.epoch,
            "step": self.step,
            "rng": self.rng.bit_generator.state,
            "flagged_run": self._flagged_run,
        }

    def load_state(self, state: dict) -> None:
        self.model.load_state_dict(state["model"])
        for dst, src in zip(self.opt_state.m, state["m"]):
            dst[...] = src
        for dst, src in zip(self.opt_state.v, state["v"]):
            dst[...] = src
        self.opt_state.step = int(state["opt_step"])
        self.epoch = int(state["epoch"])
        self.step = int(state["step"])
        self.rng.bit_generator.state = state["rng"]
        self._flagged_run = int(state.get("flagged_run", 0))

    # -- loop ------------------------------------------------------------
    def _emit(self, record: dict) -> None:
        if self.sink is not None:
            emit_metrics(self.sink, record)

    def run_epoch(self, train_set, test_set=None) -> bool:
        """Train one epoch; returns False when training halted."""
        cfg = self.config
        lr = multistep_lr(cfg.lr, self.epoch, cfg.epochs, cfg.milestones, cfg.lr_decay_factor)
        n = len(train_set)
        order = self.rng.permutation(n)
        correct = seen = 0
        for start in range(0, n, cfg.batch_size):
            if cfg.max_steps is not None and self.step >= cfg.max_steps:
                break
            idx = order[start : start + cfg.batch_size]
            x = train_set.images[idx]
            y = train_set.labels[idx]
            if cfg.augment_flips:
                flip = self.rng.random(len(idx)) < 0.5
                x = np.where(flip[:, None, None, None], x[..., ::-1], x)
            for p in self.params:
                p.grad = None
            logits = self.model(Tensor(x))
            loss = T.cross_entropy(logits, y)
            T.backward(loss)
            stats = record_step_stats(self.model, logits, self.step, loss.item(), lr, self.epoch)
            self.result.steps.append(stats)
            self._emit(stats.record())
            correct += int((np.argmax(logits.data, axis=-1) == y).sum())
            seen += len(idx)
            self.step += 1
            if detect_explosion(stats, cfg.logit_cap, cfg.grad_cap):
                self._flagged_run += 1
                if self._flagged_run >= cfg.patience:
                    self.result.halted = True
                    self.result.explosion = stats
                    self.result.onset_step = stats.step - cfg.patience + 1
                    self._emit({"halt": "explosion", "onset_step": self.result.onset_step, **stats.record()})
                    return False
            else:
                self._flagged_run = 0
            grads = [p.grad for p in self.params]
            if cfg.clip_threshold is not None:
                clip_global_norm(grads, cfg.clip_threshold)
            try:
                adamw_step(self.params, grads, self.opt_state, lr, cfg.weight_decay)
            except ExplosionError:
                pass  # step skipped; already counted as flagged
        if seen:
            rec = epoch_record(self.epoch, "train", correct / seen)
            self.result.epochs.append(rec)
            self._emit(rec)
        if test_set is not None:
            rec = epoch_record(self.epoch, "test", evaluate(self.model, test_set))
            self.result.epochs.append(rec)
            self._emit(rec)
        self.epoch += 1
        return True

    def fit(self, train_set, test_set=None, until_epoch: int | None = None) -> TrainResult:
        stop = self.config.epochs if until_epoch is None else min(until_epoch, self.config.epochs)
        while self.epoch < stop:
            if self.config.max_steps is not None and self.step >= self.config.max_steps:
                break
            if not self.run_epoch(train_set, test_set):
                break
        return self.result


def train_classifier(model, dataset, config: TrainConfig, test_set=None, sink: IO[str] | None = None) -> TrainResult:
    """Train ``model`` in place; returns the metric stream and explosion report (if any)."""
    return Trainer(model, config, sink).fit(dataset, test_set)

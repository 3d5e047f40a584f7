"""PK sampling, Adam, warm-up/step-decay schedule and the training loop."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data_io import Split, save_container
from .errors import ConfigError, ContractError, DataError, NumericError
from .losses import LOSS_COLUMNS, LossWeights, total_with_terms
from .model import MHSAModel, ModelConfig

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "epoch", "lr") + LOSS_COLUMNS + ("total",)


@dataclass(frozen=True)
class SamplerConfig:
    P_ids: int = 8
    K_inst: int = 4

    def __post_init__(self):
        if self.P_ids < 2 or self.K_inst < 2:
            raise ConfigError("PK sampling needs P_ids >= 2 and K_inst >= 2")

    @property
    def batch_size(self) -> int:
        return self.P_ids * self.K_inst


def sample_batch(ids: np.ndarray, cfg: SamplerConfig, rng: np.random.Generator) -> np.ndarray:
    """Indices of a PK batch: ``P_ids`` identities, each exactly ``K_inst`` times.

    Identities with fewer than ``K_inst`` samples are drawn with replacement.
    """
    ids = np.asarray(ids)
    uniq = np.unique(ids)
    if len(uniq) < cfg.P_ids:
        raise DataError(f"{len(uniq)} identities available, batch needs {cfg.P_ids}")
    chosen = rng.choice(uniq, size=cfg.P_ids, replace=False)
    out = []
    for pid in chosen:
        pool = np.flatnonzero(ids == pid)
        out.append(rng.choice(pool, size=cfg.K_inst, replace=len(pool) < cfg.K_inst))
    return np.concatenate(out)


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float = 3e-3
    warmup_epochs: int = 3
    decay: tuple[tuple[int, float], ...] = ((20, 3e-4), (26, 3e-5))
    epochs: int = 30
    start_factor: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "decay", tuple(sorted((int(e), float(lr)) for e, lr in self.decay)))
        if self.base_lr <= 0 or any(lr <= 0 for _, lr in self.decay):
            raise ConfigError("learning rates must be > 0")
        if self.warmup_epochs < 0 or self.epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if not 0 < self.start_factor <= 1:
            raise ConfigError("start_factor must lie in (0, 1]")

    @classmethod
    def full_scale(cls) -> "LrSchedule":
        return cls(base_lr=1e-3, warmup_epochs=50, decay=((200, 1e-4), (300, 1e-5)), epochs=400)


def lr_at(epoch: int, sched: LrSchedule) -> float:
    """Linear warm-up from ``start_factor * base_lr``, then right-continuous step decays."""
    if not 0 <= epoch < max(sched.epochs, 1):
        raise ContractError(f"epoch {epoch} outside [0, {sched.epochs})")
    if epoch < sched.warmup_epochs:
        start = sched.start_factor * sched.base_lr
        return start + (sched.base_lr - start) * epoch / sched.warmup_epochs
    lr = sched.base_lr
    for point, value in sched.decay:
        if epoch >= point:
            lr = value
    return lr


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict, grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """In-place bias-corrected Adam update over ``params`` (name -> Tensor)."""
    for name in sorted(params):
        g = grads.get(name)
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name in sorted(params):
        p = params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name, np.zeros_like(p.data))
        v = state.v.get(name, np.zeros_like(p.data))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass(frozen=True)
class TrainSettings:
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    schedule: LrSchedule = field(default_factory=LrSchedule)
    loss: LossWeights = field(default_factory=LossWeights)
    seed: int = 0


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, last_good: dict[str, np.ndarray]):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class TrainResult:
    model: MHSAModel
    rows: list[dict]

    def metrics_csv(self) -> str:
        return format_metrics(self.rows)


def format_metrics(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    for row in rows:
        writer.writerow([row["step"], row["epoch"]] + [repr(float(row[c])) for c in METRIC_COLUMNS[2:]])
    return buf.getvalue()


def steps_per_epoch(n_samples: int, sampler: SamplerConfig) -> int:
    return max(1, math.ceil(n_samples / sampler.batch_size))


def train(model_cfg: ModelConfig, settings: TrainSettings, train_split: Split, out_dir=None,
          nan_hook=None) -> TrainResult:
    """Train end-to-end; optionally write ``checkpoint.mhsa`` and ``metrics.csv`` into ``out_dir``.

    ``nan_hook(step, loss)`` may replace the loss value (used to exercise the
    abort path).
    """
    rng = np.random.default_rng(settings.seed)
    model = MHSAModel(model_cfg, np.random.default_rng([settings.seed, 1]))
    ids = train_split.ids
    if ids.max() >= model_cfg.n_classes or ids.min() < 0:
        raise DataError("training identities must be labelled 0..n_classes-1")
    state = AdamState()
    rows: list[dict] = []
    n_steps = steps_per_epoch(len(train_split), settings.sampler)
    last_good = model.copy_state()
    train_gfb_ce = model_cfg.backbone.train_gfb_ce or not model_cfg.branch_enabled
    step = 0
    out_dir = Path(out_dir) if out_dir is not None else None
    for epoch in range(settings.schedule.epochs):
        lr = lr_at(epoch, settings.schedule)
        for _ in range(n_steps):
            idx = sample_batch(ids, settings.sampler, rng)
            try:
                with T.Tape() as tape:
                    feats = model.batch_features(train_split.x[idx], ids[idx], training=True)
                    loss, terms = total_with_terms(feats, settings.loss, train_gfb_ce)
                value = float(loss.data)
                if nan_hook is not None:
                    value = nan_hook(step, value)
                if not math.isfinite(value):
                    raise NumericError(f"non-finite loss {value}")
                for p in model.params.values():
                    p.grad = None
                T.backward(loss, tape, params=model.params.values())
                adam_step(model.params, {k: p.grad for k, p in model.params.items()}, state, lr)
            except NumericError as exc:
                _abort(out_dir, last_good, f"step {step}: {exc}")
            rows.append({"step": step, "epoch": epoch, "lr": lr, **terms, "total": value})
            last_good = model.copy_state()
            step += 1
        log.info("epoch %d lr %.3g loss %.4f", epoch, lr, rows[-1]["total"] if rows else float("nan"))
    result = TrainResult(model, rows)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_container(out_dir / "checkpoint.mhsa", model.state())
        (out_dir / "metrics.csv").write_text(result.metrics_csv())
    return result


def _abort(out_dir, last_good, message):
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_container(out_dir / "checkpoint.mhsa", last_good)
    raise TrainingAborted(message, last_good)

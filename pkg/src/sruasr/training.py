"""RAdam, cosine learning-rate schedule, gradient checking and LM training."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from .errors import DataError, TrainingError, UsageError
from .lm.model import LmConfig, LmModel, loss_and_grads, perplexity
from .tensor import Rng, seqsum

log = logging.getLogger(__name__)


@dataclass
class RAdamState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def rho_inf(self) -> float:
        return 2.0 / (1.0 - self.beta2) - 1.0

    def rho(self, t: int) -> float:
        b2t = self.beta2**t
        return self.rho_inf - 2.0 * t * b2t / (1.0 - b2t)


def radam_step(state: RAdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr=None):
    """One rectified-Adam update, in place.

    The bias-corrected first moment always drives the step.  The adaptive
    denominator and the variance-rectification factor are used only when the
    approximated SMA length ``rho_t`` exceeds 4; before that the update is
    plain momentum scaled by ``lr``.
    """
    lr = state.lr if lr is None else lr
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    rho_inf = state.rho_inf
    rho_t = state.rho(t)
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t
    rect = None
    if rho_t > 4.0:
        rect = math.sqrt((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
    for name, p in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / bias1
        if rect is None:
            p -= lr * m_hat
        else:
            p -= lr * rect * m_hat / (np.sqrt(v / bias2) + state.eps)
    return params, state


@dataclass
class CosineSchedule:
    base_lr: float
    total_steps: int
    min_lr: float = 0.0
    warmup_steps: int = 0

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps:
            raise UsageError(f"need 0 <= warmup ({self.warmup_steps}) < total steps ({self.total_steps})")
        if self.min_lr > self.base_lr:
            raise UsageError("min_lr must not exceed base_lr")


def lr_at(schedule: CosineSchedule, step: int) -> float:
    """Linear warmup to ``base_lr``, then cosine decay to ``min_lr`` at ``total_steps``."""
    if not 0 <= step <= schedule.total_steps:
        raise UsageError(f"step {step} outside [0, {schedule.total_steps}]")
    if step < schedule.warmup_steps:
        return schedule.base_lr * step / schedule.warmup_steps
    progress = (step - schedule.warmup_steps) / (schedule.total_steps - schedule.warmup_steps)
    return schedule.min_lr + 0.5 * (schedule.base_lr - schedule.min_lr) * (1.0 + math.cos(math.pi * progress))


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> float:
    total = float(seqsum(np.array([float(seqsum((g * g).ravel())) for g in grads.values()])))
    norm = math.sqrt(total)
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


# gradient checking ------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: tuple | None
    per_param: dict[str, float]
    flagged: list[tuple]

    def __str__(self):
        name, idx, a, n = self.worst if self.worst else ("-", (), 0.0, 0.0)
        return f"max relative error {self.max_rel_error:.3e} at {name}{list(idx)} (analytic {a:.6e}, numeric {n:.6e})"


def relative_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def grad_check(
    loss_fn: Callable[[dict[str, np.ndarray]], float],
    params: dict[str, np.ndarray],
    analytic: dict[str, np.ndarray],
    eps: float = 1e-5,
    flag_above: float = 1e-2,
) -> GradCheckReport:
    """Compare ``analytic`` to central differences of ``loss_fn`` coordinate by coordinate.

    ``loss_fn`` may return a wider float type (e.g. ``np.longdouble``); the
    difference quotient is formed in that type before rounding to float64.
    Parameters are perturbed in place and restored.
    """
    worst, max_err = None, 0.0
    per_param, flagged = {}, []
    for name, p in params.items():
        param_max = 0.0
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + eps
            up = loss_fn(params)
            p[idx] = old - eps
            down = loss_fn(params)
            p[idx] = old
            numeric = float((up - down) / (2 * type(up)(eps)))
            a = float(analytic[name][idx])
            err = relative_error(a, numeric)
            param_max = max(param_max, err)
            if err > flag_above:
                flagged.append((name, idx, a, numeric))
            if err > max_err or worst is None:
                max_err, worst = max(err, max_err), (name, idx, a, numeric)
        per_param[name] = param_max
    return GradCheckReport(max_err, worst, per_param, flagged)


# LM training -----------------------------------------------------------------

@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 1
    max_len: int = 275
    seed: int = 0
    lr: float = 2e-4
    min_lr: float = 0.0
    warmup_steps: int = 0
    eval_every: int = 200
    clip_norm: float | None = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise UsageError(f"unknown training options {sorted(unknown)}")
        return cls(**payload)


@dataclass
class CurveRow:
    step: int
    train_loss: float
    dev_ppl: float


@dataclass
class TrainResult:
    model: LmModel
    curve: list[CurveRow]
    step_losses: list[float]


def make_batches(corpus: Sequence[Sequence[int]], batch_size: int) -> list[list[int]]:
    """Index batches of similar length (sorted by length, then chunked)."""
    order = sorted(range(len(corpus)), key=lambda i: (len(corpus[i]), i))
    return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]


def pad_batch(corpus, indices, bos: int, eos: int, max_len: int | None):
    """Inputs, targets and 0/1 weights for one batch; long sequences are truncated."""
    rows = []
    for i in indices:
        src = [bos] + list(corpus[i])
        tgt = list(corpus[i]) + [eos]
        if max_len is not None:
            src, tgt = src[:max_len], tgt[:max_len]
        rows.append((src, tgt))
    T = max(len(s) for s, _ in rows)
    inputs = np.full((len(rows), T), eos, dtype=np.int64)
    targets = np.full((len(rows), T), eos, dtype=np.int64)
    weights = np.zeros((len(rows), T))
    for r, (src, tgt) in enumerate(rows):
        inputs[r, : len(src)] = src
        targets[r, : len(tgt)] = tgt
        weights[r, : len(tgt)] = 1.0
    return inputs, targets, weights


def train_lm(
    train: Sequence[Sequence[int]],
    dev: Sequence[Sequence[int]],
    model_config: LmConfig,
    config: TrainConfig,
    bos: int = 0,
    eos: int = 1,
    model: LmModel | None = None,
) -> TrainResult:
    """Next-token cross-entropy training with RAdam and cosine annealing.

    Dev perplexity is measured on full-length utterances every
    ``eval_every`` steps and after the last step.  The run is a pure
    function of the data, configs and ``config.seed``.
    """
    if not train:
        raise DataError("training corpus is empty")
    if not dev:
        raise DataError("dev corpus is empty")
    model = model if model is not None else LmModel.init(model_config, config.seed)
    rng = Rng(config.seed ^ 0x5EED5EED)
    dropout_rng = Rng(config.seed ^ 0xD0D0D0D0) if model.config.dropout > 0 else None
    batches = make_batches(train, config.batch_size)
    total = config.epochs * len(batches)
    schedule = CosineSchedule(config.lr, total, config.min_lr, min(config.warmup_steps, total - 1))
    state = RAdamState(config.lr, config.beta1, config.beta2, config.eps)
    curve: list[CurveRow] = []
    step_losses: list[float] = []
    window_loss, window_tokens = 0.0, 0.0
    step = 0
    for epoch in range(config.epochs):
        for b in rng.permutation(len(batches)):
            inputs, targets, weights = pad_batch(train, batches[b], bos, eos, config.max_len)
            count = float(weights.sum())
            loss, grads = loss_and_grads(model, inputs, targets, weights / count, dropout_rng)
            clip_global_norm(grads, config.clip_norm)
            radam_step(state, model.params, grads, lr_at(schedule, step))
            step += 1
            step_losses.append(loss)
            window_loss += loss * count
            window_tokens += count
            if step % config.eval_every == 0 or step == total:
                ppl = perplexity(model, dev, bos, eos)
                curve.append(CurveRow(step, window_loss / window_tokens, ppl))
                log.info("step %d epoch %d train_loss %.4f dev_ppl %.3f", step, epoch, curve[-1].train_loss, ppl)
                window_loss, window_tokens = 0.0, 0.0
    return TrainResult(model, curve, step_losses)


def write_curve(path, curve: Sequence[CurveRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "train_loss", "dev_ppl"])
        for row in curve:
            writer.writerow([row.step, repr(row.train_loss), repr(row.dev_ppl)])


def read_curve(path) -> list[CurveRow]:
    with open(path, encoding="utf-8") as fh:
        return [CurveRow(int(r["step"]), float(r["train_loss"]), float(r["dev_ppl"])) for r in csv.DictReader(fh)]


def window_means(losses: Sequence[float], window: int = 50) -> list[float]:
    """Means of consecutive non-overlapping windows (a trailing partial window is dropped)."""
    return [float(np.mean(losses[i : i + window])) for i in range(0, len(losses) - window + 1, window)]

"""Meta-training loop: per-variant likelihood objectives, Adam with cosine
annealing, reward dropout for bandit tasks, and checkpoint/resume hooks.

Runs are deterministic given the seed: every batch comes from a per-step
stream, so interrupting at a checkpoint and resuming reproduces the
uninterrupted trajectory exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .cnp import CnpModel, cnp_predict
from .errors import ConfigError, NumericError
from .model import (
    TnpModel,
    log_likelihood_diag,
    log_likelihood_joint,
    predict_autoregressive_teacher_forced,
    predict_diagonal,
    predict_joint,
    predict_next_point_conditionals,
)
from .rng import rng_stream
from .tasks import TaskBatch

_STREAM_BATCH = 101
_STREAM_DROPOUT = 202


@dataclass
class TrainConfig:
    steps: int = 20000
    batch_size: int = 16
    lr_max: float = 5e-4
    lr_min: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 10.0
    seed: int = 0
    objective: str = "meta"  # meta | pretrain
    reward_drop_rate: float = 0.0
    checkpoint_interval: int = 0
    log_interval: int = 200

    def __post_init__(self) -> None:
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError(f"bad steps/batch_size: {self.steps}/{self.batch_size}")
        if not 0.0 <= self.reward_drop_rate <= 1.0:
            raise ConfigError(f"reward_drop_rate must be in [0, 1], got {self.reward_drop_rate}")
        if self.objective not in ("meta", "pretrain"):
            raise ConfigError(f"objective must be meta|pretrain, got {self.objective!r}")
        if self.lr_max < self.lr_min:
            raise ConfigError("lr_max must be >= lr_min")


def cosine_lr(step: int, total: int, lr_max: float, lr_min: float = 0.0) -> float:
    """Cosine annealing from lr_max at step 0 to lr_min at step == total."""
    if not 0 <= step <= total:
        raise ConfigError(f"step {step} outside [0, {total}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total))


# -- objectives ----------------------------------------------------------------


def _locate_nonfinite(model, batch: TaskBatch) -> int:
    for b in range(batch.B):
        sub = replace(
            batch,
            x=batch.x[b : b + 1],
            y=batch.y[b : b + 1],
            context_observed=None
            if batch.context_observed is None
            else batch.context_observed[b : b + 1],
            target_mask=None if batch.target_mask is None else batch.target_mask[b : b + 1],
        )
        try:
            value = float(_loss_value(model, sub).data)
        except NumericError:
            return b
        if not np.isfinite(value):
            return b
    return -1


def _loss_value(model, batch: TaskBatch) -> Tensor:
    y_t = batch.y[:, batch.m :]
    if isinstance(model, CnpModel):
        return -log_likelihood_diag(cnp_predict(model, batch), y_t, batch.target_mask)
    variant = model.config.variant
    if variant == "D":
        pred = predict_diagonal(model, batch)
        return -log_likelihood_diag(pred, y_t, batch.target_mask)
    if variant == "A":
        pred = predict_autoregressive_teacher_forced(model, batch)
        return -log_likelihood_diag(pred, y_t, batch.target_mask)
    pred = predict_joint(model, batch)
    return -log_likelihood_joint(pred, y_t)


def training_loss(model, batch: TaskBatch) -> Tensor:
    """Negative mean per-target log likelihood for the model's variant."""
    loss = _loss_value(model, batch)
    if not np.isfinite(loss.data).all():
        bad = _locate_nonfinite(model, batch)
        raise NumericError(f"non-finite training loss at batch index {bad}")
    return loss


def pretraining_loss(model: TnpModel, x: np.ndarray, y: np.ndarray) -> Tensor:
    """Next-point objective: every point is predicted from its predecessors.

    Realized as the variant-A pass with an empty context, so the first point
    conditions only on its own input. Equals the meta objective under the
    m = 0 convention on the same sequence.
    """
    if not isinstance(model, TnpModel) or model.config.variant != "A":
        raise ConfigError("pretraining requires a variant-A model")
    pred = predict_next_point_conditionals(model, x, y)
    loss = -log_likelihood_diag(pred, np.asarray(y, dtype=float))
    if not np.isfinite(loss.data).all():
        raise NumericError("non-finite pretraining loss")
    return loss


def reward_dropout_mask(rng: np.random.Generator, batch: TaskBatch, rate: float) -> TaskBatch:
    """Hide context reward entries independently and mark them for regression.

    Hidden entries are zeroed with observed-flag 0. The returned batch lists
    every point as a prediction target: original context points carry loss
    weight only on their hidden entries, real targets on all entries, so the
    loss regresses exactly the hidden rewards plus the held-out points.
    """
    if not 0.0 <= rate <= 1.0:
        raise ConfigError(f"rate must be in [0, 1], got {rate}")
    if rate == 0.0:
        return batch
    B, N, d_y = batch.y.shape
    m = batch.m
    keep = (rng.random((B, m, d_y)) >= rate).astype(float)
    # the context points reappear in the target block so the hidden entries
    # can be regressed; loss weight is 1 - keep there and 1 on real targets
    x = np.concatenate([batch.x[:, :m], batch.x], axis=1)
    y = np.concatenate([batch.y[:, :m], batch.y], axis=1)
    target_mask = np.concatenate([1.0 - keep, np.ones((B, N - m, d_y))], axis=1)
    return TaskBatch(x=x, y=y, m=m, context_observed=keep, target_mask=target_mask)


# -- optimizer ------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def create(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    config: TrainConfig,
) -> None:
    norm_sq = sum(float((g * g).sum()) for g in grads.values())
    norm = math.sqrt(norm_sq)
    scale = config.clip_norm / norm if norm > config.clip_norm else 1.0
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    correction = math.sqrt(1.0 - b2**state.t) / (1.0 - b1**state.t)
    for name in sorted(params):
        g = grads[name] * scale
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        step = lr * correction * state.m[name] / (np.sqrt(state.v[name]) + config.adam_eps)
        params[name].data = params[name].data - step


# -- training loop -----------------------------------------------------------------


def train_run(
    model,
    config: TrainConfig,
    task_source: Callable[[np.random.Generator], TaskBatch],
    on_metrics: Callable[[dict], None] | None = None,
    on_checkpoint: Callable[[int, object, AdamState], None] | None = None,
    start_step: int = 0,
    opt_state: AdamState | None = None,
) -> tuple[object, list[dict]]:
    """Optimize the model in place; returns it with the metrics history.

    ``task_source`` receives a fresh per-step stream, so trajectories are
    reproducible and checkpoint resume (via ``start_step``/``opt_state``)
    matches an uninterrupted run bit for bit.
    """
    params = model.parameters()
    state = opt_state if opt_state is not None else AdamState.create(params)
    history: list[dict] = []

    def log(step: int, loss: float, lr: float) -> None:
        record = {"step": step, "loss": loss, "lr": lr}
        history.append(record)
        if on_metrics is not None:
            on_metrics(record)

    for step in range(start_step, config.steps):
        batch_rng = rng_stream(config.seed, _STREAM_BATCH, step)
        batch = task_source(batch_rng)
        if config.reward_drop_rate > 0.0:
            drop_rng = rng_stream(config.seed, _STREAM_DROPOUT, step)
            batch = reward_dropout_mask(drop_rng, batch, config.reward_drop_rate)
        lr = cosine_lr(step, config.steps, config.lr_max, config.lr_min)
        with Tape() as tape:
            if config.objective == "pretrain":
                loss = pretraining_loss(model, batch.x, batch.y)
            else:
                loss = training_loss(model, batch)
        grad_map = ad.backward_gradients(tape, loss, leaves=params.values())
        grads = {name: ad.grad_of(grad_map, p) for name, p in params.items()}
        adam_step(params, grads, state, lr, config)
        if step % config.log_interval == 0 or step == config.steps - 1:
            log(step, float(loss.data), lr)
        if (
            on_checkpoint is not None
            and config.checkpoint_interval > 0
            and (step + 1) % config.checkpoint_interval == 0
        ):
            on_checkpoint(step + 1, model, state)
    return model, history

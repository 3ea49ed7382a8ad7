"""Meta-regression metrics and the structural property harnesses.

``eval_*`` functions return a :class:`MetricReport` whose aggregate is always
the mean of the stored per-task values, so reports can be recomputed and
checked. ``check_*`` functions probe the structural guarantees (context
invariance, target equivariance, mask-dependency soundness) on a live model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import norm

from .cnp import CnpModel, cnp_predict
from .errors import ConfigError
from .model import (
    TnpModel,
    build_mask,
    embed_sequence,
    predict_autoregressive_teacher_forced,
    predict_diagonal,
    predict_joint,
    symmetrized_log_likelihood,
    _backbone,
)
from .tasks import TaskBatch

_LOG_2PI = math.log(2.0 * math.pi)

QUANTILE_LEVELS = np.arange(0.05, 0.951, 0.05)


@dataclass
class MetricReport:
    metric: str
    per_task: np.ndarray
    seed: int | None = None

    def __post_init__(self) -> None:
        self.per_task = np.asarray(self.per_task, dtype=float)

    @property
    def n_tasks(self) -> int:
        return self.per_task.size

    @property
    def mean(self) -> float:
        return float(self.per_task.mean())

    @property
    def std(self) -> float:
        return float(self.per_task.std(ddof=1)) if self.n_tasks > 1 else 0.0

    def summary(self) -> dict:
        return {
            "metric": self.metric,
            "mean": self.mean,
            "std": self.std,
            "n_tasks": self.n_tasks,
            "seed": self.seed,
        }


def _diagonal_family_prediction(model, batch: TaskBatch):
    if isinstance(model, CnpModel):
        return cnp_predict(model, batch)
    if model.config.variant == "D":
        return predict_diagonal(model, batch)
    if model.config.variant == "A":
        return predict_autoregressive_teacher_forced(model, batch)
    raise ConfigError(f"no diagonal-style prediction for variant {model.config.variant}")


def _per_task_diag_ll(model, batch: TaskBatch) -> np.ndarray:
    pred = _diagonal_family_prediction(model, batch)
    y = batch.y[:, batch.m :]
    z = (pred.mean.data - y) / pred.sigma.data
    ll = -np.log(pred.sigma.data) - 0.5 * _LOG_2PI - 0.5 * z * z
    return ll.reshape(batch.B, -1).mean(axis=1)


def _per_task_joint_ll(model, batch: TaskBatch) -> np.ndarray:
    pred = predict_joint(model, batch)
    y = batch.y[:, batch.m :, 0]
    L = pred.scale_tril.data
    resid = (y - pred.mean.data)[..., None]
    alpha = np.linalg.solve(np.tril(L), resid)[..., 0]
    log_det = np.log(np.diagonal(L, axis1=-2, axis2=-1)).sum(axis=-1)
    n = y.shape[-1]
    total = -0.5 * n * _LOG_2PI - log_det - 0.5 * (alpha * alpha).sum(axis=-1)
    return total / n


def eval_log_likelihood(model, tasks: list[TaskBatch], mode: str = "diag", seed: int | None = None) -> MetricReport:
    """Mean per-target log density over the evaluation set.

    Modes: ``diag`` (D or CNP), ``joint`` (ND), ``autoregressive`` (A,
    teacher-forced), ``symmetrized:<n_perms>`` (A, permutation-averaged).
    """
    variants = {"diag": ("D", "CNP"), "joint": ("ND",), "autoregressive": ("A",)}
    sym_perms = None
    if mode.startswith("symmetrized"):
        sym_perms = int(mode.split(":")[1]) if ":" in mode else 4
        needed = ("A",)
    elif mode in variants:
        needed = variants[mode]
    else:
        raise ConfigError(f"unknown eval mode {mode!r}")
    kind = "CNP" if isinstance(model, CnpModel) else model.config.variant
    if kind not in needed:
        raise ConfigError(f"mode {mode!r} does not apply to a {kind} model")

    values: list[float] = []
    for i, batch in enumerate(tasks):
        if sym_perms is not None:
            for b in range(batch.B):
                sub = replace(batch, x=batch.x[b : b + 1], y=batch.y[b : b + 1])
                rng = np.random.default_rng((seed or 0) * 100003 + i * 1009 + b)
                values.append(symmetrized_log_likelihood(model, sub, n_perms=sym_perms, rng=rng))
        elif mode == "joint":
            values.extend(_per_task_joint_ll(model, batch))
        else:
            values.extend(_per_task_diag_ll(model, batch))
    return MetricReport(metric=f"log_likelihood[{mode}]", per_task=np.array(values), seed=seed)


def _predicted_means(model, batch: TaskBatch) -> np.ndarray:
    if not isinstance(model, CnpModel) and model.config.variant == "ND":
        return predict_joint(model, batch).mean.data[..., None]
    return _diagonal_family_prediction(model, batch).mean.data


def eval_rmse(model, tasks: list[TaskBatch], seed: int | None = None) -> MetricReport:
    """Per-task root-mean-square error of predicted means on the targets."""
    values: list[float] = []
    for batch in tasks:
        mu = _predicted_means(model, batch)
        err = (mu - batch.y[:, batch.m :]) ** 2
        values.extend(np.sqrt(err.reshape(batch.B, -1).mean(axis=1)))
    return MetricReport(metric="rmse", per_task=np.array(values), seed=seed)


def eval_calibration_error(model, tasks: list[TaskBatch], seed: int | None = None) -> MetricReport:
    """Mean absolute quantile-coverage gap over 19 levels, per task.

    Observed coverage at level q is the fraction of target labels below the
    predicted q-quantile ``mu + sigma * z_q``.
    """
    z = norm.ppf(QUANTILE_LEVELS)
    values: list[float] = []
    for batch in tasks:
        pred = _diagonal_family_prediction(model, batch)
        y = batch.y[:, batch.m :]
        mu, sigma = pred.mean.data, pred.sigma.data
        for b in range(batch.B):
            quantiles = mu[b][..., None] + sigma[b][..., None] * z  # (n, d_y, 19)
            below = (y[b][..., None] < quantiles).reshape(-1, z.size)
            coverage = below.mean(axis=0)
            values.append(float(np.abs(coverage - QUANTILE_LEVELS).mean()))
    return MetricReport(metric="calibration_error", per_task=np.array(values), seed=seed)


# -- structural property harnesses -------------------------------------------------


def _prediction_arrays(model, batch: TaskBatch) -> tuple[np.ndarray, ...]:
    if not isinstance(model, CnpModel) and model.config.variant == "ND":
        pred = predict_joint(model, batch)
        return pred.mean.data, pred.covariance
    pred = _diagonal_family_prediction(model, batch)
    return pred.mean.data, pred.sigma.data


def _permute_context(batch: TaskBatch, perm: np.ndarray) -> TaskBatch:
    idx = np.concatenate([perm, np.arange(batch.m, batch.N)])
    kwargs = {}
    if batch.context_observed is not None:
        kwargs["context_observed"] = batch.context_observed[:, perm]
    return replace(batch, x=batch.x[:, idx], y=batch.y[:, idx], **kwargs)


def check_context_invariance(
    model, batch: TaskBatch, n_perms: int = 5, tol: float = 1e-9, seed: int = 0
) -> tuple[bool, float]:
    """Max deviation of any predictive output under context permutations."""
    if n_perms < 1:
        raise ConfigError("n_perms must be >= 1")
    rng = np.random.default_rng(seed)
    base = _prediction_arrays(model, batch)
    worst = 0.0
    for _ in range(n_perms):
        perm = rng.permutation(batch.m)
        arrays = _prediction_arrays(model, _permute_context(batch, perm))
        for a, b in zip(base, arrays):
            worst = max(worst, float(np.abs(a - b).max()))
    return worst <= tol, worst


def check_target_equivariance(
    model, batch: TaskBatch, tol: float = 1e-8, seed: int = 0
) -> tuple[bool, float]:
    """Permute targets, invert the permutation on outputs, compare.

    Diagonal-family models must permute (mu, sigma) exactly; ND must conjugate
    the covariance. Variant A is exact only under full-group symmetrization,
    checked when the target count keeps the group enumerable.
    """
    rng = np.random.default_rng(seed)
    n_t = batch.N - batch.m
    perm = rng.permutation(n_t)
    idx = np.concatenate([np.arange(batch.m), batch.m + perm])
    permuted = replace(batch, x=batch.x[:, idx], y=batch.y[:, idx])
    kind = "CNP" if isinstance(model, CnpModel) else model.config.variant
    if kind == "A":
        if n_t > 4:
            raise ConfigError("intractable group: variant A exact check needs N - m <= 4")
        from itertools import permutations as all_perms

        group = [np.array(p) for p in all_perms(range(n_t))]
        v0 = symmetrized_log_likelihood(model, batch, permutations=group)
        v1 = symmetrized_log_likelihood(model, permuted, permutations=group)
        dev = abs(v0 - v1)
        return dev <= tol, dev
    if kind == "ND":
        p0 = predict_joint(model, batch)
        p1 = predict_joint(model, permuted)
        dev = float(np.abs(p0.mean.data[:, perm] - p1.mean.data).max())
        cov0 = p0.covariance[:, perm][:, :, perm]
        dev = max(dev, float(np.abs(cov0 - p1.covariance).max()))
        return dev <= tol, dev
    pred0 = _diagonal_family_prediction(model, batch)
    pred1 = _diagonal_family_prediction(model, permuted)
    dev = float(np.abs(pred0.mean.data[:, perm] - pred1.mean.data).max())
    dev = max(dev, float(np.abs(pred0.sigma.data[:, perm] - pred1.sigma.data).max()))
    return dev <= tol, dev


def check_mask_dependency(
    model: TnpModel, batch: TaskBatch, n_probes: int = 50, tol: float = 1e-9, seed: int = 0
) -> tuple[bool, float, int]:
    """Randomize tokens denied to a row; that row's output must not move.

    Probes the backbone output at every row (so context rows are covered, not
    only prediction heads). Returns (pass, worst deviation, violations).
    """
    if isinstance(model, CnpModel):
        raise ConfigError("mask probes apply to attention models")
    rng = np.random.default_rng(seed)
    variant = model.config.variant
    seq = embed_sequence(batch, variant)
    mask = build_mask(batch.N, batch.m, variant)
    base = _backbone(model, seq.tokens, mask).data
    denied_rows, denied_cols = np.where(~mask.allow)
    off_diag = denied_rows != denied_cols
    denied = np.stack([denied_rows[off_diag], denied_cols[off_diag]], axis=1)
    worst, violations = 0.0, 0
    for _ in range(n_probes):
        r, c = denied[rng.integers(len(denied))]
        tokens = seq.tokens.copy()
        width = tokens.shape[-1]
        tokens[:, c, :] = rng.normal(size=(batch.B, width)) * 3.0
        out = _backbone(model, tokens, mask).data
        dev = float(np.abs(out[:, r] - base[:, r]).max())
        worst = max(worst, dev)
        if dev > tol:
            violations += 1
    return violations == 0, worst, violations

"""Set-conditioned transformer predictors over (x, y) pair tokens.

Three decoder variants share one masked-attention backbone:

* ``A``  - autoregressive: target labels are predicted through per-step
  univariate conditionals, teacher-forced in a single masked pass.
* ``D``  - diagonal: targets are conditionally independent given the context;
  each target yields an independent Gaussian.
* ``ND`` - non-diagonal: one joint multivariate Gaussian over all targets,
  with the covariance built from a Cholesky-style or low-rank head.

Every token is a concatenation ``[x, y, observed-flags]``. Padded prediction
tokens carry zeros in the y slots and zero flags, so a genuine label of 0 is
never confused with padding. Positional encodings are deliberately absent:
together with the masks below this is what makes predictions invariant to
context order and equivariant to target order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, NumericError, ShapeError
from .nn import LayerNorm, Mlp, TransformerBlock, mlp_forward
from .tasks import TaskBatch

VARIANTS = ("A", "D", "ND")

LOG_SIGMA_MIN = -6.0
LOG_SIGMA_MAX = 6.0

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class ModelConfig:
    """Architecture hyperparameters. Defaults follow the 1-D regression setup."""

    d_x: int = 1
    d_y: int = 1
    variant: str = "D"
    d_model: int = 64
    n_layers: int = 6
    n_heads: int = 4
    ff_width: int = 128
    n_embed_layers: int = 4
    activation: str = "relu"
    dropout: float = 0.0
    # ND-only knobs
    nd_extra_attention_layers: int = 2
    nd_projection_dim: int = 20
    nd_projection_layers: int = 4
    nd_covariance: str = "cholesky"
    lowrank_rank: int = 8

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for name in (
            "d_x",
            "d_y",
            "d_model",
            "n_layers",
            "n_heads",
            "ff_width",
            "n_embed_layers",
            "nd_extra_attention_layers",
            "nd_projection_dim",
            "nd_projection_layers",
            "lowrank_rank",
        ):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.nd_covariance not in ("cholesky", "lowrank"):
            raise ConfigError(f"nd_covariance must be cholesky|lowrank, got {self.nd_covariance}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")

    @property
    def token_width(self) -> int:
        # x slots + y slots + one observed flag per y slot
        return self.d_x + 2 * self.d_y


def desk_config(**overrides) -> ModelConfig:
    """Small profile used by the desk-scale experiments and acceptance runs."""
    base = dict(d_model=32, n_layers=4, n_heads=2, ff_width=64)
    base.update(overrides)
    return ModelConfig(**base)


# -- token sequences and masks ---------------------------------------------------

ROLE_CONTEXT = 0
ROLE_TARGET_REAL = 1
ROLE_TARGET_PADDED = 2


@dataclass
class TokenSequence:
    """Raw (pre-embedding) tokens plus role bookkeeping."""

    tokens: np.ndarray  # (B, T, d_x + 2 d_y)
    roles: np.ndarray  # (T,) role tags
    padded_positions: np.ndarray  # (N - m,) indices of prediction tokens

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[1]


@dataclass
class MaskSpec:
    """Boolean permission matrix: allow[i, j] means row i may attend column j."""

    allow: np.ndarray

    def __post_init__(self) -> None:
        self.allow = np.asarray(self.allow, dtype=bool)
        if self.allow.ndim != 2 or self.allow.shape[0] != self.allow.shape[1]:
            raise ShapeError(f"mask must be square, got {self.allow.shape}")
        if not self.allow.any(axis=1).all():
            raise ShapeError("empty attention row: some row allows no entries")

    @property
    def n_tokens(self) -> int:
        return self.allow.shape[0]


def build_mask(n: int, m: int, variant: str) -> MaskSpec:
    """Attention permissions for a sequence built from N points with m contexts.

    Variant ``A`` operates on ``2N - m`` tokens (real pairs then padded
    targets); ``D``/``ND`` operate on ``N`` tokens (contexts then padded
    targets). ``m = 0`` is allowed for variant A only, where it realizes the
    every-point-is-a-target sequence used for next-point pretraining; the
    first padded row then attends itself so no row is empty.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}, got {variant!r}")
    min_m = 0 if variant == "A" else 1
    if not min_m <= m < n:
        raise ConfigError(f"need {min_m} <= m < N, got m={m}, N={n}")
    if variant == "A":
        total = 2 * n - m
        allow = np.zeros((total, total), dtype=bool)
        for r in range(m):  # context pairs see the context block only
            allow[r, :m] = True
        for r in range(m, n):  # real target pair i attends pairs <= i
            allow[r, : r + 1] = True
        for j in range(n - m):  # padded for target j attends pairs < its index
            row = n + j
            allow[row, : m + j] = True
            if m + j == 0:
                allow[row, row] = True
        return MaskSpec(allow)
    total = n
    allow = np.zeros((total, total), dtype=bool)
    allow[:, :m] = True  # everyone sees the context block
    for r in range(m, n):
        allow[r, r] = True  # padded targets also see themselves
    return MaskSpec(allow)


def _build_tokens(
    x: np.ndarray,
    y: np.ndarray,
    m: int,
    variant: str,
    context_observed: np.ndarray | None = None,
) -> TokenSequence:
    B, N, d_x = x.shape
    d_y = y.shape[-1]
    n_t = N - m
    flags_ctx = np.ones((B, m, d_y))
    y_ctx = y[:, :m]
    if context_observed is not None:
        flags_ctx = np.asarray(context_observed, dtype=float)
        y_ctx = y_ctx * flags_ctx
    ctx = np.concatenate([x[:, :m], y_ctx, flags_ctx], axis=-1)
    padded = np.concatenate(
        [x[:, m:], np.zeros((B, n_t, d_y)), np.zeros((B, n_t, d_y))], axis=-1
    )
    if variant == "A":
        real_t = np.concatenate([x[:, m:], y[:, m:], np.ones((B, n_t, d_y))], axis=-1)
        tokens = np.concatenate([ctx, real_t, padded], axis=1)
        roles = np.concatenate(
            [
                np.full(m, ROLE_CONTEXT),
                np.full(n_t, ROLE_TARGET_REAL),
                np.full(n_t, ROLE_TARGET_PADDED),
            ]
        )
        padded_positions = np.arange(N, N + n_t)
    else:
        tokens = np.concatenate([ctx, padded], axis=1)
        roles = np.concatenate([np.full(m, ROLE_CONTEXT), np.full(n_t, ROLE_TARGET_PADDED)])
        padded_positions = np.arange(m, m + n_t)
    return TokenSequence(tokens=tokens, roles=roles, padded_positions=padded_positions)


def embed_sequence(batch: TaskBatch, variant: str) -> TokenSequence:
    """Raw token sequence for a batch: Eq.-style pair tokens plus padding."""
    if variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}, got {variant!r}")
    if batch.m < 1:
        raise ConfigError("batch needs at least one context point")
    if batch.m >= batch.N:
        raise ConfigError("batch needs at least one target point")
    return _build_tokens(batch.x, batch.y, batch.m, variant, batch.context_observed)


# -- predictions -------------------------------------------------------------------


@dataclass
class DiagonalPrediction:
    """Independent Gaussians per target: mean and std, each (B, n, d_y)."""

    mean: Tensor
    sigma: Tensor

    def __post_init__(self) -> None:
        if self.mean.shape != self.sigma.shape:
            raise ShapeError(f"mean {self.mean.shape} vs sigma {self.sigma.shape}")
        if not (self.sigma.data > 0).all():
            raise NumericError("sigma must be positive")


@dataclass
class JointGaussianPrediction:
    """Joint Gaussian over targets: mean (B, n) and lower factor L (B, n, n)."""

    mean: Tensor
    scale_tril: Tensor

    def __post_init__(self) -> None:
        L = self.scale_tril.data
        if L.shape[-1] != L.shape[-2] or L.shape[-2] != self.mean.shape[-1]:
            raise ShapeError(f"mean {self.mean.shape} vs L {L.shape}")
        if np.abs(np.triu(L, k=1)).max(initial=0.0) != 0.0:
            raise ShapeError("scale factor has nonzero entries above the diagonal")
        if not (np.diagonal(L, axis1=-2, axis2=-1) > 0).all():
            raise NumericError("scale factor needs a positive diagonal")

    @property
    def covariance(self) -> np.ndarray:
        L = self.scale_tril.data
        return L @ np.swapaxes(L, -1, -2)


class TnpModel:
    """Parameter container for one variant; all arrays are leaf tensors."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator) -> None:
        self.config = config
        c = config
        widths = [c.token_width] + [c.d_model] * c.n_embed_layers
        self.embed = Mlp.create(rng, widths, c.activation)
        self.blocks = [
            TransformerBlock.create(rng, c.d_model, c.n_heads, c.ff_width, c.activation)
            for _ in range(c.n_layers)
        ]
        self.final_norm = LayerNorm.create(c.d_model)
        if c.variant == "ND":
            self.mean_head = Mlp.create(rng, [c.d_model, c.d_model, c.d_y], c.activation)
            self.cov_blocks = [
                TransformerBlock.create(rng, c.d_model, c.n_heads, c.ff_width, c.activation)
                for _ in range(c.nd_extra_attention_layers)
            ]
            proj_out = (
                c.nd_projection_dim if c.nd_covariance == "cholesky" else c.lowrank_rank
            )
            proj_widths = [c.d_model] * c.nd_projection_layers + [proj_out]
            self.cov_proj = Mlp.create(rng, proj_widths, c.activation)
            if c.nd_covariance == "lowrank":
                self.diag_head = Mlp.create(rng, [c.d_model, c.d_model, 1], c.activation)
        else:
            self.head = Mlp.create(rng, [c.d_model, c.d_model, 2 * c.d_y], c.activation)

    def parameters(self) -> dict[str, Tensor]:
        out = self.embed.params("embed")
        for i, block in enumerate(self.blocks):
            out.update(block.params(f"block.{i}"))
        out.update(self.final_norm.params("final_norm"))
        if self.config.variant == "ND":
            out.update(self.mean_head.params("mean_head"))
            for i, block in enumerate(self.cov_blocks):
                out.update(block.params(f"cov_block.{i}"))
            out.update(self.cov_proj.params("cov_proj"))
            if self.config.nd_covariance == "lowrank":
                out.update(self.diag_head.params("diag_head"))
        else:
            out.update(self.head.params("head"))
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        if missing or extra:
            raise ConfigError(f"parameter mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, tensor in params.items():
            if tensor.data.shape != arrays[name].shape:
                raise ShapeError(f"{name}: shape {arrays[name].shape} != {tensor.data.shape}")
            tensor.data = np.array(arrays[name], dtype=tensor.data.dtype, copy=True)


def create_model(config: ModelConfig, seed: int = 0) -> TnpModel:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    return TnpModel(config, rng)


def _backbone(
    model: TnpModel,
    tokens: np.ndarray,
    mask: MaskSpec,
    dropout_rng: np.random.Generator | None = None,
) -> Tensor:
    h = mlp_forward(model.embed, ad.as_tensor(tokens))
    rate = model.config.dropout
    for block in model.blocks:
        h = block(h, mask.allow)
        if rate > 0.0 and dropout_rng is not None:
            keep = dropout_rng.random(h.shape) >= rate
            h = h * (keep / (1.0 - rate))
    return model.final_norm(h)


def _split_mean_sigma(raw: Tensor, d_y: int) -> tuple[Tensor, Tensor]:
    mean = raw[..., :d_y]
    log_sigma = ad.clip(raw[..., d_y:], LOG_SIGMA_MIN, LOG_SIGMA_MAX)
    return mean, ad.exp(log_sigma)


def predict_diagonal(
    model: TnpModel, batch: TaskBatch, dropout_rng: np.random.Generator | None = None
) -> DiagonalPrediction:
    """Independent per-target Gaussians; each depends only on context + own x."""
    if model.config.variant != "D":
        raise ConfigError(f"predict_diagonal needs variant D, got {model.config.variant}")
    seq = embed_sequence(batch, "D")
    mask = build_mask(batch.N, batch.m, "D")
    out = _backbone(model, seq.tokens, mask, dropout_rng)
    z = out[:, batch.m :, :]
    raw = mlp_forward(model.head, z)
    mean, sigma = _split_mean_sigma(raw, model.config.d_y)
    return DiagonalPrediction(mean=mean, sigma=sigma)


def predict_autoregressive_teacher_forced(
    model: TnpModel,
    batch: TaskBatch,
    dropout_rng: np.random.Generator | None = None,
) -> DiagonalPrediction:
    """Per-step conditionals for all targets in one masked pass.

    The conditional for target i is read at its padded token, which by
    construction attends the context and the earlier target pairs only, so
    ground-truth labels never leak into their own predictions.
    """
    if model.config.variant != "A":
        raise ConfigError(f"teacher forcing needs variant A, got {model.config.variant}")
    seq = embed_sequence(batch, "A")
    mask = build_mask(batch.N, batch.m, "A")
    out = _backbone(model, seq.tokens, mask, dropout_rng)
    z = out[:, seq.padded_positions[0] :, :]
    raw = mlp_forward(model.head, z)
    mean, sigma = _split_mean_sigma(raw, model.config.d_y)
    return DiagonalPrediction(mean=mean, sigma=sigma)


def predict_next_point_conditionals(
    model: TnpModel, x: np.ndarray, y: np.ndarray
) -> DiagonalPrediction:
    """Variant-A conditionals with an empty context: every point is a target.

    Point i conditions on pairs 1..i-1 and its own input; the first point
    conditions on nothing but its own input.
    """
    if model.config.variant != "A":
        raise ConfigError(f"next-point conditionals need variant A, got {model.config.variant}")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 3 or y.ndim != 3 or x.shape[:2] != y.shape[:2]:
        raise ShapeError(f"expected (B, N, d) arrays, got {x.shape} and {y.shape}")
    seq = _build_tokens(x, y, 0, "A")
    mask = build_mask(x.shape[1], 0, "A")
    out = _backbone(model, seq.tokens, mask)
    z = out[:, seq.padded_positions[0] :, :]
    raw = mlp_forward(model.head, z)
    mean, sigma = _split_mean_sigma(raw, model.config.d_y)
    return DiagonalPrediction(mean=mean, sigma=sigma)


def cholesky_head_factor(h: Tensor, eps: float = 1e-6) -> Tensor:
    """L = lower(H H^T) + eps I with escalating jitter on the diagonal."""
    n = h.shape[-2]
    gram = ad.matmul(h, h.swapaxes(-1, -2))
    lower = gram * np.tril(np.ones((n, n)))
    eye = np.eye(n)
    while eps <= 1e-2:
        L = lower + eye * eps
        diag = np.diagonal(L.data, axis1=-2, axis2=-1)
        if np.isfinite(L.data).all() and (diag > 0).all():
            return L
        eps *= 10.0
    raise NumericError("covariance factorization failed: non-positive diagonal")


def _canonical_target_order(batch: TaskBatch) -> np.ndarray:
    """Per-element target ordering determined by coordinates, not input order.

    The triangular covariance head is order-sensitive (which triangle of the
    Gram survives depends on row order), so it runs in this canonical frame;
    the resulting covariance is conjugated back to the caller's order, which
    makes the prediction exactly equivariant to target permutations.
    """
    x_t = batch.x[:, batch.m :, :]
    return np.stack([np.lexsort(x_t[b].T[::-1]) for b in range(batch.B)])


def _conjugate_back(sigma: Tensor, order: np.ndarray) -> Tensor:
    B, n = order.shape
    inv = np.argsort(order, axis=1)
    rows = np.arange(B)[:, None, None]
    return sigma[rows, inv[:, :, None], inv[:, None, :]]


def _factor_with_escalation(sigma: Tensor) -> Tensor:
    """Dense Cholesky of a covariance, escalating diagonal jitter on failure."""
    eye = np.eye(sigma.shape[-1])
    jitter = 0.0
    while True:
        try:
            return ad.cholesky(sigma if jitter == 0.0 else sigma + eye * jitter)
        except NumericError:
            jitter = 1e-6 if jitter == 0.0 else jitter * 10.0
            if jitter > 1e-2:
                raise NumericError("covariance factorization failed after jitter escalation")


def _lowrank_factor(model: TnpModel, h: Tensor) -> Tensor:
    """Cholesky factor of exp(D) + A A^T via dense factorization."""
    a = mlp_forward(model.cov_proj, h)
    d = mlp_forward(model.diag_head, h)[..., 0]
    d = ad.clip(d, 2.0 * LOG_SIGMA_MIN, 2.0 * LOG_SIGMA_MAX)
    n = h.shape[-2]
    diag = ad.exp(d)[..., None] * np.eye(n)
    sigma = diag + ad.matmul(a, a.swapaxes(-1, -2))
    return _factor_with_escalation(sigma)


def predict_joint(
    model: TnpModel, batch: TaskBatch, dropout_rng: np.random.Generator | None = None
) -> JointGaussianPrediction:
    """One joint Gaussian over all targets (variant ND, scalar labels)."""
    if model.config.variant != "ND":
        raise ConfigError(f"predict_joint needs variant ND, got {model.config.variant}")
    if model.config.d_y != 1:
        raise ConfigError("joint prediction supports scalar labels only")
    seq = embed_sequence(batch, "ND")
    mask = build_mask(batch.N, batch.m, "ND")
    out = _backbone(model, seq.tokens, mask, dropout_rng)
    z = out[:, batch.m :, :]
    mean = mlp_forward(model.mean_head, z)[..., 0]
    n = batch.N - batch.m
    h = z
    full = np.ones((n, n), dtype=bool)
    for block in model.cov_blocks:
        h = block(h, full)
    if model.config.nd_covariance == "cholesky":
        H = mlp_forward(model.cov_proj, h)
        order = _canonical_target_order(batch)
        H_sorted = H[np.arange(batch.B)[:, None], order]
        L_c = cholesky_head_factor(H_sorted)
        sigma = _conjugate_back(ad.matmul(L_c, L_c.swapaxes(-1, -2)), order)
        L = _factor_with_escalation(sigma)
    else:
        L = _lowrank_factor(model, h)
    return JointGaussianPrediction(mean=mean, scale_tril=L)


# -- log densities ----------------------------------------------------------------


def log_likelihood_diag(
    pred: DiagonalPrediction, y: np.ndarray, weights: np.ndarray | None = None
) -> Tensor:
    """Mean per-target-entry Gaussian log density.

    ``weights`` selects/weights entries (used when only some label slots are
    regression targets); default is a plain mean over all entries.
    """
    y = np.asarray(y, dtype=float)
    if y.shape != pred.mean.shape:
        raise ShapeError(f"labels {y.shape} vs prediction {pred.mean.shape}")
    z = (pred.mean - y) / pred.sigma
    ll = ad.log(pred.sigma) * -1.0 - 0.5 * _LOG_2PI - 0.5 * z * z
    if weights is None:
        return ll.mean()
    w = np.asarray(weights, dtype=float)
    total = float(w.sum())
    if total <= 0:
        raise ShapeError("weights select no entries")
    return (ll * w).sum() * (1.0 / total)


def log_likelihood_joint(pred: JointGaussianPrediction, y: np.ndarray) -> Tensor:
    """Joint Gaussian log density via triangular solve, averaged per target.

    Returns mean over batch of ``log N(y | mu, L L^T) / n_targets`` so the
    value is comparable with the diagonal objective.
    """
    y = np.asarray(y, dtype=float)
    if y.ndim == pred.mean.ndim + 1 and y.shape[-1] == 1:
        y = y[..., 0]
    if y.shape != pred.mean.shape:
        raise ShapeError(f"labels {y.shape} vs prediction {pred.mean.shape}")
    n = y.shape[-1]
    alpha = ad.trisolve_lower(pred.scale_tril, ad.as_tensor(y) - pred.mean)
    log_det = ad.log(ad.diag_part(pred.scale_tril)).sum(axis=-1)
    quad = (alpha * alpha).sum(axis=-1)
    total = -0.5 * n * _LOG_2PI - log_det - 0.5 * quad
    return (total * (1.0 / n)).mean()


# -- autoregressive sampling and symmetrization ------------------------------------


def sample_targets_autoregressive(
    model: TnpModel,
    context_x: np.ndarray,
    context_y: np.ndarray,
    target_x: np.ndarray,
    rng: np.random.Generator,
    temperature: float = 1.0,
) -> np.ndarray:
    """Draw target labels one at a time, feeding samples back as real pairs.

    ``temperature`` scales the per-step std; 0 gives greedy mean decoding.
    Deterministic given the generator state.
    """
    if model.config.variant != "A":
        raise ConfigError("sampling needs variant A")
    context_x = np.asarray(context_x, dtype=float)
    context_y = np.asarray(context_y, dtype=float)
    target_x = np.asarray(target_x, dtype=float)
    m, n = context_x.shape[0], target_x.shape[0]
    d_y = context_y.shape[-1]
    samples = np.zeros((n, d_y))
    for i in range(n):
        x_seq = np.concatenate([context_x, target_x[: i + 1]])[None]
        y_seq = np.concatenate([context_y, samples[: i + 1]])[None]
        batch = TaskBatch(x=x_seq, y=y_seq, m=m)
        pred = predict_autoregressive_teacher_forced(model, batch)
        mu = pred.mean.data[0, i]
        sd = pred.sigma.data[0, i] * temperature
        samples[i] = mu + sd * rng.standard_normal(d_y)
    return samples


def _ar_total_log_likelihood(model: TnpModel, batch: TaskBatch) -> float:
    pred = predict_autoregressive_teacher_forced(model, batch)
    y = batch.y[:, batch.m :]
    z = (pred.mean.data - y) / pred.sigma.data
    ll = -np.log(pred.sigma.data) - 0.5 * _LOG_2PI - 0.5 * z * z
    return float(ll.sum())


def symmetrized_log_likelihood(
    model: TnpModel,
    batch: TaskBatch,
    n_perms: int = 1,
    rng: np.random.Generator | None = None,
    permutations: list[np.ndarray] | None = None,
) -> float:
    """Log of the permutation-averaged autoregressive density, per target.

    Averages ``exp(joint AR log-likelihood)`` over target-order permutations
    with log-sum-exp stabilization, then normalizes by the target count (and
    batch size) so the value is comparable with the other objectives.
    """
    if model.config.variant != "A":
        raise ConfigError("symmetrization applies to variant A")
    if permutations is None:
        if n_perms < 1:
            raise ConfigError(f"n_perms must be >= 1, got {n_perms}")
        if rng is None:
            rng = np.random.default_rng(0)
        n_t = batch.N - batch.m
        permutations = [rng.permutation(n_t) for _ in range(n_perms)]
    totals = []
    for perm in permutations:
        idx = np.concatenate([np.arange(batch.m), batch.m + np.asarray(perm)])
        permuted = replace(batch, x=batch.x[:, idx], y=batch.y[:, idx])
        totals.append(_ar_total_log_likelihood(model, permuted))
    totals = np.asarray(totals)
    peak = totals.max()
    log_avg = peak + np.log(np.mean(np.exp(totals - peak)))
    n_entries = batch.B * (batch.N - batch.m) * batch.y.shape[-1]
    return float(log_avg / n_entries)

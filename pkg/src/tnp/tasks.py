"""Synthetic task generators: GP function draws, the wheel bandit world, and
standard optimization benchmark objectives.

All samplers are pure given an explicit generator, so parallel generation
with disjoint streams stays reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

# 1-D inputs are drawn from a fixed symmetric box; multi-D from the unit box.
X_RANGE_1D = (-2.0, 2.0)

GP_LENGTHSCALE_RANGE = (0.6, 1.0)
GP_OUTPUT_SCALE_RANGE = (0.1, 1.0)
GP_JITTER = 1e-6


@dataclass
class TaskBatch:
    """A batch of function evaluations split into context and target points.

    ``x`` is (B, N, d_x) and ``y`` is (B, N, d_y); the first ``m`` points of
    every element are context. ``context_observed`` optionally flags which
    context label entries are genuine (used by reward dropout); ``target_mask``
    optionally weights which target entries enter a training loss.
    """

    x: np.ndarray
    y: np.ndarray
    m: int
    context_observed: np.ndarray | None = None
    target_mask: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.x.ndim != 3 or self.y.ndim != 3:
            raise ShapeError(f"x and y must be (B, N, d); got {self.x.shape}, {self.y.shape}")
        if self.x.shape[:2] != self.y.shape[:2]:
            raise ShapeError(f"x {self.x.shape} and y {self.y.shape} disagree on (B, N)")
        if not 1 <= self.m < self.x.shape[1]:
            raise ConfigError(f"need 1 <= m < N, got m={self.m}, N={self.x.shape[1]}")
        if not (np.isfinite(self.x).all() and np.isfinite(self.y).all()):
            raise NumericError("task batch contains non-finite entries")

    @property
    def B(self) -> int:
        return self.x.shape[0]

    @property
    def N(self) -> int:
        return self.x.shape[1]

    @property
    def n_targets(self) -> int:
        return self.N - self.m


# -- Gaussian-process draws ------------------------------------------------------

KERNEL_FAMILIES = ("rbf", "matern52", "periodic")


@dataclass
class KernelSpec:
    family: str
    lengthscale: float
    output_scale: float
    period: float = 1.0
    jitter: float = GP_JITTER

    def __post_init__(self) -> None:
        if self.family not in KERNEL_FAMILIES:
            raise ConfigError(f"kernel family must be one of {KERNEL_FAMILIES}, got {self.family!r}")
        if self.lengthscale <= 0 or self.output_scale <= 0 or self.period <= 0:
            raise ConfigError("kernel scales must be positive")
        if self.jitter < 0:
            raise ConfigError("jitter must be nonnegative")


def kernel_matrix(spec: KernelSpec, xs: np.ndarray) -> np.ndarray:
    """Gram matrix over points (n, d_x); symmetric, PSD after jitter."""
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    if xs.ndim == 2 and xs.shape[1] == 0:
        raise ShapeError("points need at least one coordinate")
    if not np.isfinite(xs).all():
        raise NumericError("kernel inputs must be finite")
    diff = xs[:, None, :] - xs[None, :, :]
    r = np.sqrt(np.maximum((diff * diff).sum(-1), 0.0))
    s2 = spec.output_scale**2
    ell = spec.lengthscale
    if spec.family == "rbf":
        K = s2 * np.exp(-0.5 * (r / ell) ** 2)
    elif spec.family == "matern52":
        a = math.sqrt(5.0) * r / ell
        K = s2 * (1.0 + a + a * a / 3.0) * np.exp(-a)
    else:
        K = s2 * np.exp(-2.0 * np.sin(math.pi * r / spec.period) ** 2 / ell**2)
    return 0.5 * (K + K.T)


def _chol_with_escalation(K: np.ndarray, jitter: float, max_escalations: int = 3) -> np.ndarray:
    eye = np.eye(K.shape[0])
    for attempt in range(max_escalations + 1):
        try:
            return np.linalg.cholesky(K + eye * jitter)
        except np.linalg.LinAlgError:
            jitter = jitter * 10.0 if jitter > 0 else GP_JITTER
    raise NumericError(f"factorization failed after jitter escalation to {jitter:.1e}")


def split_context_target(rng: np.random.Generator, N: int, m_rule: tuple[int, int] = (3, 47)) -> int:
    """Context count uniform over [lo, min(hi, N - lo)]; needs N >= 2 lo."""
    lo, hi = m_rule
    if N < 2 * lo:
        raise ConfigError(f"need N >= {2 * lo} for m_rule {m_rule}, got N={N}")
    top = min(hi, N - lo)
    return int(rng.integers(lo, top + 1))


def sample_gp_batch(
    rng: np.random.Generator,
    family: str = "rbf",
    B: int = 16,
    N_range: tuple[int, int] = (6, 50),
    m_rule: tuple[int, int] = (3, 47),
    hyper_ranges: tuple[tuple[float, float], tuple[float, float]] = (
        GP_LENGTHSCALE_RANGE,
        GP_OUTPUT_SCALE_RANGE,
    ),
    d_x: int = 1,
) -> TaskBatch:
    """Draw B functions from a zero-mean GP prior with randomized scales.

    N is drawn once per batch (arrays stay rectangular); lengthscale and
    output scale are drawn per function; y comes from the factorized prior.
    """
    ell_range, scale_range = hyper_ranges
    if ell_range[0] >= ell_range[1] or scale_range[0] >= scale_range[1]:
        raise ConfigError(f"invalid hyper ranges {hyper_ranges}")
    N = int(rng.integers(*N_range))
    m = split_context_target(rng, N, m_rule)
    if d_x == 1:
        lo, hi = X_RANGE_1D
    else:
        lo, hi = 0.0, 1.0
    x = rng.uniform(lo, hi, size=(B, N, d_x))
    y = np.empty((B, N, 1))
    for b in range(B):
        spec = KernelSpec(
            family=family,
            lengthscale=float(rng.uniform(*ell_range)),
            output_scale=float(rng.uniform(*scale_range)),
        )
        L = _chol_with_escalation(kernel_matrix(spec, x[b]), spec.jitter)
        y[b, :, 0] = L @ rng.standard_normal(N)
    return TaskBatch(x=x, y=y, m=m)


# -- wheel bandit world ----------------------------------------------------------

WHEEL_ARMS = 5
WHEEL_REWARD_STD = 0.012
_INSIDE_MEANS = np.array([1.2, 1.0, 1.0, 1.0, 1.0])
# quadrant (sign of X1, sign of X2) -> high-reward arm index (0-based)
_QUADRANT_ARM = {(1, 1): 1, (-1, 1): 2, (-1, -1): 3, (1, -1): 4}


@dataclass
class WheelProblem:
    """Unit-disk bandit: a delta-radius core favors arm 1; outside it one
    quadrant-dependent arm pays a large reward."""

    delta: float
    arms: int = WHEEL_ARMS
    reward_std: float = WHEEL_REWARD_STD

    def __post_init__(self) -> None:
        if not 0.0 < self.delta < 1.0:
            raise ConfigError(f"delta must lie in (0, 1), got {self.delta}")
        if self.arms != WHEEL_ARMS:
            raise ConfigError(f"wheel problem is defined for {WHEEL_ARMS} arms")

    def arm_means(self, X: np.ndarray) -> tuple[np.ndarray, int]:
        """Expected reward of every arm at coordinates X, plus the best arm."""
        X = np.asarray(X, dtype=float)
        norm = float(np.linalg.norm(X))
        if norm > 1.0 + 1e-12:
            raise ConfigError(f"coordinates must lie in the unit disk, |X|={norm:.3f}")
        means = _INSIDE_MEANS.copy()
        if norm > self.delta:
            quadrant = (1 if X[0] >= 0 else -1, 1 if X[1] >= 0 else -1)
            means[_QUADRANT_ARM[quadrant]] = 50.0
        return means, int(np.argmax(means))


def wheel_rewards(
    problem: WheelProblem, X: np.ndarray, rng: np.random.Generator
) -> tuple[np.ndarray, int]:
    """Sampled rewards for all arms at X and the index of the optimal arm."""
    means, best = problem.arm_means(X)
    rewards = means + problem.reward_std * rng.standard_normal(problem.arms)
    return rewards, best


def sample_unit_disk(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniform points on the unit disk via radial inversion."""
    radius = np.sqrt(rng.random(n))
    angle = rng.uniform(0.0, 2.0 * math.pi, n)
    return np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=-1)


def sample_wheel_batch(
    rng: np.random.Generator,
    B: int = 8,
    N: int = 64,
    m_rule: tuple[int, int] = (8, 56),
    delta_range: tuple[float, float] = (0.0, 1.0),
) -> tuple[TaskBatch, np.ndarray]:
    """Batch of wheel problems with fresh deltas; labels are all-arm rewards.

    Returns the batch plus the per-element deltas (useful for diagnostics).
    """
    m = split_context_target(rng, N, m_rule)
    x = np.empty((B, N, 2))
    y = np.empty((B, N, WHEEL_ARMS))
    deltas = np.empty(B)
    for b in range(B):
        lo, hi = delta_range
        deltas[b] = rng.uniform(lo, hi)
        deltas[b] = min(max(deltas[b], 1e-3), 1.0 - 1e-3)
        problem = WheelProblem(delta=float(deltas[b]))
        x[b] = sample_unit_disk(rng, N)
        for i in range(N):
            y[b, i], _ = wheel_rewards(problem, x[b, i], rng)
    return TaskBatch(x=x, y=y, m=m), deltas


# -- benchmark objectives ----------------------------------------------------------


def _ackley(x: np.ndarray) -> float:
    d = x.size
    s1 = np.sqrt((x * x).mean())
    s2 = np.cos(2.0 * math.pi * x).mean()
    return float(-20.0 * np.exp(-0.2 * s1) - np.exp(s2) + 20.0 + math.e)


def _dropwave(x: np.ndarray) -> float:
    r2 = float((x * x).sum())
    return float(-(1.0 + math.cos(12.0 * math.sqrt(r2))) / (0.5 * r2 + 2.0))


def _michalewicz(x: np.ndarray) -> float:
    i = np.arange(1, x.size + 1)
    return float(-(np.sin(x) * np.sin(i * x * x / math.pi) ** 20).sum())


def _cosine_mixture(x: np.ndarray) -> float:
    return float((x * x).sum() - 0.1 * np.cos(5.0 * math.pi * x).sum())


def _rastrigin(x: np.ndarray) -> float:
    return float(10.0 * x.size + ((x * x) - 10.0 * np.cos(2.0 * math.pi * x)).sum())


@dataclass
class BenchmarkFunction:
    name: str
    dim: int
    box: tuple[float, float]
    evaluate: callable = field(repr=False)
    known_optimum: float | None = None

    @property
    def domain(self) -> np.ndarray:
        return np.array([self.box] * self.dim)


_BENCHMARKS: dict[str, BenchmarkFunction] = {
    "ackley2": BenchmarkFunction("ackley2", 2, (-32.768, 32.768), _ackley, 0.0),
    "ackley3": BenchmarkFunction("ackley3", 3, (-32.768, 32.768), _ackley, 0.0),
    "dropwave2": BenchmarkFunction("dropwave2", 2, (-5.12, 5.12), _dropwave, -1.0),
    "michalewicz2": BenchmarkFunction("michalewicz2", 2, (0.0, math.pi), _michalewicz, None),
    "cosine3": BenchmarkFunction("cosine3", 3, (-1.0, 1.0), _cosine_mixture, -0.3),
    "rastrigin3": BenchmarkFunction("rastrigin3", 3, (-5.12, 5.12), _rastrigin, 0.0),
}


def benchmark_function(name: str) -> BenchmarkFunction:
    try:
        return _BENCHMARKS[name]
    except KeyError:
        raise ConfigError(f"unknown benchmark {name!r}; known: {sorted(_BENCHMARKS)}") from None


def benchmark_value(fn: BenchmarkFunction, x: np.ndarray) -> float:
    """Objective value under the minimization convention."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != fn.dim:
        raise ShapeError(f"{fn.name} expects {fn.dim} coordinates, got {x.size}")
    lo, hi = fn.box
    if (x < lo - 1e-12).any() or (x > hi + 1e-12).any():
        raise ConfigError(f"point {x} outside {fn.name} domain [{lo}, {hi}]^{fn.dim}")
    return fn.evaluate(x)

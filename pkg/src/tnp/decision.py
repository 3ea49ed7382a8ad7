"""Sequential decision loops: UCB contextual bandit on the wheel problem and
UCB Bayesian optimization with a model surrogate, with regret accounting.

Episodes split their generator into an environment stream and a policy
stream, so runs with different policies under the same seed face identical
environments (paired comparisons stay exact).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import qmc

from .errors import ConfigError, NumericError
from .model import TnpModel, predict_diagonal
from .tasks import (
    TaskBatch,
    WHEEL_ARMS,
    WheelProblem,
    benchmark_function,
    benchmark_value,
    kernel_matrix,
    KernelSpec,
    sample_unit_disk,
    GP_LENGTHSCALE_RANGE,
    GP_OUTPUT_SCALE_RANGE,
    X_RANGE_1D,
    _chol_with_escalation,
)

DEFAULT_KAPPA = 1.0
BANDIT_CONTEXT_WINDOW = 512
BO_INIT_COUNT = 5
BO_GRID_CANDIDATES = 1000
BO_SOBOL_CANDIDATES = 4096


def ucb_select_arm(means: np.ndarray, stds: np.ndarray, kappa: float) -> int:
    """Arm with the largest mean + kappa * std; ties go to the lowest index."""
    means = np.asarray(means, dtype=float)
    stds = np.asarray(stds, dtype=float)
    if means.shape != stds.shape:
        raise ConfigError(f"means {means.shape} vs stds {stds.shape}")
    if (stds < 0).any():
        raise ConfigError("stds must be nonnegative")
    return int(np.argmax(means + kappa * stds))


# -- wheel bandit -----------------------------------------------------------------


class TnpArmPredictor:
    """Adapts a trained D-variant reward model to the bandit interface.

    Context tuples carry the chosen arm's reward with a one-hot observed
    flag; the context is truncated to the most recent ``window`` tuples to
    stay within the trained sequence length.
    """

    min_context = 1

    def __init__(self, model: TnpModel, window: int = BANDIT_CONTEXT_WINDOW) -> None:
        if model.config.variant != "D":
            raise ConfigError("bandit predictor expects a D-variant model")
        if model.config.d_x != 2 or model.config.d_y != WHEEL_ARMS:
            raise ConfigError("bandit predictor expects d_x=2, d_y=5")
        self.model = model
        self.window = window

    def predict(
        self, ctx_x: np.ndarray, ctx_y: np.ndarray, ctx_flags: np.ndarray, X: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        t = len(ctx_x)
        lo = max(0, t - self.window)
        x = np.concatenate([ctx_x[lo:], X[None]], axis=0)[None]
        y = np.concatenate([ctx_y[lo:], np.zeros((1, WHEEL_ARMS))], axis=0)[None]
        batch = TaskBatch(x=x, y=y, m=t - lo, context_observed=ctx_flags[None, lo:])
        pred = predict_diagonal(self.model, batch)
        return pred.mean.data[0, 0], pred.sigma.data[0, 0]


class OracleArmPredictor:
    """Knows the true arm means; predicts them with zero uncertainty."""

    min_context = 0

    def __init__(self, problem: WheelProblem) -> None:
        self.problem = problem

    def predict(self, ctx_x, ctx_y, ctx_flags, X) -> tuple[np.ndarray, np.ndarray]:
        means, _ = self.problem.arm_means(X)
        return means, np.zeros(WHEEL_ARMS)


@dataclass
class BanditState:
    """Trajectory of one wheel episode."""

    delta: float
    X: np.ndarray  # (t, 2) coordinates seen
    rewards: np.ndarray  # (t, 5) observed entries only, rest zero
    flags: np.ndarray  # (t, 5) one-hot observed markers
    arms: np.ndarray  # (t,) chosen arms
    instantaneous_regret: np.ndarray  # (t,) optimal mean - chosen mean
    optimal_means: np.ndarray  # (t,)

    @property
    def steps(self) -> int:
        return len(self.arms)

    @property
    def cumulative_regret(self) -> float:
        return float(self.instantaneous_regret.sum())


def run_bandit_episode(
    predictor,
    delta: float,
    steps: int,
    kappa: float = DEFAULT_KAPPA,
    rng: np.random.Generator | None = None,
    policy: str = "ucb",
) -> BanditState:
    """Play one wheel episode; context grows by one observed tuple per step.

    The first steps fall back to uniform arms until the predictor has the
    context it needs. ``policy="uniform"`` ignores the predictor entirely.
    """
    if policy not in ("ucb", "uniform"):
        raise ConfigError(f"policy must be ucb|uniform, got {policy!r}")
    if rng is None:
        rng = np.random.default_rng(0)
    env_rng, policy_rng = rng.spawn(2)
    problem = WheelProblem(delta=delta)
    xs = np.zeros((steps, 2))
    rewards = np.zeros((steps, WHEEL_ARMS))
    flags = np.zeros((steps, WHEEL_ARMS))
    arms = np.zeros(steps, dtype=int)
    inst = np.zeros(steps)
    opt_means = np.zeros(steps)
    for t in range(steps):
        X = sample_unit_disk(env_rng, 1)[0]
        all_rewards = problem.arm_means(X)[0] + problem.reward_std * env_rng.standard_normal(
            WHEEL_ARMS
        )
        means, best = problem.arm_means(X)
        if policy == "uniform" or t < getattr(predictor, "min_context", 1):
            arm = int(policy_rng.integers(WHEEL_ARMS))
        else:
            mu, sigma = predictor.predict(xs[:t], rewards[:t], flags[:t], X)
            arm = ucb_select_arm(mu, sigma, kappa)
        xs[t] = X
        rewards[t, arm] = all_rewards[arm]
        flags[t, arm] = 1.0
        arms[t] = arm
        inst[t] = means[best] - means[arm]
        opt_means[t] = means[best]
    return BanditState(
        delta=delta,
        X=xs,
        rewards=rewards,
        flags=flags,
        arms=arms,
        instantaneous_regret=inst,
        optimal_means=opt_means,
    )


def regret_metrics(
    states: list[BanditState],
    uniform_states: list[BanditState],
    simple_window: int = 500,
) -> dict:
    """Cumulative and last-window regret, normalized so uniform policy = 100."""
    deltas = {s.delta for s in states} | {s.delta for s in uniform_states}
    step_counts = {s.steps for s in states} | {s.steps for s in uniform_states}
    if len(deltas) != 1 or len(step_counts) != 1:
        raise ConfigError("states must share delta and step count")

    def cumulative(ss):
        return float(np.mean([s.cumulative_regret for s in ss]))

    def simple(ss):
        return float(np.mean([s.instantaneous_regret[-simple_window:].mean() for s in ss]))

    cum, cum_u = cumulative(states), cumulative(uniform_states)
    simp, simp_u = simple(states), simple(uniform_states)
    return {
        "cumulative": cum,
        "simple": simp,
        "uniform_cumulative": cum_u,
        "uniform_simple": simp_u,
        "cumulative_normalized": 100.0 * cum / cum_u if cum_u > 0 else 0.0,
        "simple_normalized": 100.0 * simp / simp_u if simp_u > 0 else 0.0,
    }


# -- Bayesian optimization -----------------------------------------------------------


@dataclass
class Objective:
    """Black-box minimization target over a box domain."""

    fn: Callable[[np.ndarray], float]
    domain: np.ndarray  # (d, 2) rows of (lo, hi)
    optimum: float
    name: str = ""

    def __post_init__(self) -> None:
        self.domain = np.atleast_2d(np.asarray(self.domain, dtype=float))
        if (self.domain[:, 0] >= self.domain[:, 1]).any():
            raise ConfigError(f"empty domain {self.domain}")

    @property
    def dim(self) -> int:
        return self.domain.shape[0]


def objective_from_benchmark(name: str) -> Objective:
    fn = benchmark_function(name)
    if fn.known_optimum is None:
        raise ConfigError(f"benchmark {name} has no documented optimum")
    return Objective(
        fn=lambda x: benchmark_value(fn, x),
        domain=fn.domain,
        optimum=fn.known_optimum,
        name=name,
    )


def objective_from_gp_draw(
    rng: np.random.Generator,
    family: str = "rbf",
    grid_size: int = 2048,
) -> Objective:
    """1-D objective drawn from the GP prior on a dense grid, linearly
    interpolated between grid points so the grid minimum is the true optimum."""
    lo, hi = X_RANGE_1D
    grid = np.linspace(lo, hi, grid_size)
    spec = KernelSpec(
        family=family,
        lengthscale=float(rng.uniform(*GP_LENGTHSCALE_RANGE)),
        output_scale=float(rng.uniform(*GP_OUTPUT_SCALE_RANGE)),
    )
    K = kernel_matrix(spec, grid[:, None])
    L = _chol_with_escalation(K, spec.jitter)
    values = L @ rng.standard_normal(grid_size)
    return Objective(
        fn=lambda x: float(np.interp(np.asarray(x).reshape(-1)[0], grid, values)),
        domain=np.array([[lo, hi]]),
        optimum=float(values.min()),
        name=f"gp-{family}",
    )


class TnpSurrogate:
    """D-variant model as a BO surrogate, with optional input/output scaling.

    Candidates are predicted in chunks; target independence under the D mask
    makes chunked prediction exactly equivalent to one joint pass.
    """

    def __init__(
        self,
        model: TnpModel,
        domain: np.ndarray | None = None,
        standardize_y: bool = False,
        chunk: int = 256,
    ) -> None:
        if model.config.variant != "D":
            raise ConfigError("surrogate expects a D-variant model")
        self.model = model
        self.domain = None if domain is None else np.atleast_2d(domain)
        self.standardize_y = standardize_y
        self.chunk = chunk

    def _map_x(self, x: np.ndarray) -> np.ndarray:
        if self.domain is None:
            return x
        lo, hi = self.domain[:, 0], self.domain[:, 1]
        return (x - lo) / (hi - lo)

    def predict(
        self, archive_x: np.ndarray, archive_y: np.ndarray, candidates: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        ax = self._map_x(np.asarray(archive_x, dtype=float))
        ay = np.asarray(archive_y, dtype=float)
        shift, scale = 0.0, 1.0
        if self.standardize_y:
            shift = float(ay.mean())
            scale = max(float(ay.std()), 1e-8)
        ay = (ay - shift) / scale
        cx = self._map_x(np.asarray(candidates, dtype=float))
        mus, sigmas = [], []
        for start in range(0, len(cx), self.chunk):
            part = cx[start : start + self.chunk]
            x = np.concatenate([ax, part], axis=0)[None]
            y = np.concatenate([ay, np.zeros(len(part))], axis=0)[None, :, None]
            batch = TaskBatch(x=x, y=y, m=len(ax))
            pred = predict_diagonal(self.model, batch)
            mus.append(pred.mean.data[0, :, 0])
            sigmas.append(pred.sigma.data[0, :, 0])
        return np.concatenate(mus) * scale + shift, np.concatenate(sigmas) * scale


class OracleSurrogate:
    """True objective values with zero predictive uncertainty."""

    def __init__(self, objective: Objective) -> None:
        self.objective = objective

    def predict(self, archive_x, archive_y, candidates):
        mu = np.array([self.objective.fn(c) for c in np.atleast_2d(candidates)])
        return mu, np.zeros_like(mu)


class ConstantSurrogate:
    """Flat mean and std everywhere (useful for degenerate-policy checks)."""

    def __init__(self, mean: float = 0.0, std: float = 1.0) -> None:
        self.mean, self.std = mean, std

    def predict(self, archive_x, archive_y, candidates):
        k = len(np.atleast_2d(candidates))
        return np.full(k, self.mean), np.full(k, self.std)


def ucb_acquisition_select(
    surrogate,
    archive_x: np.ndarray,
    archive_y: np.ndarray,
    candidates: np.ndarray,
    kappa: float = DEFAULT_KAPPA,
) -> tuple[np.ndarray, int]:
    """Candidate maximizing -mean + kappa * std (minimization convention)."""
    candidates = np.atleast_2d(candidates)
    if len(candidates) == 0:
        raise ConfigError("empty candidate set")
    mu, sigma = surrogate.predict(archive_x, archive_y, candidates)
    scores = -mu + kappa * sigma
    idx = int(np.argmax(scores))
    return candidates[idx], idx


@dataclass
class BoState:
    """Archive and regret trace of one optimization run."""

    objective_name: str
    optimum: float
    archive_x: np.ndarray
    archive_y: np.ndarray
    best_trace: np.ndarray  # best-so-far after each iteration
    simple_regret: np.ndarray  # best-so-far minus known optimum

    @property
    def iterations(self) -> int:
        return len(self.best_trace)

    @property
    def best(self) -> float:
        return float(self.archive_y.min())


def _candidates_for(
    objective: Objective,
    rule: str,
    cand_rng: np.random.Generator,
    sobol: qmc.Sobol | None,
) -> np.ndarray:
    lo, hi = objective.domain[:, 0], objective.domain[:, 1]
    if rule == "grid":
        return np.linspace(lo, hi, BO_GRID_CANDIDATES).reshape(BO_GRID_CANDIDATES, -1)
    if rule == "sobol":
        return qmc.scale(sobol.random(BO_SOBOL_CANDIDATES), lo, hi)
    if rule == "random":
        return cand_rng.uniform(lo, hi, size=(BO_GRID_CANDIDATES, objective.dim))
    raise ConfigError(f"unknown candidate rule {rule!r}")


def run_bo(
    objective: Objective,
    surrogate,
    iters: int,
    init_count: int = BO_INIT_COUNT,
    kappa: float = DEFAULT_KAPPA,
    rng: np.random.Generator | None = None,
    candidate_rule: str | None = None,
    select: str = "ucb",
) -> BoState:
    """UCB loop: random initialization, then acquire-evaluate-update.

    ``select="random"`` ignores the surrogate and picks a uniformly random
    candidate each iteration (the paired random-search baseline). Candidate
    construction defaults to a fixed grid in 1-D and scrambled quasi-uniform
    samples in higher dimensions.
    """
    if iters < 1:
        raise ConfigError(f"iters must be >= 1, got {iters}")
    if select not in ("ucb", "random"):
        raise ConfigError(f"select must be ucb|random, got {select!r}")
    if rng is None:
        rng = np.random.default_rng(0)
    init_rng, cand_rng = rng.spawn(2)
    rule = candidate_rule or ("grid" if objective.dim == 1 else "sobol")
    if select == "random" and candidate_rule is None:
        rule = "random"
    sobol = None
    if rule == "sobol":
        sobol = qmc.Sobol(objective.dim, scramble=True, seed=cand_rng)

    lo, hi = objective.domain[:, 0], objective.domain[:, 1]
    xs = list(init_rng.uniform(lo, hi, size=(init_count, objective.dim)))
    ys = []
    for x in xs:
        value = objective.fn(x)
        if not np.isfinite(value):
            raise NumericError(f"objective returned non-finite value at {x}")
        ys.append(value)

    best_trace, regret = [], []
    for _ in range(iters):
        candidates = _candidates_for(objective, rule, cand_rng, sobol)
        if select == "random":
            idx = int(cand_rng.integers(len(candidates)))
            x_next = candidates[idx]
        else:
            x_next, _ = ucb_acquisition_select(
                surrogate, np.array(xs), np.array(ys), candidates, kappa
            )
        value = objective.fn(x_next)
        if not np.isfinite(value):
            raise NumericError(f"objective returned non-finite value at {x_next}")
        xs.append(x_next)
        ys.append(value)
        best_trace.append(min(ys))
        regret.append(min(ys) - objective.optimum)
    return BoState(
        objective_name=objective.name,
        optimum=objective.optimum,
        archive_x=np.array(xs),
        archive_y=np.array(ys),
        best_trace=np.array(best_trace),
        simple_regret=np.array(regret),
    )

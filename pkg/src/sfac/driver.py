"""Single-loop federated actor-critic orchestration.

Each outer round k broadcasts θ_{k-1}, runs T FedC rounds warm-started from
the previous critic, then takes one FedA step. Critic and actor chains keep
running across rounds; nothing is re-mixed or discarded.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .actor import FedAConfig, feda_aggregate, local_policy_gradient, policy_table
from .critic import FedCConfig, run_fedc
from .features import FeatureMap, one_hot_policy_features
from .mdp import TabularMdp
from .oracles import exact_avg_J, exact_avg_policy_gradient, exact_td_fixed_point, td_system
from .sampling import SELECT_AGENT, ChainCursor, sample_minibatch, sampling_tables, stream_rng


class NumericalDivergenceError(FloatingPointError):
    pass


@dataclass
class StepSchedule:
    """Constant ``(a, b) * sqrt(N/K)`` or geometric ``(alpha0, beta0) * decay**k``.

    ``growing`` flips the geometric exponent to ``decay**(-k)``, a
    growing schedule kept only for reproduction attempts.
    """

    mode: str = "constant"
    a: float = 1.0
    b: float = 1.0
    alpha0: float = 1e-4
    beta0: float = 1e-4
    decay: float = 0.99
    growing: bool = False

    def __post_init__(self):
        if self.mode not in ("constant", "geometric"):
            raise ValueError(f"unknown schedule mode {self.mode!r}")
        if self.mode == "geometric" and not 0.0 < self.decay <= 1.0:
            raise ValueError("decay must lie in (0, 1]")


@dataclass
class SfacConfig:
    outer_K: int
    inner_T: int
    fedc: FedCConfig
    feda: FedAConfig
    schedule: StepSchedule = field(default_factory=StepSchedule)
    master_seed: int = 0
    oracle_stride: int = 1

    def __post_init__(self):
        if self.outer_K < 1 or self.inner_T < 1:
            raise ValueError("outer_K and inner_T must be >= 1")
        if self.oracle_stride < 0:
            raise ValueError("oracle_stride must be >= 0 (0 disables oracles)")


def step_schedule(k: int, config: SfacConfig, n_agents: int) -> tuple[float, float]:
    sch = config.schedule
    if sch.mode == "constant":
        scale = math.sqrt(n_agents / config.outer_K)
        return sch.a * scale, sch.b * scale
    exponent = -k if sch.growing else k
    factor = sch.decay ** exponent
    return sch.alpha0 * factor, sch.beta0 * factor


@dataclass
class RoundRecord:
    k: int
    alpha_k: float
    beta_k: float
    J_avg_exact: float | None
    grad_norm_sq_exact: float | None
    critic_err_sq: float | None
    wall_time: float


@dataclass
class RunHistory:
    """Per-round records plus everything needed to replay or audit a run."""

    records: list[RoundRecord] = field(default_factory=list)
    thetas: list[np.ndarray] = field(default_factory=list)
    theta0: np.ndarray | None = None
    J0: float | None = None
    selected_k: int | None = None
    fedc_trace: list[tuple] = field(default_factory=list)
    feda_trace: list[tuple] = field(default_factory=list)
    omega_bounds: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    interactions: int = 0
    final_omega: np.ndarray | None = None

    @property
    def final_theta(self) -> np.ndarray:
        return self.thetas[-1]

    def trace_rows(self) -> list[dict]:
        rows = []
        for rec in self.records:
            rows.append({"k": rec.k, "alpha_k": rec.alpha_k, "beta_k": rec.beta_k,
                         "J_avg_exact": rec.J_avg_exact,
                         "grad_norm_sq_exact": rec.grad_norm_sq_exact,
                         "critic_err_sq": rec.critic_err_sq,
                         "selected_flag": int(rec.k == self.selected_k)})
        return rows


def select_output(history: RunHistory, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw of K̂ from {1..K}; returns θ_K̂ and marks it in the history."""
    K = len(history.thetas)
    if K < 1:
        raise ValueError("history holds no iterates")
    history.selected_k = int(rng.integers(1, K + 1))
    return history.thetas[history.selected_k - 1]


def _check_finite(k: int, **arrays):
    for name, arr in arrays.items():
        if not np.all(np.isfinite(arr)):
            raise NumericalDivergenceError(
                f"round {k}: non-finite entries in {name} (max |.| = {np.nanmax(np.abs(arr))})")


def run_sfac(envs: Sequence[TabularMdp], features: FeatureMap, config: SfacConfig,
             policy_features=None, theta0=None, omega0=None, record_omegas: bool = False):
    """Run K outer rounds; returns (RunHistory, selected θ).

    θ_0 is the initial policy; round k evaluates θ_{k-1} and produces θ_k, so
    ``history.thetas`` holds θ_1..θ_K and the output is drawn among them.
    """
    n = len(envs)
    n_states, n_actions = envs[0].n_states, envs[0].n_actions
    if any(e.n_states != n_states or e.n_actions != n_actions for e in envs):
        raise ValueError("all environments must share state and action spaces")
    if features.n_states != n_states:
        raise ValueError("feature map does not match the state space")
    if len(config.fedc.local_updates) != n:
        raise ValueError("need one local-update count per agent")
    x = one_hot_policy_features(n_states, n_actions) if policy_features is None else policy_features
    theta = np.zeros(x.shape[2]) if theta0 is None else np.array(theta0, dtype=np.float64)
    omega = np.zeros(features.d) if omega0 is None else np.array(omega0, dtype=np.float64)
    gamma = envs[0].discount
    M = config.feda.minibatch_M

    critic_cursors = [ChainCursor.start(config.master_seed, i, "critic", envs[i]) for i in range(n)]
    actor_cursors = [ChainCursor.start(config.master_seed, i, "actor", envs[i]) for i in range(n)]
    history = RunHistory(theta0=theta.copy())
    if config.oracle_stride:
        history.J0 = exact_avg_J(theta, envs, x)

    for k in range(1, config.outer_K + 1):
        t0 = time.perf_counter()
        alpha_k, beta_k = step_schedule(k, config, n)
        pi = policy_table(theta, x)
        use_oracle = config.oracle_stride > 0 and k % config.oracle_stride == 0
        target = exact_td_fixed_point(td_system(envs, features, pi)) if use_oracle else None

        fedc = replace(config.fedc, beta=beta_k, rounds_T=config.inner_T)
        omega_start = omega.copy()
        omega, _ = run_fedc(pi, envs, omega, fedc, critic_cursors, features, target=target,
                            trace=history.fedc_trace, outer_k=k)
        if record_omegas:
            history.omega_bounds.append((omega_start, omega.copy()))

        grads = []
        for i, env in enumerate(envs):
            batch = sample_minibatch(actor_cursors[i], env, sampling_tables(env, pi), M)
            h_i = local_policy_gradient(theta, omega, batch, features, gamma, x)
            history.feda_trace.append((k, i, float(np.linalg.norm(h_i))))
            grads.append(h_i)
        theta = feda_aggregate(theta, grads, alpha_k)
        history.feda_trace.append((k, "mean", float(np.linalg.norm(sum(grads) / n))))
        _check_finite(k, theta=theta, omega=omega)

        J = grad_sq = err = None
        if use_oracle:
            J = exact_avg_J(theta, envs, x)
            grad_sq = float(np.sum(exact_avg_policy_gradient(theta, envs, x) ** 2))
            err = float(np.sum((omega - target) ** 2))
        history.thetas.append(theta.copy())
        history.records.append(RoundRecord(k, alpha_k, beta_k, J, grad_sq, err,
                                           time.perf_counter() - t0))

    history.final_omega = omega
    history.interactions = sum(c.steps for c in critic_cursors) + sum(c.steps for c in actor_cursors)
    theta_hat = select_output(history, stream_rng(config.master_seed, SELECT_AGENT, "select"))
    return history, theta_hat


def expected_interactions(config: SfacConfig, n_agents: int) -> int:
    """K (T Σ υ_i + N M): the sample budget of one run."""
    return config.outer_K * (config.inner_T * sum(config.fedc.local_updates)
                             + n_agents * config.feda.minibatch_M)


"""Federated linear TD(0) critic.

Agents run local semi-gradient TD loops from the broadcast weights and report
their averaged gradient; the server takes one projected step with the mean
local-update count as multiplier.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .actor import td_error
from .features import FeatureMap
from .mdp import TabularMdp
from .sampling import ChainCursor, Observation, _draw, sampling_tables


def project_ball(v: np.ndarray, radius: float) -> np.ndarray:
    """Euclidean projection onto the centred ball of the given radius."""
    norm = float(np.linalg.norm(v))
    if norm <= radius:
        return v
    return v * (radius / norm)


@dataclass
class CriticModel:
    omega: np.ndarray
    radius_H: float

    def __post_init__(self):
        self.omega = project_ball(np.asarray(self.omega, dtype=np.float64), self.radius_H)


@dataclass
class FedCConfig:
    beta: float
    local_updates: list[int]
    rounds_T: int
    radius_H: float
    local_betas: list[float] | None = field(default=None)

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.rounds_T < 0:
            raise ValueError("rounds_T must be nonnegative")
        if not self.local_updates or min(self.local_updates) < 1:
            raise ValueError("every local update count must be >= 1")
        if self.local_betas is not None and len(self.local_betas) != len(self.local_updates):
            raise ValueError("local_betas must have one entry per agent")

    @property
    def mean_local_updates(self) -> float:
        return sum(self.local_updates) / len(self.local_updates)

    def agent_beta(self, i: int) -> float:
        return self.beta if self.local_betas is None else self.local_betas[i]


def td_semi_gradient(omega, obs: Observation, features: FeatureMap, gamma: float) -> np.ndarray:
    """(r + γ φ(s')ᵀω - φ(s)ᵀω) φ(s)."""
    return td_error(omega, obs, features, gamma) * features.phi[obs.s]


def td_decomposition(obs: Observation, features: FeatureMap, gamma: float, omega_ref):
    """Split the semi-gradient as Â(O)(ω - ω_ref) + Ẑ(O).

    Returns (Â, Ẑ) with Â = φ(s)(γφ(s') - φ(s))ᵀ and Ẑ = Â ω_ref + r φ(s).
    """
    phi_s = features.phi[obs.s]
    A = np.outer(phi_s, gamma * features.phi[obs.env_next] - phi_s)
    Z = A @ omega_ref + obs.r * phi_s
    return A, Z


def local_critic_loop(env: TabularMdp, policy, omega_start, beta: float, n_local: int,
                      cursor: ChainCursor, features: FeatureMap,
                      record: list | None = None):
    """Run ``n_local`` TD steps on a private copy of ``omega_start``.

    Returns ``(d, cursor)`` where d is the average of the semi-gradients seen
    along the local trajectory. Observations are appended to ``record`` when
    given.
    """
    if n_local < 1:
        raise ValueError("n_local must be >= 1")
    if cursor.chain_kind != "critic":
        raise ValueError("local_critic_loop needs a critic cursor")
    tb = sampling_tables(env, policy)
    g = tb.discount
    pcum, tcum, rew = tb.policy_cum, tb.trans_cum, tb.reward
    s = cursor.current_state

    if features.is_tabular:
        w = np.asarray(omega_start, dtype=np.float64).tolist()
        gsum = [0.0] * len(w)
        for _ in range(n_local):
            a = _draw(pcum[s], cursor.uniform())
            s2 = _draw(tcum[s][a], cursor.uniform())
            r = rew[s][a][s2]
            if record is not None:
                record.append(Observation(s, a, r, s2, s2, False))
            delta = r + g * w[s2] - w[s]
            gsum[s] += delta
            w[s] += beta * delta
            s = s2
        d = np.array(gsum) / n_local
    else:
        rows = list(features.phi)
        w = np.array(omega_start, dtype=np.float64)
        gsum = np.zeros_like(w)
        for _ in range(n_local):
            a = _draw(pcum[s], cursor.uniform())
            s2 = _draw(tcum[s][a], cursor.uniform())
            r = rew[s][a][s2]
            if record is not None:
                record.append(Observation(s, a, r, s2, s2, False))
            fs = rows[s]
            grad = (r + g * float(rows[s2] @ w) - float(fs @ w)) * fs
            gsum += grad
            w += beta * grad
            s = s2
        d = gsum / n_local

    cursor.current_state = s
    cursor.steps += n_local
    return d, cursor


def fedc_aggregate(omega_t, gradients: Sequence[np.ndarray], beta: float,
                   local_updates: Sequence[int], radius_H: float) -> np.ndarray:
    """ω ← Π_H(ω + β ῡ mean_i d_i), summing agents in ascending order."""
    total = np.zeros_like(np.asarray(omega_t, dtype=np.float64))
    for d in gradients:
        total = total + d
    mean_d = total / len(gradients)
    upsilon_bar = sum(local_updates) / len(local_updates)
    return project_ball(np.asarray(omega_t, dtype=np.float64) + beta * upsilon_bar * mean_d,
                        radius_H)


def run_fedc(policy, envs: Sequence[TabularMdp], omega_init, config: FedCConfig,
             cursors: Sequence[ChainCursor], features: FeatureMap, target=None,
             trace: list | None = None, outer_k: int = 0):
    """T rounds of local loops followed by server aggregation.

    ``policy`` is one action table shared by all agents. When ``target`` is
    given, one row ``(outer_k, t, ||ω - target||², ||mean d||)`` per round is
    appended to ``trace``; otherwise the error column is None.
    """
    n = len(envs)
    if len(cursors) != n or len(config.local_updates) != n:
        raise ValueError("need one cursor and one local-update count per agent")
    tables = [sampling_tables(env, policy) for env in envs]
    omega = project_ball(np.array(omega_init, dtype=np.float64), config.radius_H)
    for t in range(config.rounds_T):
        grads = []
        for i in range(n):
            d, _ = local_critic_loop(envs[i], tables[i], omega, config.agent_beta(i),
                                     config.local_updates[i], cursors[i], features)
            grads.append(d)
        omega = fedc_aggregate(omega, grads, config.beta, config.local_updates,
                               config.radius_H)
        if trace is not None:
            err = None if target is None else float(np.sum((omega - target) ** 2))
            mean_norm = float(np.linalg.norm(sum(grads) / n))
            trace.append((outer_k, t, err, mean_norm))
    return omega, trace

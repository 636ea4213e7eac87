"""Tabular MDPs, induced Markov chains and exact chain quantities.

Everything here is dense numpy linear algebra over small state spaces; the
functions are pure and safe to call from concurrent workers.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ROW_TOL = 1e-12
SMOOTHING_EPS = 1e-3


class NonErgodicError(ValueError):
    """Raised when a chain is periodic or reducible."""


class DegenerateSupportError(ValueError):
    """Raised when the averaged stationary diagonal is not invertible."""


@dataclass(frozen=True)
class TabularMdp:
    """One agent's environment.

    ``transition[s, a, s']`` and ``reward[s, a, s']`` are dense tensors;
    ``initial_dist`` is the start-state distribution b.
    """

    transition: np.ndarray
    reward: np.ndarray
    discount: float
    initial_dist: np.ndarray
    reward_bound: float = 1.0

    def __post_init__(self):
        # private copies: the arrays are frozen below and must not alias caller data
        P = np.array(self.transition, dtype=np.float64)
        R = np.array(self.reward, dtype=np.float64)
        b = np.array(self.initial_dist, dtype=np.float64)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError(f"transition must have shape (S, A, S), got {P.shape}")
        if R.shape != P.shape:
            raise ValueError(f"reward shape {R.shape} does not match transition {P.shape}")
        if b.shape != (P.shape[0],):
            raise ValueError(f"initial_dist shape {b.shape}, expected ({P.shape[0]},)")
        if not 0.0 < self.discount < 1.0:
            raise ValueError(f"discount must lie in (0, 1), got {self.discount}")
        if np.any(P < 0) or np.max(np.abs(P.sum(axis=2) - 1.0)) > ROW_TOL:
            raise ValueError("transition rows must be nonnegative and sum to 1")
        if np.any(b < 0) or abs(b.sum() - 1.0) > ROW_TOL:
            raise ValueError("initial_dist must be a probability vector")
        if np.max(np.abs(R)) > self.reward_bound:
            raise ValueError(f"|reward| exceeds declared bound {self.reward_bound}")
        for name, arr in (("transition", P), ("reward", R), ("initial_dist", b)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]


@dataclass(frozen=True)
class StateChain:
    """Markov reward process induced by a fixed policy."""

    transition_matrix: np.ndarray
    reward_vector: np.ndarray
    stationary: np.ndarray | None = None

    def __post_init__(self):
        P = np.asarray(self.transition_matrix, dtype=np.float64)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise ValueError(f"transition_matrix must be square, got {P.shape}")
        if np.max(np.abs(P.sum(axis=1) - 1.0)) > ROW_TOL:
            raise ValueError("rows of transition_matrix must sum to 1")
        object.__setattr__(self, "transition_matrix", P)
        object.__setattr__(self, "reward_vector", np.asarray(self.reward_vector, dtype=np.float64))
        if self.stationary is not None:
            D = np.asarray(self.stationary, dtype=np.float64)
            if np.max(np.abs(D @ P - D)) > 1e-10 or abs(D.sum() - 1.0) > 1e-10:
                raise ValueError("stationary is not invariant under transition_matrix")
            object.__setattr__(self, "stationary", D)

    @property
    def n_states(self) -> int:
        return self.transition_matrix.shape[0]

    def with_stationary(self) -> "StateChain":
        return StateChain(self.transition_matrix, self.reward_vector,
                          stationary_distribution(self))


@dataclass(frozen=True)
class MixtureChain:
    """Chain (D*, P*, R*) whose TD system equals the agents' average."""

    d_star: np.ndarray
    p_star: np.ndarray
    r_star: np.ndarray
    extra: dict = field(default_factory=dict, compare=False)


def _check_policy(policy, n_states, n_actions):
    pi = np.asarray(policy, dtype=np.float64)
    if pi.shape != (n_states, n_actions):
        raise ValueError(f"policy shape {pi.shape} does not match env ({n_states}, {n_actions})")
    if np.any(pi < 0) or np.max(np.abs(pi.sum(axis=1) - 1.0)) > 1e-10:
        raise ValueError("policy rows must be distributions over actions")
    return pi


def induce_state_chain(env: TabularMdp, policy) -> StateChain:
    """Marginalise the action out of ``env`` under ``policy[s, a]``."""
    pi = _check_policy(policy, env.n_states, env.n_actions)
    P_pi = np.einsum("sa,sat->st", pi, env.transition)
    R_pi = np.einsum("sa,sat,sat->s", pi, env.transition, env.reward)
    # renormalise away accumulated rounding so the row invariant holds tightly
    P_pi = P_pi / P_pi.sum(axis=1, keepdims=True)
    return StateChain(P_pi, R_pi)


def check_ergodic(P: np.ndarray, max_squarings: int = 64, tol: float = 1e-10) -> np.ndarray:
    """Power-iteration ergodicity check by repeated squaring.

    Returns the limiting row (the stationary distribution estimate) or raises
    NonErgodicError when P^(2^k) never becomes rank one.
    """
    Q = np.asarray(P, dtype=np.float64)
    for _ in range(max_squarings):
        spread = np.max(Q.max(axis=0) - Q.min(axis=0))
        if spread <= tol:
            return Q.mean(axis=0)
        Q = Q @ Q
    raise NonErgodicError("chain did not converge under power iteration (periodic or reducible)")


def stationary_distribution(chain: StateChain) -> np.ndarray:
    P = chain.transition_matrix
    check_ergodic(P)
    n = P.shape[0]
    # replace one balance equation by the normalisation constraint
    M = P.T - np.eye(n)
    M[-1, :] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    D = np.linalg.solve(M, rhs)
    D = np.clip(D, 0.0, None)
    return D / D.sum()


def exact_value(chain: StateChain, gamma: float) -> np.ndarray:
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    P, R = chain.transition_matrix, chain.reward_vector
    V = np.linalg.solve(np.eye(P.shape[0]) - gamma * P, R)
    resid = np.max(np.abs(V - (R + gamma * P @ V)), initial=0.0)
    scale = max(1.0, np.max(np.abs(V), initial=0.0))
    assert resid < 1e-10 * scale, f"Bellman residual {resid:.3e}"
    return V


def discounted_visitation(env: TabularMdp, policy, over: str = "states") -> np.ndarray:
    """Normalised discounted visitation (1-γ) bᵀ (I - γ P_π)⁻¹.

    ``over="state-actions"`` returns an (S, A) array ν(s)π(a|s).
    """
    pi = _check_policy(policy, env.n_states, env.n_actions)
    chain = induce_state_chain(env, pi)
    g = env.discount
    nu = (1.0 - g) * np.linalg.solve((np.eye(env.n_states) - g * chain.transition_matrix).T,
                                     env.initial_dist)
    nu = np.clip(nu, 0.0, None)
    nu = nu / nu.sum()
    if over == "states":
        return nu
    if over in ("state-actions", "state_actions"):
        return nu[:, None] * pi
    raise ValueError(f"over must be 'states' or 'state-actions', got {over!r}")


def build_mixture(chains: list[StateChain], gamma: float) -> MixtureChain:
    """Average-of-agents chain satisfying the diagonal-weighted identities.

    R* = D*⁻¹ (1/N)Σ D_i R_i and P* = D*⁻¹ (1/N)Σ D_i P_i with D* = (1/N)Σ D_i.
    """
    if not chains:
        raise ValueError("need at least one chain")
    Ds = []
    for i, ch in enumerate(chains):
        D = ch.stationary if ch.stationary is not None else stationary_distribution(ch)
        if np.min(D) < 1e-12:
            raise DegenerateSupportError(f"agent {i} stationary distribution has zero support")
        Ds.append(D)
    n = len(chains)
    d_star = sum(Ds) / n
    weighted_R = sum(D * ch.reward_vector for D, ch in zip(Ds, chains)) / n
    weighted_P = sum(D[:, None] * ch.transition_matrix for D, ch in zip(Ds, chains)) / n
    r_star = weighted_R / d_star
    p_star = weighted_P / d_star[:, None]
    return MixtureChain(d_star=d_star, p_star=p_star, r_star=r_star, extra={"gamma": gamma})


def _garnet_kernel(rng: np.random.Generator, n_states: int, n_actions: int,
                   branching: int) -> np.ndarray:
    P = np.zeros((n_states, n_actions, n_states))
    for s in range(n_states):
        for a in range(n_actions):
            support = rng.choice(n_states, size=branching, replace=False)
            cuts = np.sort(rng.random(branching - 1))
            P[s, a, support] = np.diff(np.concatenate(([0.0], cuts, [1.0])))
    return P


def _family_rng(base_seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(base_seed, spawn_key=key))


def generate_family(base_seed: int, n_agents: int, n_states: int, n_actions: int,
                    heterogeneity: float, discount: float = 0.99,
                    reward_scale: float = 1.0) -> list[TabularMdp]:
    """Heterogeneous Garnet family sharing one random base environment.

    Agent i mixes the base kernel/rewards with its own random draw at weight
    ``heterogeneity``; agent draws depend only on (base_seed, i), so growing
    ``n_agents`` keeps earlier agents unchanged.
    """
    h = float(heterogeneity)
    if not 0.0 <= h <= 1.0:
        raise ValueError(f"heterogeneity must lie in [0, 1], got {h}")
    branching = min(3, n_states)
    base = _family_rng(base_seed, 0)
    P0 = _garnet_kernel(base, n_states, n_actions, branching)
    R0 = np.broadcast_to(base.random((n_states, n_actions))[:, :, None],
                         (n_states, n_actions, n_states))
    b0 = base.dirichlet(np.ones(n_states))

    family = []
    for i in range(n_agents):
        rng = _family_rng(base_seed, 1, i)
        U = _garnet_kernel(rng, n_states, n_actions, branching)
        W = np.broadcast_to(rng.random((n_states, n_actions))[:, :, None], R0.shape)
        c = rng.dirichlet(np.ones(n_states))
        P = (1.0 - h) * P0 + h * U
        P = (1.0 - SMOOTHING_EPS) * P + SMOOTHING_EPS / n_states
        P = P / P.sum(axis=2, keepdims=True)
        R = reward_scale * ((1.0 - h) * R0 + h * W)
        b = (1.0 - h) * b0 + h * c
        family.append(TabularMdp(P, np.array(R), discount, b / b.sum(),
                                 reward_bound=float(reward_scale)))
    return family

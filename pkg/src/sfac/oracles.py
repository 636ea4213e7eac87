"""Exact ground truth: TD fixed points, J and ∇J, and diagnostic constants.

All quantities are computed by dense linear algebra on the tabular model,
never by sampling, so they can serve as oracles for the stochastic code.

Gradient normalisation: J_i(θ) = (1-γ) Σ_s b_i(s) V_θ(s) and the matching
gradient is ∇J_i = Σ_{s,a} ν_θ(s, a) Q_θ(s, a) ψ_θ(s, a) with ν the
*normalised* discounted visitation; the (1-γ) in J cancels the 1/(1-γ) of the
policy gradient theorem. Finite differences of ``exact_J`` confirm this.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linprog

from .actor import policy_table, score_table
from .critic import project_ball
from .features import FeatureMap
from .mdp import (StateChain, TabularMdp, build_mixture, discounted_visitation, exact_value,
                  induce_state_chain, stationary_distribution)
from .sampling import estimate_mixing


class IllConditionedError(np.linalg.LinAlgError):
    pass


@dataclass
class TdSystem:
    """Expected TD dynamics g_i(ω) = A_i ω + b_i for one fixed policy.

    A_i = Φᵀ D_i (γP_i - I) Φ and b_i = Φᵀ D_i R_i, with D_i the stationary
    distribution of agent i's induced chain.
    """

    A: list[np.ndarray]
    b: list[np.ndarray]
    stationary: list[np.ndarray]
    chains: list[StateChain]
    gamma: float

    @property
    def n_agents(self) -> int:
        return len(self.A)

    @property
    def A_global(self) -> np.ndarray:
        return sum(self.A) / len(self.A)

    @property
    def b_global(self) -> np.ndarray:
        return sum(self.b) / len(self.b)

    def scoped(self, scope) -> tuple[np.ndarray, np.ndarray]:
        if scope == "global":
            return self.A_global, self.b_global
        return self.A[scope], self.b[scope]


def td_system(envs: Sequence[TabularMdp], features: FeatureMap, policy) -> TdSystem:
    Phi = features.phi
    A, b, Ds, chains = [], [], [], []
    for env in envs:
        chain = induce_state_chain(env, policy)
        D = stationary_distribution(chain)
        chain = StateChain(chain.transition_matrix, chain.reward_vector, D)
        g = env.discount
        A.append(Phi.T @ (D[:, None] * (g * chain.transition_matrix - np.eye(env.n_states))) @ Phi)
        b.append(Phi.T @ (D * chain.reward_vector))
        Ds.append(D)
        chains.append(chain)
    return TdSystem(A, b, Ds, chains, envs[0].discount)


def mixture_td_system(system: TdSystem, features: FeatureMap) -> tuple[np.ndarray, np.ndarray]:
    """(Φᵀ D*(γP* - I)Φ, Φᵀ D* R*) for the mixture chain of the agents."""
    mix = build_mixture(system.chains, system.gamma)
    Phi = features.phi
    n = Phi.shape[0]
    A = Phi.T @ (mix.d_star[:, None] * (system.gamma * mix.p_star - np.eye(n))) @ Phi
    b = Phi.T @ (mix.d_star * mix.r_star)
    return A, b


def exact_td_fixed_point(system: TdSystem, scope="global") -> np.ndarray:
    """Solve A ω = -b for one agent (integer scope) or the agent average."""
    A, b = system.scoped(scope)
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond >= 1e10:
        who = "global system" if scope == "global" else f"agent {scope}"
        raise IllConditionedError(f"TD system of {who} is ill-conditioned (cond={cond:.3e})")
    omega = np.linalg.solve(A, -b)
    resid = np.max(np.abs(A @ omega + b))
    assert resid <= 1e-10 * max(1.0, np.max(np.abs(omega))), f"fixed-point residual {resid:.3e}"
    return omega


def exact_expected_td_gradient(omega, system: TdSystem, scope="global") -> np.ndarray:
    A, b = system.scoped(scope)
    return A @ omega + b


def expected_td_gradient_by_summation(omega, env: TabularMdp, features: FeatureMap,
                                      policy) -> np.ndarray:
    """Σ_{s,a,s'} D(s)π(a|s)P(s'|s,a) δ φ(s), summed term by term."""
    chain = induce_state_chain(env, policy)
    D = stationary_distribution(chain)
    pi = np.asarray(policy)
    Phi, g = features.phi, env.discount
    out = np.zeros(features.d)
    for s in range(env.n_states):
        for a in range(env.n_actions):
            for s2 in range(env.n_states):
                w = D[s] * pi[s, a] * env.transition[s, a, s2]
                if w == 0.0:
                    continue
                delta = env.reward[s, a, s2] + g * Phi[s2] @ omega - Phi[s] @ omega
                out += w * delta * Phi[s]
    return out


def action_values(env: TabularMdp, policy) -> tuple[np.ndarray, np.ndarray]:
    """Exact (V, Q) of ``policy`` in ``env``."""
    V = exact_value(induce_state_chain(env, policy), env.discount)
    Q = np.einsum("sat,sat->sa", env.transition, env.reward + env.discount * V[None, None, :])
    return V, Q


def exact_J(theta, env: TabularMdp, x) -> float:
    pi = policy_table(theta, x)
    V = exact_value(induce_state_chain(env, pi), env.discount)
    return float((1.0 - env.discount) * env.initial_dist @ V)


def exact_avg_J(theta, envs: Sequence[TabularMdp], x) -> float:
    return sum(exact_J(theta, env, x) for env in envs) / len(envs)


def policy_value_J(env: TabularMdp, policy) -> float:
    V = exact_value(induce_state_chain(env, policy), env.discount)
    return float((1.0 - env.discount) * env.initial_dist @ V)


def exact_policy_gradient(theta, env: TabularMdp, x, form: str = "q") -> np.ndarray:
    """∇J_i(θ) = Σ ν(s,a) Q(s,a) ψ(s,a); ``form="advantage"`` uses A = Q - V instead."""
    pi = policy_table(theta, x)
    nu = discounted_visitation(env, pi, over="state-actions")
    V, Q = action_values(env, pi)
    weight = Q if form == "q" else Q - V[:, None]
    return np.einsum("sa,sad->d", nu * weight, score_table(theta, x))


def exact_avg_policy_gradient(theta, envs: Sequence[TabularMdp], x) -> np.ndarray:
    return sum(exact_policy_gradient(theta, env, x) for env in envs) / len(envs)


def expected_actor_gradient(theta, omega, env: TabularMdp, features: FeatureMap, x) -> np.ndarray:
    """Exhaustive Σ ν(s,a) P(s'|s,a) δ_ω(s,a,s') ψ(s,a): the mean of the mini-batch estimator."""
    pi = policy_table(theta, x)
    nu = discounted_visitation(env, pi, over="state-actions")
    v = features.phi @ omega
    delta = env.reward + env.discount * v[None, None, :] - v[:, None, None]
    mean_delta = np.einsum("sat,sat->sa", env.transition, delta)
    return np.einsum("sa,sad->d", nu * mean_delta, score_table(theta, x))


def policy_iteration(env: TabularMdp, max_iter: int = 1000) -> tuple[np.ndarray, np.ndarray]:
    """Optimal deterministic policy (as an (S, A) table) and its value."""
    S, A = env.n_states, env.n_actions
    greedy = np.zeros(S, dtype=int)
    for _ in range(max_iter):
        pi = np.eye(A)[greedy]
        V, Q = action_values(env, pi)
        improved = np.argmax(Q, axis=1)
        # keep the incumbent action on ties to guarantee termination
        keep = Q[np.arange(S), greedy] >= Q[np.arange(S), improved] - 1e-12
        improved = np.where(keep, greedy, improved)
        if np.array_equal(improved, greedy):
            return pi, V
        greedy = improved
    raise RuntimeError("policy iteration did not converge")


def best_avg_J_upper_bound(envs: Sequence[TabularMdp]) -> float:
    """Mean over agents of each agent's own optimal J; bounds any shared policy from above."""
    return sum(policy_value_J(env, policy_iteration(env)[0]) for env in envs) / len(envs)


def estimate_heterogeneity(system: TdSystem, probe: Sequence[np.ndarray], weights=None,
                           mode: str = "lexicographic"):
    """Smallest (χ², κ²) with Σ p_i||g_i||² <= χ²||Σ p_i g_i||² + κ² on every probe point.

    ``mode="lexicographic"`` minimises χ² first, which always gives χ² = 1 and
    κ² = max over the probe of the weighted dispersion Σ p_i||g_i - ḡ||².
    ``mode="min-sum"`` instead solves the two-variable LP minimising the bound
    summed over the probe; that trades χ² against κ², so its κ² need not be
    monotone in the heterogeneity of the family. Both are estimates on the
    probe set, not certificates.
    """
    if not probe:
        raise ValueError("probe set is empty")
    n = system.n_agents
    p = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
    L, G = [], []
    for omega in probe:
        grads = [system.A[i] @ omega + system.b[i] for i in range(n)]
        L.append(sum(p[i] * float(grads[i] @ grads[i]) for i in range(n)))
        mean = sum(p[i] * grads[i] for i in range(n))
        G.append(float(mean @ mean))
    L, G = np.array(L), np.array(G)
    if np.all(L - G <= 1e-12 * np.maximum(1.0, L)):
        return 1.0, 0.0
    if mode == "lexicographic":
        return 1.0, float(max(0.0, np.max(L - G)))
    if mode != "min-sum":
        raise ValueError(f"unknown mode {mode!r}")
    res = linprog(c=[G.sum(), len(G)], A_ub=np.column_stack([-G, -np.ones_like(G)]), b_ub=-L,
                  bounds=[(1.0, None), (0.0, None)], method="highs")
    if not res.success:
        raise RuntimeError(f"heterogeneity fit failed: {res.message}")
    chi_sq, kappa_sq = res.x
    return float(chi_sq), float(max(kappa_sq, 0.0))


def probe_ball(center, radius: float, n: int, seed: int = 0) -> list[np.ndarray]:
    """``center`` plus n points drawn uniformly from the ball of ``radius`` around it."""
    rng = np.random.default_rng(seed)
    center = np.asarray(center, dtype=np.float64)
    d = center.size
    pts = [center]
    for _ in range(n):
        u = rng.standard_normal(d)
        u /= np.linalg.norm(u)
        pts.append(center + radius * rng.random() ** (1.0 / d) * u)
    return pts


def estimate_lambda(system: TdSystem) -> float:
    """λ = 2 λ_min(-(A + Aᵀ)/2) for the averaged system."""
    A = system.A_global if isinstance(system, TdSystem) else np.asarray(system)
    lam = 2.0 * float(np.linalg.eigvalsh(-(A + A.T) / 2.0).min())
    if lam <= 0:
        raise ValueError(f"non-positive contraction constant {lam:.3e}: rank-deficient "
                         "features or non-ergodic chains")
    return lam


def estimate_xi_critic(envs: Sequence[TabularMdp], features: FeatureMap,
                       theta_probe: Sequence[np.ndarray], x) -> float:
    """max over probe policies and agents of E_ν[(V(s) - φ(s)ᵀω_i*)²]."""
    worst = 0.0
    for theta in theta_probe:
        pi = policy_table(theta, x)
        system = td_system(envs, features, pi)
        for i, env in enumerate(envs):
            V = exact_value(induce_state_chain(env, pi), env.discount)
            omega_i = exact_td_fixed_point(system, i)
            nu = discounted_visitation(env, pi)
            worst = max(worst, float(nu @ (V - features.phi @ omega_i) ** 2))
    return worst


@dataclass
class DiagnosticConstants:
    lambda_: float
    chi_sq: float
    kappa_sq: float
    eta: float
    rho: float
    tau: int
    c: float
    q: float
    xi_critic: float

    def to_dict(self) -> dict:
        out = asdict(self)
        out["lambda"] = out.pop("lambda_")
        return out


def diagnostics(envs: Sequence[TabularMdp], features: FeatureMap, theta, x, radius_H: float,
                n_probe: int = 64, probe_seed: int = 0, mixing_tol: float = 1e-6):
    """All diagnostic constants at policy ``theta``; returns (constants, probe description)."""
    pi = policy_table(theta, x)
    system = td_system(envs, features, pi)
    omega_star = exact_td_fixed_point(system)
    # the critic travels from 0 towards ω*, so probe the ball around ω* reaching the origin
    probe_radius = min(radius_H, float(np.linalg.norm(omega_star)))
    probe = [project_ball(p, radius_H)
             for p in probe_ball(omega_star, probe_radius, n_probe, probe_seed)]
    chi_sq, kappa_sq = estimate_heterogeneity(system, probe)
    mixing = [estimate_mixing(ch, mixing_tol) for ch in system.chains]
    gamma = envs[0].discount
    r_max = max(env.reward_bound for env in envs)
    c = 1.0 + gamma
    consts = DiagnosticConstants(
        lambda_=estimate_lambda(system), chi_sq=chi_sq, kappa_sq=kappa_sq,
        eta=max(m[1] for m in mixing), rho=max(m[2] for m in mixing),
        tau=max(m[0] for m in mixing), c=c, q=c * radius_H + r_max,
        xi_critic=estimate_xi_critic(envs, features, [theta], x))
    probe_info = {"kind": "ball", "center": "global TD fixed point", "radius": probe_radius,
                  "heterogeneity_fit": "lexicographic (chi_sq first)",
                  "points": n_probe + 1, "seed": probe_seed, "weights": "uniform",
                  "mixing_tol": mixing_tol}
    return consts, probe_info

"""Linear-softmax actor and federated policy-gradient aggregation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .features import FeatureMap, check_policy_features
from .sampling import Observation


@dataclass
class PolicyParams:
    """Softmax policy π(a|s) ∝ exp(θᵀx(s, a)) over state-action features ``x``."""

    theta: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        self.x = check_policy_features(self.x)
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.shape != (self.x.shape[2],):
            raise ValueError(f"theta has shape {self.theta.shape}, features need ({self.x.shape[2]},)")
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("theta must be finite")

    def table(self) -> np.ndarray:
        return policy_table(self.theta, self.x)


@dataclass
class FedAConfig:
    alpha: float
    minibatch_M: int

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.minibatch_M < 1:
            raise ValueError("minibatch_M must be >= 1")


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def policy_probs(theta, s: int, x) -> np.ndarray:
    return _softmax(np.asarray(x)[s] @ theta)


def policy_table(theta, x) -> np.ndarray:
    """π(a|s) for every state, shape (S, A)."""
    return _softmax(np.asarray(x) @ theta)


def score(theta, s: int, a: int, x) -> np.ndarray:
    """∇_θ log π(a|s) = x(s, a) - Σ_b π(b|s) x(s, b)."""
    xs = np.asarray(x)[s]
    return xs[a] - policy_probs(theta, s, x) @ xs


def score_table(theta, x) -> np.ndarray:
    """Scores for every (s, a), shape (S, A, d)."""
    x = np.asarray(x)
    pi = policy_table(theta, x)
    return x - np.einsum("sa,sad->sd", pi, x)[:, None, :]


def td_error(omega, obs: Observation, features: FeatureMap, gamma: float) -> float:
    """δ = r + γ φ(s')ᵀω - φ(s)ᵀω, with s' the environment's next state."""
    phi = features.phi
    return obs.r + gamma * float(phi[obs.env_next] @ omega) - float(phi[obs.s] @ omega)


def local_policy_gradient(theta, omega, batch: Sequence[Observation], features: FeatureMap,
                          gamma: float, x) -> np.ndarray:
    """Mini-batch estimate (1/M) Σ δ_ω(s, a, s') ψ_θ(s, a)."""
    if not batch:
        raise ValueError("empty batch")
    s = np.fromiter((o.s for o in batch), dtype=np.intp, count=len(batch))
    a = np.fromiter((o.a for o in batch), dtype=np.intp, count=len(batch))
    r = np.fromiter((o.r for o in batch), dtype=np.float64, count=len(batch))
    s2 = np.fromiter((o.env_next for o in batch), dtype=np.intp, count=len(batch))
    v = features.phi @ omega
    delta = r + gamma * v[s2] - v[s]
    psi = score_table(theta, x)[s, a]
    return delta @ psi / len(batch)


def feda_aggregate(theta_k, gradients: Sequence[np.ndarray], alpha: float) -> np.ndarray:
    """θ ← θ + α mean_i ĥ_i, summing agents in ascending order."""
    total = np.zeros_like(np.asarray(theta_k, dtype=np.float64))
    for h in gradients:
        total = total + h
    return theta_k + alpha * (total / len(gradients))

"""State features for the linear critic and state-action features for the policy."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np


def _normalise_rows(M: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(M, axis=-1, keepdims=True)
    return np.where(norms > 1.0, M / np.where(norms > 0, norms, 1.0), M)


@dataclass(frozen=True)
class FeatureMap:
    """Critic features Φ (n_states x d) with ``||phi(s)||_2 <= 1`` and full column rank."""

    phi: np.ndarray

    def __post_init__(self):
        phi = np.asarray(self.phi, dtype=np.float64)
        if phi.ndim != 2:
            raise ValueError(f"phi must be 2-d, got shape {phi.shape}")
        phi = _normalise_rows(phi)
        if phi.shape[1] > phi.shape[0] or np.linalg.svd(phi, compute_uv=False).min() <= 1e-8:
            raise ValueError("feature matrix must have full column rank")
        phi.setflags(write=False)
        object.__setattr__(self, "phi", phi)

    @property
    def d(self) -> int:
        return self.phi.shape[1]

    @property
    def n_states(self) -> int:
        return self.phi.shape[0]

    @cached_property
    def is_tabular(self) -> bool:
        return self.phi.shape[0] == self.phi.shape[1] and np.array_equal(self.phi, np.eye(self.d))

    @classmethod
    def tabular(cls, n_states: int) -> "FeatureMap":
        return cls(np.eye(n_states))

    @classmethod
    def random(cls, n_states: int, d: int, seed: int = 0) -> "FeatureMap":
        """Gaussian features scaled to unit row norm."""
        rng = np.random.default_rng(seed)
        M = rng.standard_normal((n_states, d))
        return cls(M / np.linalg.norm(M, axis=1, keepdims=True))

    def restrict(self, d: int) -> "FeatureMap":
        """Keep the first ``d`` columns (nested spans)."""
        return FeatureMap(self.phi[:, :d])


def one_hot_policy_features(n_states: int, n_actions: int) -> np.ndarray:
    """x(s, a) = e_{s*A + a}; shape (S, A, S*A)."""
    return np.eye(n_states * n_actions).reshape(n_states, n_actions, n_states * n_actions)


def check_policy_features(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"policy features must have shape (S, A, d), got {x.shape}")
    if np.max(np.linalg.norm(x, axis=2)) > 1.0 + 1e-12:
        raise ValueError("policy features must satisfy ||x(s, a)||_2 <= 1")
    return x

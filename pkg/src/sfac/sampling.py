"""Seeded Markovian samplers for the critic and actor chains.

Every (agent_id, chain_kind) pair owns an independent ``numpy`` generator
spawned from the master seed::

    SeedSequence(master_seed, spawn_key=(agent_id, KIND_CODES[chain_kind]))

so the observation stream of one chain never depends on how often any other
chain was stepped. Uniforms are drawn in fixed-size blocks; the stream is a
pure function of the seed and the call sequence.
"""
from __future__ import annotations

from bisect import bisect_right
from typing import NamedTuple

import numpy as np

from .mdp import StateChain, TabularMdp, check_ergodic, stationary_distribution

KIND_CODES = {"critic": 0, "actor": 1, "select": 2}
SELECT_AGENT = 2**31 - 1
_BLOCK = 2048


def stream_rng(master_seed: int, agent_id: int, kind: str) -> np.random.Generator:
    seq = np.random.SeedSequence(int(master_seed), spawn_key=(int(agent_id), KIND_CODES[kind]))
    return np.random.default_rng(seq)


class Observation(NamedTuple):
    """One transition.

    ``s_next`` is where the chain continues; ``env_next`` is the state the
    environment actually moved to (they differ only on actor-chain restarts).
    """

    s: int
    a: int
    r: float
    s_next: int
    env_next: int
    restarted: bool = False


class ChainCursor:
    """Position and private random stream of one agent's chain."""

    __slots__ = ("agent_id", "chain_kind", "current_state", "rng", "steps", "_buf", "_pos")

    def __init__(self, agent_id: int, chain_kind: str, current_state: int,
                 rng: np.random.Generator):
        if chain_kind not in ("critic", "actor"):
            raise ValueError(f"chain_kind must be 'critic' or 'actor', got {chain_kind!r}")
        self.agent_id = agent_id
        self.chain_kind = chain_kind
        self.current_state = int(current_state)
        self.rng = rng
        self.steps = 0
        self._buf: list[float] = []
        self._pos = 0

    @classmethod
    def start(cls, master_seed: int, agent_id: int, chain_kind: str,
              env: TabularMdp) -> "ChainCursor":
        """Create a cursor whose first state is drawn from the env's initial distribution."""
        cur = cls(agent_id, chain_kind, 0, stream_rng(master_seed, agent_id, chain_kind))
        cur.current_state = _draw(_cumulative(env.initial_dist), cur.uniform())
        return cur

    def uniform(self) -> float:
        if self._pos >= len(self._buf):
            self._buf = self.rng.random(_BLOCK).tolist()
            self._pos = 0
        u = self._buf[self._pos]
        self._pos += 1
        return u

    def __repr__(self):
        return (f"ChainCursor(agent_id={self.agent_id}, kind={self.chain_kind!r}, "
                f"state={self.current_state}, steps={self.steps})")


def _cumulative(p) -> list[float]:
    p = np.asarray(p, dtype=np.float64)
    cum = np.cumsum(p)
    last = int(np.flatnonzero(p > 0)[-1])
    cum[last:] = 1.0
    return cum.tolist()


def _draw(cum: list[float], u: float) -> int:
    return bisect_right(cum, u)


class SamplingTables:
    """Cumulative lookup tables for one (env, policy) pair."""

    __slots__ = ("policy_cum", "trans_cum", "reward", "init_cum", "discount", "n_states")

    def __init__(self, env: TabularMdp, policy):
        pi = np.asarray(policy, dtype=np.float64)
        if pi.shape != (env.n_states, env.n_actions):
            raise ValueError(f"policy shape {pi.shape} does not match env")
        self.policy_cum = [_cumulative(row) for row in pi]
        self.trans_cum = [[_cumulative(env.transition[s, a]) for a in range(env.n_actions)]
                          for s in range(env.n_states)]
        self.reward = env.reward.tolist()
        self.init_cum = _cumulative(env.initial_dist)
        self.discount = float(env.discount)
        self.n_states = env.n_states


def sampling_tables(env: TabularMdp, policy) -> SamplingTables:
    if isinstance(policy, SamplingTables):
        return policy
    return SamplingTables(env, policy)


def step_critic_chain(cursor: ChainCursor, env: TabularMdp, policy) -> Observation:
    """a ~ π(.|s), s' ~ P(.|s, a); the cursor moves to s'."""
    if cursor.chain_kind != "critic":
        raise ValueError("step_critic_chain needs a critic cursor")
    tb = sampling_tables(env, policy)
    s = cursor.current_state
    a = _draw(tb.policy_cum[s], cursor.uniform())
    s2 = _draw(tb.trans_cum[s][a], cursor.uniform())
    cursor.current_state = s2
    cursor.steps += 1
    return Observation(s, a, tb.reward[s][a][s2], s2, s2, False)


def step_actor_chain(cursor: ChainCursor, env: TabularMdp, policy) -> Observation:
    """One step of the restart chain γP + (1-γ)b.

    The environment transition is always realised (its reward is recorded);
    with probability 1-γ the chain then restarts from a fresh initial-state draw.
    """
    if cursor.chain_kind != "actor":
        raise ValueError("step_actor_chain needs an actor cursor")
    tb = sampling_tables(env, policy)
    s = cursor.current_state
    a = _draw(tb.policy_cum[s], cursor.uniform())
    s2 = _draw(tb.trans_cum[s][a], cursor.uniform())
    r = tb.reward[s][a][s2]
    if cursor.uniform() < tb.discount:
        nxt, restarted = s2, False
    else:
        nxt, restarted = _draw(tb.init_cum, cursor.uniform()), True
    cursor.current_state = nxt
    cursor.steps += 1
    return Observation(s, a, r, nxt, s2, restarted)


def sample_minibatch(cursor: ChainCursor, env: TabularMdp, policy, M: int) -> list[Observation]:
    if M < 1:
        raise ValueError(f"minibatch size must be >= 1, got {M}")
    tb = sampling_tables(env, policy)
    return [step_actor_chain(cursor, env, tb) for _ in range(M)]


def tv_decay_curve(P: np.ndarray, floor: float = 1e-13, max_steps: int = 100_000) -> np.ndarray:
    """Worst-start total-variation distance to stationarity, t = 0, 1, ..."""
    P = np.asarray(P, dtype=np.float64)
    D = stationary_distribution(StateChain(P, np.zeros(P.shape[0])))
    Q = np.eye(P.shape[0])
    curve = []
    for _ in range(max_steps + 1):
        tv = 0.5 * np.max(np.abs(Q - D).sum(axis=1))
        curve.append(tv)
        if tv <= floor:
            break
        Q = Q @ P
    return np.array(curve)


def estimate_mixing(chain: StateChain, tol: float = 1e-6) -> tuple[int, float, float]:
    """Mixing time and geometric-decay fit ``TV(t) <= eta * rho**t``.

    ``tau`` is the first t with worst-start TV distance <= tol. ``rho`` comes
    from a log-linear regression on the decay curve; ``eta`` is then the
    smallest constant making the bound hold on every computed point.
    """
    P = chain.transition_matrix
    check_ergodic(P)
    curve = tv_decay_curve(P, floor=min(tol, 1e-12))
    hits = np.flatnonzero(curve <= tol)
    if hits.size == 0:
        raise RuntimeError("TV curve did not reach tolerance within the step budget")
    tau = int(hits[0])

    t = np.arange(curve.size)
    ok = (t >= 1) & (curve > 1e-14)
    if ok.sum() >= 2:
        slope, _ = np.polyfit(t[ok], np.log(curve[ok]), 1)
        rho = float(np.exp(slope))
    elif ok.sum() == 1:
        rho = float(curve[ok][0] / max(curve[0], 1e-300))
    else:
        rho = float(np.finfo(float).eps)
    rho = min(max(rho, np.finfo(float).eps), 1.0 - 1e-12)
    pos = curve > 0
    eta = float(np.exp(np.max(np.log(curve[pos]) - t[pos] * np.log(rho))))
    return tau, eta, rho

"""Experiment harness: per-seed runs, agent/heterogeneity sweeps and comparators.

Every output is a deterministic function of (spec, master seed). Seeds fan out
over a process pool sized by ``SFAC_WORKERS`` (default 1); results are gathered
in seed order so file contents never depend on scheduling.
"""
from __future__ import annotations

import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .actor import feda_aggregate, local_policy_gradient, policy_table
from .config import ExperimentSpec
from .critic import fedc_aggregate, local_critic_loop
from .driver import (RoundRecord, RunHistory, SfacConfig, _check_finite, run_sfac,
                     select_output, step_schedule)
from .features import FeatureMap, one_hot_policy_features
from .io import save_family, write_csv
from .mdp import TabularMdp, generate_family
from .oracles import (diagnostics, exact_avg_J, exact_avg_policy_gradient,
                      exact_td_fixed_point, td_system)
from .sampling import SELECT_AGENT, ChainCursor, sample_minibatch, sampling_tables, stream_rng

WORKERS_ENV = "SFAC_WORKERS"

TRACE_COLUMNS = ["k", "alpha_k", "beta_k", "J_avg_exact", "grad_norm_sq_exact",
                 "critic_err_sq", "selected_flag"]
FEDC_COLUMNS = ["outer_k", "inner_t", "critic_err_sq", "mean_grad_norm"]
FEDA_COLUMNS = ["k", "agent_id", "grad_norm"]
SUMMARY_COLUMNS = ["n_agents", "heterogeneity", "n_seeds", "median_final_J",
                   "median_final_grad_norm_sq", "median_final_critic_err_sq",
                   "median_asymptotic_critic_err_sq", "median_grad_norm_floor",
                   "median_kappa_sq", "interactions"]
CURVE_COLUMNS = ["n_agents", "heterogeneity", "k", "median_J", "q25_J", "q75_J",
                 "median_critic_err_sq", "q25_critic_err_sq", "q75_critic_err_sq"]
TIMING_COLUMNS = ["n_agents", "heterogeneity", "seed", "mean_round_wall_time"]

# share of the final rounds averaged into "asymptotic" and "floor" summaries
TAIL_FRACTION = 0.25


def run_seeds(master_seed: int, n_seeds: int) -> list[int]:
    return [master_seed + j for j in range(n_seeds)]


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    return max(1, n)


def build_problem(spec: ExperimentSpec, seed: int, n_agents: int | None = None,
                  heterogeneity: float | None = None):
    """Family, critic features and policy features for one run seed."""
    fam = spec.family
    n = fam.n_agents if n_agents is None else n_agents
    h = fam.heterogeneity if heterogeneity is None else heterogeneity
    family_seed = seed if fam.base_seed is None else fam.base_seed
    envs = generate_family(family_seed, n, fam.n_states, fam.n_actions, h,
                           discount=fam.discount, reward_scale=fam.reward_scale)
    if fam.feature_rank is None:
        features = FeatureMap.tabular(fam.n_states)
    else:
        features = FeatureMap.random(fam.n_states, fam.feature_rank, fam.feature_seed)
    x = one_hot_policy_features(fam.n_states, fam.n_actions)
    return envs, features, x, family_seed


def run_a3c_baseline(envs: Sequence[TabularMdp], features: FeatureMap, config: SfacConfig,
                     policy_features=None, theta0=None):
    """Local critics, one TD step per round, immediate averaging of actor gradients.

    Critics never leave their agent. Each round agent i takes one projected
    TD step on its own ω_i, then a policy-gradient estimate with that ω_i;
    the server averages the gradients at once. The critic error recorded is
    the agent mean of ||ω_i - ω*||² against the global fixed point.
    """
    n = len(envs)
    S, A = envs[0].n_states, envs[0].n_actions
    x = one_hot_policy_features(S, A) if policy_features is None else policy_features
    theta = np.zeros(x.shape[2]) if theta0 is None else np.array(theta0, dtype=np.float64)
    omegas = [np.zeros(features.d) for _ in range(n)]
    gamma = envs[0].discount
    H = config.fedc.radius_H
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

        local_grads = []
        for i, env in enumerate(envs):
            d, _ = local_critic_loop(env, sampling_tables(env, pi), omegas[i], beta_k, 1,
                                     critic_cursors[i], features)
            omegas[i] = fedc_aggregate(omegas[i], [d], beta_k, [1], H)
            local_grads.append(d)
        err_mean = None
        if target is not None:
            err_mean = sum(float(np.sum((w - target) ** 2)) for w in omegas) / n
        history.fedc_trace.append((k, 0, err_mean, float(np.linalg.norm(sum(local_grads) / n))))

        grads = []
        for i, env in enumerate(envs):
            batch = sample_minibatch(actor_cursors[i], env, sampling_tables(env, pi), M)
            h_i = local_policy_gradient(theta, omegas[i], batch, features, gamma, x)
            history.feda_trace.append((k, i, float(np.linalg.norm(h_i))))
            grads.append(h_i)
        theta = feda_aggregate(theta, grads, alpha_k)
        history.feda_trace.append((k, "mean", float(np.linalg.norm(sum(grads) / n))))
        _check_finite(k, theta=theta, **{f"omega_{i}": w for i, w in enumerate(omegas)})

        J = grad_sq = None
        if use_oracle:
            J = exact_avg_J(theta, envs, x)
            grad_sq = float(np.sum(exact_avg_policy_gradient(theta, envs, x) ** 2))
        history.thetas.append(theta.copy())
        history.records.append(RoundRecord(k, alpha_k, beta_k, J, grad_sq, err_mean,
                                           time.perf_counter() - t0))

    history.final_omega = sum(omegas) / n
    history.interactions = sum(c.steps for c in critic_cursors) + sum(c.steps for c in actor_cursors)
    select_output(history, stream_rng(config.master_seed, SELECT_AGENT, "select"))
    return history, history.thetas[history.selected_k - 1]


def _agent_seed(master_seed: int, agent_id: int) -> int:
    return int(np.random.SeedSequence(master_seed, spawn_key=(agent_id, 7)).generate_state(1)[0])


def run_independent_ac(envs: Sequence[TabularMdp], features: FeatureMap, config: SfacConfig,
                       policy_features=None):
    """Each agent runs single-agent SFAC on its own environment; no communication.

    The combined record holds agent means: mean_i J_i(θ_i), mean_i ||∇J_i(θ_i)||²
    and mean_i ||ω_i - ω_i*||².
    """
    n = len(envs)
    runs = []
    for i, env in enumerate(envs):
        sub = replace(config, master_seed=_agent_seed(config.master_seed, i),
                      fedc=replace(config.fedc, local_updates=[config.fedc.local_updates[i]]))
        runs.append(run_sfac([env], features, sub, policy_features=policy_features)[0])
    history = RunHistory(theta0=runs[0].theta0)
    if config.oracle_stride:
        history.J0 = sum(r.J0 for r in runs) / n
    for k in range(config.outer_K):
        recs = [r.records[k] for r in runs]
        def mean(field):
            vals = [getattr(rec, field) for rec in recs]
            return None if vals[0] is None else sum(vals) / n
        history.records.append(RoundRecord(k + 1, recs[0].alpha_k, recs[0].beta_k,
                                           mean("J_avg_exact"), mean("grad_norm_sq_exact"),
                                           mean("critic_err_sq"),
                                           sum(rec.wall_time for rec in recs)))
        # the "policy" of an independent run is the stack of per-agent parameters
        history.thetas.append(np.stack([r.thetas[k] for r in runs]))
    for i, r in enumerate(runs):
        history.fedc_trace.extend(r.fedc_trace)
        history.feda_trace.extend((k, i, g) for k, a, g in r.feda_trace if a != "mean")
    history.interactions = sum(r.interactions for r in runs)
    history.final_omega = np.stack([r.final_omega for r in runs])
    select_output(history, stream_rng(config.master_seed, SELECT_AGENT, "select"))
    return history, history.thetas[history.selected_k - 1]


def run_algorithm(algorithm: str, envs, features, config: SfacConfig, x):
    if algorithm == "sfac":
        return run_sfac(envs, features, config, policy_features=x)
    if algorithm == "a3c_baseline":
        return run_a3c_baseline(envs, features, config, policy_features=x)
    if algorithm == "independent_ac":
        return run_independent_ac(envs, features, config, policy_features=x)
    raise ValueError(f"unknown algorithm {algorithm!r}")


def expected_budget(algorithm: str, config: SfacConfig, n_agents: int) -> int:
    """Total environment interactions the algorithm must consume."""
    K, M = config.outer_K, config.feda.minibatch_M
    if algorithm == "a3c_baseline":
        return K * n_agents * (1 + M)
    return K * (config.inner_T * sum(config.fedc.local_updates) + n_agents * M)


@dataclass
class SeedResult:
    seed: int
    n_agents: int
    heterogeneity: float
    history: RunHistory
    diagnostics: dict


def _seed_job(args) -> SeedResult:
    spec, seed, n_agents, h, out_dir = args
    h = spec.family.heterogeneity if h is None else h
    envs, features, x, family_seed = build_problem(spec, seed, n_agents, h)
    config = spec.sfac_config(seed, len(envs))
    history, _ = run_algorithm(spec.algorithm, envs, features, config, x)
    if history.interactions != expected_budget(spec.algorithm, config, len(envs)):
        raise RuntimeError(f"seed {seed}: interaction counter {history.interactions} disagrees "
                           f"with the budget {expected_budget(spec.algorithm, config, len(envs))}")
    theta_end = history.thetas[-1] if history.thetas[-1].ndim == 1 else None
    diag = {"config": {"seed": seed, "family_seed": family_seed, "algorithm": spec.algorithm,
                       "n_agents": len(envs), "heterogeneity": h,
                       "radius_H": config.fedc.radius_H},
            "interactions": history.interactions}
    consts, probe = diagnostics(envs, features, history.theta0, x, config.fedc.radius_H)
    diag["initial"] = consts.to_dict()
    if theta_end is not None:
        diag["final"] = diagnostics(envs, features, theta_end, x, config.fedc.radius_H)[0].to_dict()
    diag["probe"] = probe
    if out_dir is not None:
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        write_csv(d / "sfac_trace.csv", TRACE_COLUMNS, history.trace_rows())
        write_csv(d / "fedc_trace.csv", FEDC_COLUMNS, history.fedc_trace)
        write_csv(d / "feda_trace.csv", FEDA_COLUMNS, history.feda_trace)
        (d / "diagnostics.json").write_text(json.dumps(diag, indent=2, sort_keys=True) + "\n")
        save_family(d / "family.sfam", envs, family_seed, h)
    return SeedResult(seed, len(envs), h, history, diag)


def fan_out(jobs: list) -> list[SeedResult]:
    workers = min(worker_count(), len(jobs))
    if workers <= 1:
        return [_seed_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_seed_job, jobs))


def _tail_mean(values: list) -> float | None:
    vals = [v for v in values if v is not None]
    if not vals:
        return None
    n = max(1, int(round(len(vals) * TAIL_FRACTION)))
    return float(np.mean(vals[-n:]))


def _median(values: list) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.median(vals)) if vals else None


def summarize(results: Sequence[SeedResult]) -> dict:
    """One summary row over seeds; every statistic is a median across seeds."""
    hists = [r.history for r in results]
    return {
        "n_agents": results[0].n_agents,
        "heterogeneity": float(results[0].heterogeneity),
        "n_seeds": len(results),
        "median_final_J": _median([h.records[-1].J_avg_exact for h in hists]),
        "median_final_grad_norm_sq": _median([h.records[-1].grad_norm_sq_exact for h in hists]),
        "median_final_critic_err_sq": _median([h.records[-1].critic_err_sq for h in hists]),
        "median_asymptotic_critic_err_sq": _median(
            [_tail_mean([r.critic_err_sq for r in h.records]) for h in hists]),
        "median_grad_norm_floor": _median(
            [_tail_mean([r.grad_norm_sq_exact for r in h.records]) for h in hists]),
        "median_kappa_sq": _median([r.diagnostics["initial"]["kappa_sq"] for r in results]),
        "interactions": hists[0].interactions,
    }


def curves(results: Sequence[SeedResult]) -> list[dict]:
    """Per-round median and quartiles of exact J and critic error across seeds."""
    rows = []
    K = len(results[0].history.records)
    for k in range(K):
        J = [r.history.records[k].J_avg_exact for r in results]
        E = [r.history.records[k].critic_err_sq for r in results]
        row = {"n_agents": results[0].n_agents, "heterogeneity": float(results[0].heterogeneity),
               "k": k + 1}
        for name, vals in (("J", J), ("critic_err_sq", E)):
            vals = [v for v in vals if v is not None]
            if vals:
                q25, med, q75 = np.percentile(vals, [25, 50, 75])
                row.update({f"median_{name}": med, f"q25_{name}": q25, f"q75_{name}": q75})
        rows.append(row)
    return rows


def _timing_rows(results: Sequence[SeedResult]) -> list[dict]:
    return [{"n_agents": r.n_agents, "heterogeneity": float(r.heterogeneity), "seed": r.seed,
             "mean_round_wall_time": float(np.mean([rec.wall_time for rec in r.history.records]))}
            for r in results]


def _output_root(spec: ExperimentSpec, out) -> Path:
    root = out if out is not None else spec.output_dir
    if root is None:
        raise ValueError("no output directory: pass --out or set output_dir in the config")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    return root


def cmd_run(spec: ExperimentSpec, seed: int, out=None) -> int:
    root = _output_root(spec, out)
    seeds = run_seeds(seed, spec.n_seeds)
    results = fan_out([(spec, s, None, None, root / f"seed_{s}") for s in seeds])
    write_csv(root / "summary.csv", SUMMARY_COLUMNS, [summarize(results)])
    write_csv(root / "curves.csv", CURVE_COLUMNS, curves(results))
    write_csv(root / "timing.csv", TIMING_COLUMNS, _timing_rows(results))
    return 0


def cmd_baseline(spec: ExperimentSpec, seed: int, out=None) -> int:
    return cmd_run(spec.model_copy(update={"algorithm": "a3c_baseline"}), seed, out)


def cmd_sweep_agents(spec: ExperimentSpec, seed: int, out=None,
                     n_list: Sequence[int] | None = None) -> int:
    """Regenerate the family per N from the same base seed (agent i is shared across N)."""
    root = _output_root(spec, out)
    n_list = list(spec.sweep.agents if n_list is None else n_list)
    if isinstance(spec.sfac.local_updates, list):
        raise ValueError("sweep-agents needs a scalar sfac.local_updates")
    seeds = run_seeds(seed, spec.n_seeds)
    summary, curve_rows, timing = [], [], []
    for n in n_list:
        jobs = [(spec, s, n, None, root / f"N_{n}" / f"seed_{s}") for s in seeds]
        results = fan_out(jobs)
        summary.append(summarize(results))
        curve_rows.extend(curves(results))
        timing.extend(_timing_rows(results))
    write_csv(root / "summary.csv", SUMMARY_COLUMNS, summary)
    write_csv(root / "curves.csv", CURVE_COLUMNS, curve_rows)
    write_csv(root / "timing.csv", TIMING_COLUMNS, timing)
    return 0


def cmd_sweep_heterogeneity(spec: ExperimentSpec, seed: int, out=None,
                            h_list: Sequence[float] | None = None) -> int:
    """Same base environment for every h; only the agent perturbation weight changes."""
    root = _output_root(spec, out)
    h_list = list(spec.sweep.heterogeneity if h_list is None else h_list)
    seeds = run_seeds(seed, spec.n_seeds)
    summary, curve_rows, timing = [], [], []
    for j, h in enumerate(h_list):
        jobs = [(spec, s, None, h, root / f"h_{j}_{h:g}" / f"seed_{s}") for s in seeds]
        results = fan_out(jobs)
        summary.append(summarize(results))
        curve_rows.extend(curves(results))
        timing.extend(_timing_rows(results))
    write_csv(root / "summary.csv", SUMMARY_COLUMNS, summary)
    write_csv(root / "curves.csv", CURVE_COLUMNS, curve_rows)
    write_csv(root / "timing.csv", TIMING_COLUMNS, timing)
    return 0

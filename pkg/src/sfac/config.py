"""Strict experiment configuration (YAML or JSON).

Unknown keys are rejected at every level so a typo cannot silently fall back
to a default.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .actor import FedAConfig
from .critic import FedCConfig
from .driver import SfacConfig, StepSchedule


class ConfigError(ValueError):
    """Raised with one line per offending field."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class FamilySpec(_Strict):
    n_agents: int = Field(4, ge=1)
    n_states: int = Field(5, ge=1)
    n_actions: int = Field(2, ge=1)
    discount: float = Field(0.99, gt=0.0, lt=1.0)
    heterogeneity: float = Field(0.1, ge=0.0, le=1.0)
    reward_scale: float = Field(1.0, gt=0.0)
    # None keeps tabular features; an int draws random unit-norm features of that rank
    feature_rank: Optional[int] = Field(None, ge=1)
    feature_seed: int = 0
    # None regenerates the family from each run seed; an int pins one family for all seeds
    base_seed: Optional[int] = Field(None, ge=0)

    @model_validator(mode="after")
    def _rank_fits(self):
        if self.feature_rank is not None and self.feature_rank > self.n_states:
            raise ValueError("feature_rank cannot exceed n_states")
        return self


class ScheduleSpec(_Strict):
    mode: Literal["constant", "geometric"] = "constant"
    a: float = Field(1.0, gt=0.0)
    b: float = Field(1.0, gt=0.0)
    alpha0: float = Field(1e-4, gt=0.0)
    beta0: float = Field(1e-4, gt=0.0)
    decay: float = Field(0.99, gt=0.0, le=1.0)
    growing: bool = False


class AlgoSpec(_Strict):
    outer_K: int = Field(200, ge=1)
    inner_T: int = Field(10, ge=1)
    local_updates: Union[int, list[int]] = 5
    minibatch_M: int = Field(20, ge=1)
    radius_H: Optional[float] = Field(None, gt=0.0)
    schedule: ScheduleSpec = Field(default_factory=ScheduleSpec)
    oracle_stride: int = Field(1, ge=0)

    @field_validator("local_updates")
    @classmethod
    def _positive(cls, v):
        vals = [v] if isinstance(v, int) else v
        if not vals or min(vals) < 1:
            raise ValueError("local update counts must be >= 1")
        return v

    def upsilons(self, n_agents: int) -> list[int]:
        if isinstance(self.local_updates, int):
            return [self.local_updates] * n_agents
        if len(self.local_updates) != n_agents:
            raise ConfigError(f"sfac.local_updates: expected {n_agents} entries, "
                              f"got {len(self.local_updates)}")
        return list(self.local_updates)


class SweepSpec(_Strict):
    agents: list[int] = Field(default_factory=lambda: [1, 2, 4, 8])
    heterogeneity: list[float] = Field(default_factory=lambda: [0.0, 0.3, 0.6])

    @field_validator("agents")
    @classmethod
    def _agents_ok(cls, v):
        if not v or min(v) < 1:
            raise ValueError("agent counts must be a nonempty list of integers >= 1")
        return v

    @field_validator("heterogeneity")
    @classmethod
    def _h_ok(cls, v):
        if not v or min(v) < 0.0 or max(v) > 1.0:
            raise ValueError("heterogeneity levels must be a nonempty list within [0, 1]")
        return v


class ExperimentSpec(_Strict):
    name: str = "experiment"
    algorithm: Literal["sfac", "a3c_baseline", "independent_ac"] = "sfac"
    n_seeds: int = Field(1, ge=1)
    output_dir: Optional[str] = None
    family: FamilySpec = Field(default_factory=FamilySpec)
    sfac: AlgoSpec = Field(default_factory=AlgoSpec)
    sweep: SweepSpec = Field(default_factory=SweepSpec)

    def radius(self) -> float:
        """Explicit radius_H, or a default ball that contains every TD fixed point seen in practice."""
        if self.sfac.radius_H is not None:
            return self.sfac.radius_H
        fam = self.family
        # tabular fixed points satisfy ||V|| <= sqrt(S) R / (1 - γ); keep a 10x margin
        return 10.0 * fam.reward_scale * fam.n_states ** 0.5 / (1.0 - fam.discount)

    def sfac_config(self, master_seed: int, n_agents: int | None = None) -> SfacConfig:
        n = self.family.n_agents if n_agents is None else n_agents
        algo = self.sfac
        sch = algo.schedule
        return SfacConfig(
            outer_K=algo.outer_K, inner_T=algo.inner_T,
            # step sizes are placeholders; run_sfac takes them from the schedule each round
            fedc=FedCConfig(beta=1.0, local_updates=algo.upsilons(n), rounds_T=algo.inner_T,
                            radius_H=self.radius()),
            feda=FedAConfig(alpha=1.0, minibatch_M=algo.minibatch_M),
            schedule=StepSchedule(mode=sch.mode, a=sch.a, b=sch.b, alpha0=sch.alpha0,
                                  beta0=sch.beta0, decay=sch.decay,
                                  growing=sch.growing),
            master_seed=master_seed, oracle_stride=algo.oracle_stride)


def _format_errors(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{loc}: {e['msg']}")
    return "\n".join(lines)


def parse_spec(data: dict) -> ExperimentSpec:
    if not isinstance(data, dict):
        raise ConfigError("<root>: config must be a mapping")
    try:
        return ExperimentSpec.model_validate(data)
    except ValidationError as err:
        raise ConfigError(_format_errors(err)) from None


def load_spec(path) -> ExperimentSpec:
    path = Path(path)
    text = path.read_text()
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as err:
        raise ConfigError(f"{path}: cannot parse: {err}") from None
    return parse_spec(data if data is not None else {})

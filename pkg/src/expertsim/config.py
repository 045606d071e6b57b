"""Run configuration: one strict JSON file, overridden field by field from flags.

Layout::

    {
      "profile":    {HardwareProfile fields},
      "governor":   {"k_min", "k_max", "k_slo", "ttft_budget"},
      "sim":        {"policy", "cache_capacity", "capacity_mode", "entropy_weighting",
                     "k_policy", "phase_boundaries", "prefetch_budget", "rollback_time"},
      "acceptance": {"p", "ema_alpha"},
      "generator":  {"shape", "tokens", "fidelity", "accept_rate", "skew", "seed"}
    }

Every section and field is optional. Unknown keys are errors.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .perfmodel import AcceptanceModel, GovernorConfig, HardwareProfile, ProfileError
from .scheduler import DEFAULT_PHASES, PER_LAYER, Policy
from .sim import ConfigError, SimConfig
from .trace import PRESET_SHAPES, FidelityStats, ModelShape

ENV_VAR = "MOESPEQ_CONFIG"


@dataclass(frozen=True)
class SimSettings:
    policy: str = Policy.SPECULATIVE.value
    cache_capacity: int | None = 16
    capacity_mode: str = PER_LAYER
    entropy_weighting: bool = False
    k_policy: int | str = 4
    phase_boundaries: tuple[float, float] = DEFAULT_PHASES
    prefetch_budget: float = 32.0
    rollback_time: float = 0.0


@dataclass(frozen=True)
class AcceptanceSettings:
    # a scalar seeds every draft position; a list gives p_1..p_m (roofline only,
    # the simulator seeds its estimate with the first entry)
    p: float | tuple[float, ...] = 0.8
    ema_alpha: float = 0.1

    def initial(self) -> float:
        return self.p[0] if isinstance(self.p, tuple) else self.p

    def model(self, k_max: int) -> AcceptanceModel:
        if isinstance(self.p, tuple):
            if len(self.p) < k_max:
                raise ConfigError(f"acceptance.p lists {len(self.p)} probabilities, need {k_max}")
            return AcceptanceModel(self.p[:k_max], self.ema_alpha)
        return AcceptanceModel.constant(self.p, k_max, self.ema_alpha)


@dataclass(frozen=True)
class GeneratorSettings:
    shape: str = "deepseek-v2-lite"
    tokens: int = 1000
    fidelity: tuple[float, float, float] = (0.441, 0.468, 0.091)
    accept_rate: float = 0.8
    skew: float = 0.0
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    profile: HardwareProfile = field(default_factory=HardwareProfile)
    governor: GovernorConfig = field(default_factory=GovernorConfig)
    sim: SimSettings = field(default_factory=SimSettings)
    acceptance: AcceptanceSettings = field(default_factory=AcceptanceSettings)
    generator: GeneratorSettings = field(default_factory=GeneratorSettings)

    def sim_config(self, record_plans: bool = False) -> SimConfig:
        s = self.sim
        return SimConfig(
            policy=Policy.parse(s.policy),
            cache_capacity=s.cache_capacity,
            capacity_mode=s.capacity_mode,
            entropy_weighting=s.entropy_weighting,
            k_policy=s.k_policy,
            profile=self.profile,
            governor=self.governor,
            phase_boundaries=s.phase_boundaries,
            prefetch_budget=s.prefetch_budget,
            rollback_time=s.rollback_time,
            initial_acceptance=self.acceptance.initial(),
            ema_alpha=self.acceptance.ema_alpha,
            seed=self.generator.seed,
            record_plans=record_plans,
        )

    def fidelity(self) -> FidelityStats:
        return FidelityStats(*self.generator.fidelity)

    def shape(self) -> ModelShape:
        return parse_shape(self.generator.shape)

    def to_json(self) -> dict:
        out = {"profile": self.profile.to_json()}
        for name in ("governor", "sim", "acceptance", "generator"):
            section = getattr(self, name)
            out[name] = {f.name: _plain(getattr(section, f.name)) for f in fields(section)}
        return out


def _plain(value: Any) -> Any:
    return list(value) if isinstance(value, tuple) else value


def parse_shape(text: str) -> ModelShape:
    """Preset name or ``L,N,top_k[,shared[,expert_bytes]]``."""
    if text in PRESET_SHAPES:
        return PRESET_SHAPES[text]
    parts = text.split(",")
    if not 3 <= len(parts) <= 5:
        known = ", ".join(sorted(PRESET_SHAPES))
        raise ConfigError(f"shape {text!r} is neither a preset ({known}) nor L,N,top_k[,shared[,bytes]]")
    try:
        nums = [int(p) for p in parts]
    except ValueError:
        raise ConfigError(f"shape {text!r}: fields must be integers") from None
    try:
        return ModelShape(*nums)
    except ValueError as exc:
        raise ConfigError(f"shape {text!r}: {exc}") from None


def _section(cls, obj: Any, name: str, base):
    if not isinstance(obj, dict):
        raise ConfigError(f"{name}: expected a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(obj) - known)
    if unknown:
        raise ConfigError(f"{name}: unknown key(s) {', '.join(unknown)}")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in obj.items()}
    try:
        return replace(base, **values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


def from_json(obj: Any, base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(obj) - {f.name for f in fields(RunConfig)})
    if unknown:
        raise ConfigError(f"unknown section(s) {', '.join(unknown)}")
    out = base
    if "profile" in obj:
        merged = {**base.profile.to_json(), **obj["profile"]} if isinstance(obj["profile"], dict) else obj["profile"]
        try:
            out = replace(out, profile=HardwareProfile.from_json(merged))
        except (ProfileError, TypeError, ValueError) as exc:
            raise ConfigError(f"profile: {exc}") from None
    sections = {"governor": GovernorConfig, "sim": SimSettings, "acceptance": AcceptanceSettings,
                "generator": GeneratorSettings}
    for name, cls in sections.items():
        if name in obj:
            out = replace(out, **{name: _section(cls, obj[name], name, getattr(out, name))})
    validate(out)
    return out


def validate(cfg: RunConfig) -> None:
    """Fail early on values the runtime would reject later."""
    try:
        cfg.sim_config()
        cfg.acceptance.model(1)
        FidelityStats(*cfg.generator.fidelity)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    g = cfg.generator
    if isinstance(g.tokens, bool) or not isinstance(g.tokens, int) or g.tokens < 1:
        raise ConfigError("generator.tokens must be a positive integer")
    if not 0.0 <= g.accept_rate <= 1.0:
        raise ConfigError("generator.accept_rate must lie in [0, 1]")
    cfg.shape()


def load(path: str | Path | None = None) -> RunConfig:
    """Defaults, then ``path`` (or the file named by $MOESPEQ_CONFIG) on top."""
    if path is None:
        path = os.environ.get(ENV_VAR) or None
    if path is None:
        return RunConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return from_json(obj)

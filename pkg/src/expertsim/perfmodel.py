"""Amortization roofline model and draft-length governor.

Cycle time for a draft of length ``k`` that must pull ``n`` new experts::

    T_cycle(k) = max(T_draft(k), T_pcie_init) + T_pcie_new(n) + T_verify(k + 1)

with ``T_draft(k) = base + k * per_token``, ``T_pcie_new(n) = overhead +
n * S_expert / B`` (zero when ``n == 0``) and ``T_verify`` interpolated from
profiled samples. Throughput is ``k_accept(k) / T_cycle(k)`` where
``k_accept(k) = sum_i prod_{j<=i} p_j``.

Units are SI throughout: seconds, bytes, bytes/second (GB = 1e9 bytes).
"""

from __future__ import annotations

import bisect
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

GB = 1e9
MB = 1e6

NewExpertEstimator = Callable[[int], float]


class KOutOfRange(ValueError):
    pass


class InsufficientSamples(ValueError):
    pass


class EmptyRange(ValueError):
    pass


class InfeasibleBudget(ValueError):
    pass


class ProfileError(ValueError):
    pass


@dataclass(frozen=True)
class HardwareProfile:
    pcie_bandwidth: float = 16 * GB
    pcie_init_latency: float = 0.004
    pcie_overhead: float = 0.002
    expert_size: float = 17_301_504
    draft_base: float = 0.005
    draft_per_token: float = 0.003
    verify_samples: tuple[tuple[float, float], ...] = ((2, 0.030), (5, 0.036), (9, 0.045), (17, 0.065))
    work_per_token: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "verify_samples", tuple((float(w), float(t)) for w, t in self.verify_samples))
        for name in ("pcie_bandwidth", "pcie_init_latency", "pcie_overhead", "expert_size",
                     "draft_base", "draft_per_token", "work_per_token"):
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
                raise ProfileError(f"{name} must be a positive number, got {value!r}")
        if len(self.verify_samples) < 2:
            raise InsufficientSamples("verify_samples needs at least two (window, seconds) points")
        ws = [w for w, _ in self.verify_samples]
        if any(b <= a for a, b in zip(ws, ws[1:])):
            raise ProfileError("verify_samples windows must be strictly increasing")
        if any(t <= 0 for _, t in self.verify_samples):
            raise ProfileError("verify_samples times must be positive")

    def scaled(self, c: float) -> "HardwareProfile":
        """Same hardware running every timed operation ``c`` times slower."""
        return replace(
            self,
            pcie_bandwidth=self.pcie_bandwidth / c,
            pcie_init_latency=self.pcie_init_latency * c,
            pcie_overhead=self.pcie_overhead * c,
            draft_base=self.draft_base * c,
            draft_per_token=self.draft_per_token * c,
            verify_samples=tuple((w, t * c) for w, t in self.verify_samples),
        )

    def to_json(self) -> dict:
        d = asdict(self)
        d["verify_samples"] = [list(s) for s in self.verify_samples]
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "HardwareProfile":
        if not isinstance(obj, dict):
            raise ProfileError("hardware profile must be a JSON object")
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ProfileError(f"unknown profile field(s): {', '.join(unknown)}")
        kwargs = dict(obj)
        if "verify_samples" in kwargs:
            try:
                kwargs["verify_samples"] = tuple((w, t) for w, t in kwargs["verify_samples"])
            except (TypeError, ValueError):
                raise ProfileError("verify_samples must be a list of [window, seconds] pairs") from None
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> "HardwareProfile":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


@dataclass(frozen=True)
class AcceptanceModel:
    p: tuple[float, ...]
    ema_alpha: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "p", tuple(float(x) for x in self.p))
        if any(not 0.0 <= x <= 1.0 for x in self.p):
            raise ValueError(f"acceptance probabilities must lie in [0, 1]: {self.p}")
        if not 0.0 < self.ema_alpha <= 1.0:
            raise ValueError(f"ema_alpha must lie in (0, 1], got {self.ema_alpha}")

    @classmethod
    def constant(cls, p: float, k_max: int, ema_alpha: float = 0.1) -> "AcceptanceModel":
        return cls((p,) * k_max, ema_alpha)


@dataclass(frozen=True)
class GovernorConfig:
    k_min: int = 1
    k_max: int = 16
    k_slo: int | None = None
    ttft_budget: float | None = None

    def __post_init__(self):
        if self.k_min < 1:
            raise ValueError("k_min must be >= 1")
        if self.k_max < self.k_min:
            raise ValueError("k_max must be >= k_min")
        if self.k_slo is not None and not self.k_min <= self.k_slo <= self.k_max:
            raise ValueError("k_slo must lie in [k_min, k_max]")


@dataclass(frozen=True)
class OperatingPoint:
    k: int
    intensity: float
    throughput: float
    compute_roof: float
    io_roof: float


def k_accept(model: AcceptanceModel, k: int) -> float:
    if not 0 <= k <= len(model.p):
        raise KOutOfRange(f"k={k} outside [0, {len(model.p)}]")
    total, prod = 0.0, 1.0
    for p in model.p[:k]:
        prod *= p
        total += prod
    return total


def t_draft(profile: HardwareProfile, k: int) -> float:
    if k < 0:
        raise ValueError("k must be >= 0")
    return profile.draft_base + k * profile.draft_per_token


def t_pcie_new(profile: HardwareProfile, num_new_experts: float) -> float:
    if num_new_experts < 0:
        raise ValueError("num_new_experts must be >= 0")
    if num_new_experts == 0:
        return 0.0
    return profile.pcie_overhead + num_new_experts * profile.expert_size / profile.pcie_bandwidth


def interpolate(samples: Sequence[tuple[float, float]], x: float) -> float:
    """Piecewise-linear through ``samples``; linear extension past either end."""
    if len(samples) < 2:
        raise InsufficientSamples("need at least two samples")
    xs = [s[0] for s in samples]
    i = bisect.bisect_right(xs, x)
    i = min(max(i, 1), len(xs) - 1)
    (x0, y0), (x1, y1) = samples[i - 1], samples[i]
    if x == x1:
        return y1
    return y0 + (y1 - y0) * (x - x0) / (x1 - x0)


def t_verify(profile: HardwareProfile, window: float) -> float:
    return interpolate(profile.verify_samples, window)


def t_cycle(profile: HardwareProfile, k: int, num_new_experts: float) -> float:
    return max(t_draft(profile, k), profile.pcie_init_latency) + t_pcie_new(profile, num_new_experts) + t_verify(profile, k + 1)


def throughput(profile: HardwareProfile, model: AcceptanceModel, k: int, num_new_experts: float) -> float:
    cycle = t_cycle(profile, k, num_new_experts)
    if cycle <= 0:
        raise ValueError("cycle time must be positive")
    return k_accept(model, k) / cycle


def amortization_intensity(
    profile: HardwareProfile, model: AcceptanceModel, k: int, sync_io_bytes: float
) -> float:
    if sync_io_bytes <= 0:
        return math.inf
    return k_accept(model, k) * profile.work_per_token / sync_io_bytes


def roofline(
    profile: HardwareProfile,
    model: AcceptanceModel,
    k_range: Iterable[int],
    new_expert_estimator: NewExpertEstimator,
) -> list[OperatingPoint]:
    points = []
    for k in k_range:
        n = new_expert_estimator(k)
        accepted = k_accept(model, k)
        intensity = amortization_intensity(profile, model, k, n * profile.expert_size)
        compute = accepted / (max(t_draft(profile, k), profile.pcie_init_latency) + t_verify(profile, k + 1))
        io = math.inf if math.isinf(intensity) else profile.pcie_bandwidth * intensity / profile.work_per_token
        points.append(OperatingPoint(k, intensity, throughput(profile, model, k, n), compute, io))
    return points


def roofline_csv(points: Sequence[OperatingPoint]) -> str:
    lines = ["k,intensity,throughput,compute_roof,io_roof"]
    for pt in points:
        lines.append(f"{pt.k},{pt.intensity!r},{pt.throughput!r},{pt.compute_roof!r},{pt.io_roof!r}")
    return "\n".join(lines) + "\n"


def select_k(
    profile: HardwareProfile,
    model: AcceptanceModel,
    config: GovernorConfig,
    new_expert_estimator: NewExpertEstimator,
) -> int:
    """Smallest k in ``[k_min, k_slo]`` maximizing modeled throughput."""
    hi = config.k_slo if config.k_slo is not None else config.k_max
    hi = min(hi, len(model.p))
    if hi < config.k_min:
        raise EmptyRange(f"empty search range [{config.k_min}, {hi}]")
    best_k, best = config.k_min, -math.inf
    for k in range(config.k_min, hi + 1):
        theta = throughput(profile, model, k, new_expert_estimator(k))
        if theta > best:
            best_k, best = k, theta
    return best_k


def k_slo_from_ttft(
    profile: HardwareProfile,
    ttft_budget: float,
    new_expert_estimator: NewExpertEstimator,
    k_min: int = 1,
    k_max: int = 64,
) -> int:
    """Largest k whose modeled first-cycle latency fits in ``ttft_budget``."""
    latency = lambda k: t_cycle(profile, k, new_expert_estimator(k))  # noqa: E731
    if latency(k_min) > ttft_budget:
        raise InfeasibleBudget(f"T_cycle({k_min}) = {latency(k_min):.6g}s exceeds budget {ttft_budget}s")
    lo, hi = k_min, k_max
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if latency(mid) <= ttft_budget:
            lo = mid
        else:
            hi = mid - 1
    return lo


def update_acceptance(model: AcceptanceModel, observed: Sequence[bool]) -> AcceptanceModel:
    """EMA update of p_1..p_m; observation stops at the first rejection."""
    a = model.ema_alpha
    p = list(model.p)
    for i, outcome in enumerate(observed):
        if i >= len(p):
            break
        p[i] = min(1.0, max(0.0, (1 - a) * p[i] + a * float(outcome)))
        if not outcome:
            break
    return replace(model, p=tuple(p))


@dataclass(frozen=True)
class FootprintTotals:
    draft: float
    target: float
    shared: float
    total: float


def memory_footprint(components: Iterable[tuple[str, float, float, float]]) -> FootprintTotals:
    draft = target = shared = 0.0
    cols: tuple[list, list, list] = ([], [], [])
    for name, d, t, s in components:
        if min(d, t, s) < 0:
            raise ValueError(f"component {name!r} has a negative size")
        cols[0].append(d)
        cols[1].append(t)
        cols[2].append(s)
    draft, target, shared = (math.fsum(c) for c in cols)
    return FootprintTotals(draft, target, shared, math.fsum((draft, target, shared)))


def reduction(baseline: float, value: float) -> float:
    return (baseline - value) / baseline

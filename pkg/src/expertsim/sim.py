"""Trace-driven replay of speculative decoding with expert offloading.

Each cycle drafts ``k`` tokens on the compute lane while the I/O lane pays
the fixed transfer start-up cost and then streams prefetched experts. When
drafting and start-up are both done, verification waits for any required
expert that is still in flight or was never prefetched (fetched on demand in
one batch), runs, and accepts the longest accepted prefix plus one corrected
token. Cycle span is therefore::

    max(draft, io_init) + stall + verify + rollback

Coverage is measured against the target model's routing at the moment
verification is due, counting keys that hold a cache slot (landed or in
flight).
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

from . import perfmodel as pm
from .perfmodel import AcceptanceModel, GovernorConfig, HardwareProfile
from .scheduler import (
    DEFAULT_PHASES,
    GLOBAL,
    PER_LAYER,
    CacheState,
    Policy,
    ExpertLookaheadBuffer,
    build_elb,
    entropy_weighted_capacities,
    furthest_use_victim,
    plan_prefetch,
    reorder_verification,
)
from .scheduler.elb import ElbEntry, _normalize
from .scheduler.prefetch import PrefetchPlan
from .trace import ExpertKey, Trace

GOVERNOR = "governor"
COMPUTE, IO = "compute", "io"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    policy: Policy = Policy.SPECULATIVE
    cache_capacity: int | None = 16
    capacity_mode: str = PER_LAYER
    entropy_weighting: bool = False
    k_policy: int | str = 4
    profile: HardwareProfile = field(default_factory=HardwareProfile)
    governor: GovernorConfig = field(default_factory=GovernorConfig)
    phase_boundaries: tuple[float, float] = DEFAULT_PHASES
    prefetch_budget: float = 32.0
    rollback_time: float = 0.0
    initial_acceptance: float = 0.8
    ema_alpha: float = 0.1
    seed: int = 0
    record_plans: bool = False

    def __post_init__(self):
        object.__setattr__(self, "policy", Policy.parse(self.policy))
        if isinstance(self.k_policy, str):
            if self.k_policy != GOVERNOR:
                raise ConfigError(f"k_policy must be an integer or {GOVERNOR!r}")
        elif self.k_policy < 1:
            raise ConfigError("fixed k must be >= 1")
        if self.capacity_mode not in (PER_LAYER, GLOBAL):
            raise ConfigError(f"capacity_mode must be {PER_LAYER!r} or {GLOBAL!r}")
        if self.cache_capacity is not None and self.cache_capacity < 1:
            raise ConfigError("cache_capacity must be >= 1")
        f1, f2 = self.phase_boundaries
        if not 0.0 <= f1 <= f2 <= 1.0:
            raise ConfigError("phase boundaries must satisfy 0 <= f1 <= f2 <= 1")
        if self.prefetch_budget < 0 or self.rollback_time < 0:
            raise ConfigError("prefetch_budget and rollback_time must be >= 0")
        if not 0.0 <= self.initial_acceptance <= 1.0:
            raise ConfigError("initial_acceptance must lie in [0, 1]")


class Segment(NamedTuple):
    lane: str
    label: str
    start: float
    duration: float

    @property
    def end(self) -> float:
        return self.start + self.duration


@dataclass
class CycleRecord:
    cycle_index: int
    start: float
    k_used: int
    accepted_count: int
    bonus_token: int
    segments: list[Segment]
    per_layer_coverage: list[float]
    coverage: float
    prefetched: int
    demand_fetched: int
    new_experts_fetched: int
    bytes_transferred: float
    stall: float
    span: float
    plan: dict | None = None
    execution: list | None = None

    def segment(self, label: str) -> list[Segment]:
        return [s for s in self.segments if s.label == label]

    def to_json(self) -> dict:
        out = {
            "cycle": self.cycle_index,
            "start_s": self.start,
            "k": self.k_used,
            "accepted": self.accepted_count,
            "bonus": self.bonus_token,
            "coverage": self.coverage,
            "per_layer_coverage": self.per_layer_coverage,
            "prefetched": self.prefetched,
            "demand_fetched": self.demand_fetched,
            "new_experts": self.new_experts_fetched,
            "bytes": self.bytes_transferred,
            "stall_s": self.stall,
            "span_s": self.span,
            "segments": [[s.lane, s.label, s.start, s.duration] for s in self.segments],
        }
        if self.plan is not None:
            out["prefetch_plan"] = self.plan
        if self.execution is not None:
            out["execution_plan"] = self.execution
        return out


@dataclass
class SimReport:
    total_tokens: int
    total_time: float
    tpot: float
    mean_coverage: float
    mean_accepted: float
    mean_tokens_per_cycle: float
    stall_time: float
    first_cycle_latency: float
    total_bytes: float
    cycles: list[CycleRecord]
    config: dict = field(default_factory=dict)

    @property
    def stall_fraction(self) -> float:
        return self.stall_time / self.total_time if self.total_time > 0 else 0.0

    def to_json(self) -> dict:
        return {
            "total_tokens": self.total_tokens,
            "total_time_s": self.total_time,
            "tpot_s": self.tpot,
            "mean_coverage": self.mean_coverage,
            "mean_accepted": self.mean_accepted,
            "mean_tokens_per_cycle": self.mean_tokens_per_cycle,
            "stall_time_s": self.stall_time,
            "stall_fraction": self.stall_fraction,
            "first_cycle_latency_s": self.first_cycle_latency,
            "total_bytes": self.total_bytes,
            "config": self.config,
            "cycles": [c.to_json() for c in self.cycles],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=False)

    def cycles_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["cycle", "k", "accepted", "coverage", "span_s", "bytes"])
        for c in self.cycles:
            w.writerow([c.cycle_index, c.k_used, c.accepted_count, repr(c.coverage), repr(c.span), repr(c.bytes_transferred)])
        return buf.getvalue()

    def timeline_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["cycle", "lane", "label", "start_s", "duration_s"])
        for c in self.cycles:
            for s in c.segments:
                w.writerow([c.cycle_index, s.lane, s.label, repr(s.start), repr(s.duration)])
        return buf.getvalue()


def config_summary(config: SimConfig) -> dict:
    return {
        "policy": config.policy.value,
        "cache_capacity": config.cache_capacity,
        "capacity_mode": config.capacity_mode,
        "entropy_weighting": config.entropy_weighting,
        "k_policy": config.k_policy,
        "phase_boundaries": list(config.phase_boundaries),
        "prefetch_budget": config.prefetch_budget,
        "rollback_time": config.rollback_time,
        "initial_acceptance": config.initial_acceptance,
        "ema_alpha": config.ema_alpha,
        "seed": config.seed,
        "profile": config.profile.to_json(),
        "governor": {
            "k_min": config.governor.k_min,
            "k_max": config.governor.k_max,
            "k_slo": config.governor.k_slo,
            "ttft_budget": config.governor.ttft_budget,
        },
    }


def make_cache(trace: Trace, config: SimConfig) -> CacheState:
    shape = trace.shape
    L, N = shape.num_moe_layers, shape.experts_per_layer
    if config.capacity_mode == GLOBAL:
        cap = config.cache_capacity if config.cache_capacity is not None else N * L
        if cap < shape.top_k:
            raise ConfigError(f"global capacity {cap} is below top_k={shape.top_k}")
        return CacheState(cap, L, GLOBAL)
    cap = min(config.cache_capacity, N) if config.cache_capacity is not None else N
    if cap < shape.top_k:
        raise ConfigError(f"per-layer capacity {cap} is below top_k={shape.top_k}")
    if config.entropy_weighting and trace.tokens:
        caps = entropy_weighted_capacities(trace, cap)
        return CacheState(caps, L, PER_LAYER)
    return CacheState(cap, L, PER_LAYER)


class _IOChannel:
    """Single FIFO transfer lane; one overhead charge per batch."""

    def __init__(self, profile: HardwareProfile):
        self.profile = profile
        self.free_at = 0.0

    def fixed(self, at: float, duration: float) -> Segment:
        start = max(at, self.free_at)
        self.free_at = start + duration
        return Segment(IO, "io_init", start, duration)

    def batch(self, at: float, n: int) -> Segment:
        start = max(at, self.free_at)
        duration = pm.t_pcie_new(self.profile, n)
        self.free_at = start + duration
        return Segment(IO, "io_new", start, duration)


class _Engine:
    def __init__(self, trace: Trace, config: SimConfig):
        self.trace = trace
        self.config = config
        self.profile = config.profile
        self.shape = trace.shape
        self.cache = make_cache(trace, config)
        self.channel = _IOChannel(self.profile)
        self.now = 0.0
        self.rows: dict[int, tuple] = {}
        self.keys = [
            [ExpertKey(l, e) for e in range(self.shape.experts_per_layer)] for l in range(self.shape.num_moe_layers)
        ]
        gov = config.governor
        k_len = gov.k_max if config.k_policy == GOVERNOR else max(gov.k_max, int(config.k_policy))
        self.acceptance = AcceptanceModel.constant(config.initial_acceptance, k_len, config.ema_alpha)
        # cold start: every predicted expert is assumed new
        self.new_rate = float(self.shape.num_moe_layers * self.shape.top_k)
        self.k_slo = gov.k_slo
        if config.k_policy == GOVERNOR and self.k_slo is None and gov.ttft_budget is not None:
            self.k_slo = pm.k_slo_from_ttft(self.profile, gov.ttft_budget, self._estimate, gov.k_min, gov.k_max)

    def _elb_row(self, pos: int):
        row = self.rows.get(pos)
        if row is None:
            # validated traces carry distinct experts per cell, so build_elb's
            # checks are skipped here; confidence matches its normalization
            tok = self.trace.tokens[pos]
            scores = tok.draft_scores
            cells, keys = [], []
            for l, experts in enumerate(tok.draft_sets):
                conf = _normalize(scores[l]) if scores is not None else [1.0] * len(experts)
                cells.append(tuple([ElbEntry(e, c) for e, c in zip(experts, conf)]))
                table = self.keys[l]
                keys.extend([table[e] for e in experts])
            row = self.rows[pos] = (tuple(cells), tuple(keys))
        return row

    def _estimate(self, k: int) -> float:
        return self.new_rate * k

    def choose_k(self) -> int:
        if self.config.k_policy != GOVERNOR:
            return int(self.config.k_policy)
        gov = replace(self.config.governor, k_slo=self.k_slo)
        return pm.select_k(self.profile, self.acceptance, gov, self._estimate)

    # --- prefetch during drafting -------------------------------------------------

    def _issue(self, at: float, keys: Sequence[ExpertKey], chooser) -> tuple[Segment | None, int]:
        cache = self.cache
        ready_at, pools, caps = cache.ready_at, cache.pools, cache.capacities
        per_layer = cache.per_layer
        placed = []
        for key in keys:
            if key in ready_at:
                continue
            pool = key[0] if per_layer else 0
            slots = pools[pool]
            if len(slots) >= caps[pool]:
                victim = chooser(key, pool, at)
                if victim is None:
                    continue
                del slots[victim]
                del ready_at[victim]
                cache.evictions += 1
            slots[key] = None
            ready_at[key] = math.inf
            placed.append(key)
        if not placed:
            return None, 0
        cache.insertions += len(placed)
        seg = self.channel.batch(at, len(placed))
        end = seg.end
        for key in placed:
            ready_at[key] = end
        return seg, len(placed)

    def _lru_chooser(self, key, pool, at):
        return self.cache.lru_victim(pool, now=at)

    def _prefetch(self, elb, t0: float) -> tuple[list[Segment], int, PrefetchPlan | None]:
        policy = self.config.policy
        cache = self.cache
        base, tok = self.profile.draft_base, self.profile.draft_per_token
        done = lambda i: t0 + base + (i + 1) * tok  # noqa: E731
        segments: list[Segment] = []
        fetched = 0
        plan = None

        if policy in (Policy.SINGLE_SOONER, Policy.SINGLE_LATER):
            lead = tok if policy is Policy.SINGLE_SOONER else 0.0
            for i in range(elb.filled):
                keys = sorted(set(elb.keys_at(i)))
                seg, n = self._issue(done(i) - lead, keys, self._lru_chooser)
                if seg:
                    segments.append(seg)
                    fetched += n

        elif policy in (Policy.SPECULATIVE, Policy.LOOKAHEAD):
            if policy is Policy.SPECULATIVE:
                plan = plan_prefetch(elb, cache.resident, self.config.prefetch_budget, self.config.phase_boundaries)
            else:
                plan = plan_prefetch(elb, cache.resident, math.inf, (0.0, 0.0))
            first_use = elb.first_use(0)
            for hint, keys in plan.batches():
                known = {k: v for k, v in first_use.items() if v <= hint}
                # issue time and known next uses are fixed within a batch, so each
                # pool's eviction order is computed once and consumed front to back
                order: dict[int, list[ExpertKey]] = {}

                def chooser(key, pool, at, known=known, order=order):
                    queue = order.get(pool)
                    if queue is None:
                        ready_at = cache.ready_at
                        queue = [k for k in cache.pools[pool] if ready_at[k] <= at]
                        get = known.get
                        queue.sort(key=lambda k: (get(k, math.inf), k), reverse=True)
                        order[pool] = queue
                    if not queue:
                        return None
                    victim = queue[0]
                    if known.get(victim, math.inf) <= known.get(key, math.inf):
                        return None
                    return queue.pop(0)

                seg, n = self._issue(done(hint), keys, chooser)
                if seg:
                    segments.append(seg)
                    fetched += n
        return segments, fetched, plan

    # --- verification ----------------------------------------------------------------

    def _verify_fetch(self, requests: list[ExpertKey], at: float) -> tuple[float, Segment | None]:
        """Serve the verification request string; returns (ready time, demand batch)."""
        cache = self.cache
        belady = self.config.policy in (Policy.SPECULATIVE, Policy.LOOKAHEAD)
        ready_at, pools, caps = cache.ready_at, cache.pools, cache.capacities
        per_layer = cache.per_layer
        order = {key: i for i, key in enumerate(requests)}
        wait = at
        missing: list[ExpertKey] = []
        for j, key in enumerate(requests):
            pool = key[0] if per_layer else 0
            r = ready_at.get(key)
            if r is not None:
                pools[pool].move_to_end(key)
                if r != math.inf and r > wait:
                    wait = r
                continue
            if len(pools[pool]) >= caps[pool]:
                if belady:
                    victim, best = None, None
                    for k in pools[pool]:
                        nxt = order.get(k, -1)
                        rank = (nxt if nxt > j else math.inf, k)
                        if best is None or rank > best:
                            victim, best = k, rank
                else:
                    victim = next(iter(pools[pool]))
                del pools[pool][victim]
                del ready_at[victim]
                cache.evictions += 1
            pools[pool][key] = None
            ready_at[key] = math.inf
            cache.insertions += 1
            missing.append(key)
        if not missing:
            return wait, None
        # a demand-fetched key streamed out again later in the pass still cost a transfer
        seg = self.channel.batch(at, len(missing))
        for key in missing:
            if key in cache:
                cache.ready_at[key] = seg.end
        return max(wait, seg.end), seg

    def run(self) -> SimReport:
        trace, cfg, profile, cache = self.trace, self.config, self.profile, self.cache
        L = self.shape.num_moe_layers
        tokens = trace.tokens
        pos = 0
        cycles: list[CycleRecord] = []

        while pos < len(tokens):
            t0 = self.now
            remaining = len(tokens) - pos
            k = min(self.choose_k(), remaining)
            window = list(range(pos, pos + k))
            inserted_before = cache.insertions

            elb = ExpertLookaheadBuffer(k, L)
            if cfg.policy is not Policy.LRU:
                for p in window:
                    elb._push(*self._elb_row(p))
            draft = Segment(COMPUTE, "draft", t0, pm.t_draft(profile, k))
            init = self.channel.fixed(t0, profile.pcie_init_latency)
            io_segments, prefetched, plan = self._prefetch(elb, t0)
            verify_due = max(draft.end, init.end)

            # the execution plan visits each required expert exactly once per layer
            execution = reorder_verification(window, [tokens[p].target_sets for p in window])
            keys = self.keys
            required = [[keys[l][e] for e, _ in groups] for l, groups in enumerate(execution.layers)]
            resident = cache.ready_at
            hits = [sum(1 for key in req if key in resident) for req in required]
            per_layer = [h / len(req) for h, req in zip(hits, required)]
            coverage = sum(hits) / sum(len(r) for r in required)

            before = cache.insertions
            ready, demand_seg = self._verify_fetch([key for req in required for key in req], verify_due)
            demand = cache.insertions - before
            if demand_seg:
                io_segments.append(demand_seg)
            stall = ready - verify_due
            verify = Segment(COMPUTE, "verify", ready, pm.t_verify(profile, k + 1))

            accepted = 0
            while accepted < k and tokens[pos + accepted].draft_accepted:
                accepted += 1
            bonus = 1 if accepted < remaining else 0
            segments = [draft, init, *io_segments, verify]
            end = verify.end
            if accepted < k:
                rb = Segment(COMPUTE, "rollback", end, cfg.rollback_time)
                segments.append(rb)
                end = rb.end

            observed = [True] * accepted + ([False] if accepted < k else [])
            self.acceptance = pm.update_acceptance(self.acceptance, observed)
            fetched = cache.insertions - inserted_before
            self.new_rate = fetched / k
            cache.check()

            cycles.append(
                CycleRecord(
                    cycle_index=len(cycles),
                    start=t0,
                    k_used=k,
                    accepted_count=accepted,
                    bonus_token=bonus,
                    segments=segments,
                    per_layer_coverage=per_layer,
                    coverage=coverage,
                    prefetched=prefetched,
                    demand_fetched=demand,
                    new_experts_fetched=fetched,
                    bytes_transferred=fetched * self.shape.expert_size_bytes,
                    stall=stall,
                    span=end - t0,
                    plan=plan.to_json() if (cfg.record_plans and plan is not None) else None,
                    execution=execution.to_json() if cfg.record_plans else None,
                )
            )
            for p in range(pos, pos + accepted + bonus):
                self.rows.pop(p, None)
            pos += accepted + bonus
            self.now = end

        total_tokens = sum(c.accepted_count + c.bonus_token for c in cycles)
        total_time = self.now
        n = len(cycles)
        return SimReport(
            total_tokens=total_tokens,
            total_time=total_time,
            tpot=total_time / total_tokens if total_tokens else 0.0,
            mean_coverage=sum(c.coverage for c in cycles) / n if n else 0.0,
            mean_accepted=sum(c.accepted_count for c in cycles) / n if n else 0.0,
            mean_tokens_per_cycle=total_tokens / n if n else 0.0,
            stall_time=sum(c.stall for c in cycles),
            first_cycle_latency=cycles[0].span if cycles else 0.0,
            total_bytes=sum(c.bytes_transferred for c in cycles),
            cycles=cycles,
            config=config_summary(cfg),
        )


def run_simulation(trace: Trace, config: SimConfig) -> SimReport:
    trace.validate()
    return _Engine(trace, config).run()


@dataclass(frozen=True)
class PolicyRow:
    policy: str
    capacity: int | None
    mean_coverage: float
    tpot: float


def _compare_one(args) -> PolicyRow:
    trace, config = args
    report = _Engine(trace, config).run()
    return PolicyRow(config.policy.value, config.cache_capacity, report.mean_coverage, report.tpot)


def compare_policies(
    trace: Trace,
    base_config: SimConfig,
    policies: Sequence[Policy | str],
    capacities: Sequence[int | None],
    jobs: int = 1,
) -> list[PolicyRow]:
    """Replay the same trace under every (policy, capacity) pair."""
    if not policies or not capacities:
        raise ValueError("policies and capacities must be non-empty")
    configs = [
        replace(base_config, policy=Policy.parse(p), cache_capacity=c) for p in policies for c in capacities
    ]
    trace.validate()
    work = [(trace, c) for c in configs]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(_compare_one, work))
    return [_compare_one(w) for w in work]


def policy_table_csv(rows: Sequence[PolicyRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["policy", "capacity", "coverage", "tpot"])
    for r in rows:
        w.writerow([r.policy, "inf" if r.capacity is None else r.capacity, repr(r.mean_coverage), repr(r.tpot)])
    return buf.getvalue()


@dataclass(frozen=True)
class SweepRow:
    k: int
    tpot: float
    mean_accepted: float
    mean_coverage: float
    ttft: float


def sweep_k(trace: Trace, config: SimConfig, k_values: Sequence[int]) -> list[SweepRow]:
    rows = []
    for k in k_values:
        if k < 1:
            raise ConfigError("k must be >= 1")
        report = run_simulation(trace, replace(config, k_policy=k))
        rows.append(SweepRow(k, report.tpot, report.mean_accepted, report.mean_coverage, report.first_cycle_latency))
    return rows

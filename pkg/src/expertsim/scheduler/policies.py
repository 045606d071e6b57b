"""Cache policies applied to a stream of expert requests.

``policy_step`` serves one request at a time. The lookahead context is the
ELB plus the draft row the request belongs to. Prefetching policies fill the
cache before the request is checked; whether the request then hits is what
the per-step hit rate counts.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

from ..trace import ExpertKey
from .cache import CacheState, furthest_use_victim
from .elb import ExpertLookaheadBuffer
from .prefetch import plan_prefetch


class UnknownPolicy(ValueError):
    pass


class Policy(str, enum.Enum):
    LRU = "lru"
    LOOKAHEAD = "lookahead"
    SINGLE_SOONER = "single_sooner"
    SINGLE_LATER = "single_later"
    SPECULATIVE = "speculative"

    @classmethod
    def parse(cls, value: "str | Policy") -> "Policy":
        if isinstance(value, Policy):
            return value
        norm = str(value).strip().lower().replace("-", "_")
        aliases = {
            "lookaheadaware": cls.LOOKAHEAD,
            "lookahead_aware": cls.LOOKAHEAD,
            "singleprefetchsooner": cls.SINGLE_SOONER,
            "single_prefetch_sooner": cls.SINGLE_SOONER,
            "singleprefetchlater": cls.SINGLE_LATER,
            "single_prefetch_later": cls.SINGLE_LATER,
        }
        if norm in aliases:
            return aliases[norm]
        try:
            return cls(norm)
        except ValueError:
            raise UnknownPolicy(f"unknown policy {value!r}") from None


@dataclass
class StepContext:
    elb: ExpertLookaheadBuffer
    now: int


@dataclass(frozen=True)
class StepResult:
    hit: bool
    evicted: ExpertKey | None


def _lru_insert(cache: CacheState, key: ExpertKey) -> ExpertKey | None:
    pool = cache.pool_of(key)
    victim = None
    if cache.is_full(pool):
        victim = cache.lru_victim(pool)
        cache.evict(victim)
    cache.insert(key)
    return victim


def _lookahead_insert(cache: CacheState, key: ExpertKey, next_use: dict, bypass: bool) -> tuple[bool, ExpertKey | None]:
    pool = cache.pool_of(key)
    if not cache.is_full(pool):
        cache.insert(key)
        return True, None
    victim = furthest_use_victim(cache.pools[pool], next_use)
    if bypass and next_use.get(victim, math.inf) <= next_use.get(key, math.inf):
        return False, None
    cache.evict(victim)
    cache.insert(key)
    return True, victim


def _prefetch_lru(cache: CacheState, keys) -> None:
    for key in keys:
        if key not in cache:
            _lru_insert(cache, key)


def policy_step(
    policy: Policy | str,
    cache: CacheState,
    request: ExpertKey,
    context: StepContext | None = None,
) -> StepResult:
    policy = Policy.parse(policy)
    if policy is not Policy.LRU and context is None:
        raise ValueError(f"{policy.value} needs an ELB context")

    if policy is Policy.SINGLE_LATER:
        # lead 0: the request's own layer is fetched at the routing instant
        if context.now < context.elb.filled:
            cell = context.elb.rows[context.now][request.layer]
            _prefetch_lru(cache, [ExpertKey(request.layer, e.expert_id) for e in cell])
    elif policy is Policy.SPECULATIVE:
        applied = getattr(cache, "_applied_elb", None)
        if applied is not context.elb:
            cache._applied_elb = context.elb
            next_use = context.elb.first_use(0)
            plan = plan_prefetch(context.elb, cache.resident, math.inf, (0.0, 0.0))
            for key in plan.keys():
                _lookahead_insert(cache, key, next_use, bypass=True)

    hit = request in cache
    evicted = None
    if hit:
        cache.touch(request)
    elif policy in (Policy.LRU, Policy.SINGLE_SOONER, Policy.SINGLE_LATER):
        evicted = _lru_insert(cache, request)
    else:
        next_use = context.elb.first_use(context.now + 1)
        _, evicted = _lookahead_insert(cache, request, next_use, bypass=False)

    if policy is Policy.SINGLE_SOONER and context.now < context.elb.filled:
        # lead 1: fetch the next layer's predictions while this layer runs
        nxt = request.layer + 1
        if nxt < context.elb.num_layers:
            cell = context.elb.rows[context.now][nxt]
            _prefetch_lru(cache, [ExpertKey(nxt, e.expert_id) for e in cell])
    return StepResult(hit, evicted)

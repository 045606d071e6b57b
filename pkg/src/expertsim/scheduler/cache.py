"""Expert cache residency, coverage and victim selection."""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterable, Mapping

from ..trace import ExpertKey, Trace, layer_entropy
from .elb import ExpertLookaheadBuffer

PER_LAYER = "per_layer"
GLOBAL = "global"


class EmptyCache(LookupError):
    pass


class EmptyRequired(ValueError):
    pass


class CapacityExceeded(RuntimeError):
    pass


class CacheState:
    """Slots of accelerator memory holding experts.

    In ``per_layer`` mode each MoE layer owns a separate pool; in ``global``
    mode all layers share one pool. Each pool keeps keys in recency order
    (oldest first). ``ready_at`` records when an in-flight transfer lands; a
    key occupies its slot from the moment the transfer is issued.
    Shared experts are pinned and never enter the cache.
    """

    def __init__(
        self,
        capacity: int | Mapping[int, int],
        num_layers: int,
        mode: str = PER_LAYER,
    ):
        if mode not in (PER_LAYER, GLOBAL):
            raise ValueError(f"unknown capacity mode {mode!r}")
        self.mode = mode
        self.per_layer = mode == PER_LAYER
        self.num_layers = num_layers
        if mode == GLOBAL:
            if not isinstance(capacity, int):
                raise ValueError("global mode takes a single integer capacity")
            self.capacities = {0: capacity}
        elif isinstance(capacity, int):
            self.capacities = {l: capacity for l in range(num_layers)}
        else:
            self.capacities = {l: int(capacity[l]) for l in range(num_layers)}
        if any(c < 1 for c in self.capacities.values()):
            raise ValueError("every pool needs capacity >= 1")
        self.pools: dict[int, OrderedDict[ExpertKey, None]] = {p: OrderedDict() for p in self.capacities}
        self.ready_at: dict[ExpertKey, float] = {}
        self.insertions = 0
        self.evictions = 0

    def pool_of(self, key: ExpertKey) -> int:
        return key[0] if self.per_layer else 0

    def __contains__(self, key: ExpertKey) -> bool:
        return key in self.ready_at

    def __len__(self) -> int:
        return len(self.ready_at)

    @property
    def resident(self) -> frozenset[ExpertKey]:
        return frozenset(self.ready_at)

    def pool_keys(self, pool: int) -> list[ExpertKey]:
        return list(self.pools[pool])

    def is_full(self, pool: int) -> bool:
        return len(self.pools[pool]) >= self.capacities[pool]

    def is_ready(self, key: ExpertKey, now: float) -> bool:
        return self.ready_at[key] <= now

    def insert(self, key: ExpertKey, ready_at: float = 0.0) -> None:
        pool = self.pool_of(key)
        if key in self.ready_at:
            raise ValueError(f"{key} is already resident")
        if self.is_full(pool):
            raise CapacityExceeded(f"pool {pool} is full ({self.capacities[pool]})")
        self.pools[pool][key] = None
        self.ready_at[key] = ready_at
        self.insertions += 1

    def evict(self, key: ExpertKey) -> None:
        del self.pools[self.pool_of(key)][key]
        del self.ready_at[key]
        self.evictions += 1

    def touch(self, key: ExpertKey) -> None:
        self.pools[self.pool_of(key)].move_to_end(key)

    def lru_victim(self, pool: int, now: float = math.inf, protect: frozenset = frozenset()) -> ExpertKey | None:
        """Least recently used ready key of ``pool`` outside ``protect``."""
        for key in self.pools[pool]:
            if key not in protect and self.ready_at[key] <= now:
                return key
        return None

    def check(self) -> None:
        for pool, keys in self.pools.items():
            if len(keys) > self.capacities[pool]:
                raise CapacityExceeded(f"pool {pool} holds {len(keys)} > {self.capacities[pool]}")


def step_coverage(cache: CacheState | Iterable[ExpertKey], required: Iterable[ExpertKey]) -> float:
    required = set(required)
    if not required:
        raise EmptyRequired("coverage of an empty requirement set is undefined")
    resident = cache.ready_at if isinstance(cache, CacheState) else set(cache)
    return sum(1 for key in required if key in resident) / len(required)


def furthest_use_victim(candidates: Iterable[ExpertKey], next_use: Mapping[ExpertKey, int]) -> ExpertKey:
    """Key whose next use lies furthest ahead; unused keys first.

    Ties go to the larger (layer, expert) so the choice is deterministic.
    """
    best = None
    best_rank = None
    for key in candidates:
        rank = (next_use.get(key, math.inf), key.layer, key.expert)
        if best_rank is None or rank > best_rank:
            best, best_rank = key, rank
    if best is None:
        raise EmptyCache("no resident key to evict")
    return best


def select_victim_lookahead(
    cache: CacheState,
    elb: ExpertLookaheadBuffer,
    now: int,
    pool: int | None = None,
    ready_by: float = math.inf,
) -> ExpertKey:
    """Belady-style choice driven by the lookahead buffer from row ``now`` on."""
    if pool is None:
        candidates = [k for k in cache.ready_at if cache.ready_at[k] <= ready_by]
    else:
        candidates = [k for k in cache.pools[pool] if cache.ready_at[k] <= ready_by]
    return furthest_use_victim(candidates, elb.first_use(now))


def entropy_weighted_capacities(trace: Trace, per_layer_capacity: int) -> dict[int, int]:
    """Split ``L * per_layer_capacity`` slots across layers by activation entropy.

    Every layer keeps at least top_k slots; the remainder is distributed in
    proportion to normalized layer entropy (largest remainder rounding).
    """
    shape = trace.shape
    L = shape.num_moe_layers
    floor = min(shape.top_k, per_layer_capacity)
    total = per_layer_capacity * L
    spare = total - floor * L
    ent = [layer_entropy(trace, l) for l in range(L)]
    s = sum(ent)
    weights = [e / s if s > 0 else 1.0 / L for e in ent]
    raw = [spare * w for w in weights]
    alloc = [int(math.floor(r)) for r in raw]
    leftover = spare - sum(alloc)
    order = sorted(range(L), key=lambda l: (-(raw[l] - alloc[l]), l))
    for l in order[:leftover]:
        alloc[l] += 1
    return {l: floor + alloc[l] for l in range(L)}

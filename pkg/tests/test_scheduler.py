import itertools
import math
import random
from functools import lru_cache

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from expertsim.scheduler import (
    GLOBAL,
    CacheState,
    CapacityExceeded,
    ElbEntry,
    EmptyCache,
    EmptyRequired,
    ExpertLookaheadBuffer,
    IncompleteRouting,
    Policy,
    RangeOutOfBounds,
    ShapeMismatch,
    StepContext,
    UnknownPolicy,
    build_elb,
    entropy_weighted_capacities,
    plan_prefetch,
    policy_step,
    predicted_union,
    reorder_verification,
    select_victim_lookahead,
    step_coverage,
)
from expertsim.trace import ExpertKey, FidelityStats, ModelShape, generate_synthetic_trace

K = ExpertKey


def random_elb(rng, k, L, N, top_k, scores=False):
    drafts = [[rng.sample(range(N), top_k) for _ in range(L)] for _ in range(k)]
    gates = [[[rng.random() + 0.01 for _ in range(top_k)] for _ in range(L)] for _ in range(k)] if scores else None
    return build_elb(drafts, k, gates, num_layers=L), drafts


# --- ELB -----------------------------------------------------------------------------


def test_build_elb_single_cell():
    elb = build_elb([[[3, 5]]], 1)
    assert elb.filled == 1 and elb.num_layers == 1
    assert [e.expert_id for e in elb.rows[0][0]] == [3, 5]
    assert all(e.confidence_score == 1.0 for e in elb.rows[0][0])


def test_build_elb_empty():
    elb = build_elb([], 0)
    assert elb.filled == 0
    assert predicted_union(elb) == set()


def test_build_elb_normalizes_gate_scores():
    elb = build_elb([[[1, 2, 3]]], 1, [[[2.0, 1.0, 1.0]]])
    assert [e.confidence_score for e in elb.rows[0][0]] == [0.5, 0.25, 0.25]


def test_build_elb_errors():
    with pytest.raises(ShapeMismatch):
        build_elb([[[1, 2]]], 2)
    with pytest.raises(ShapeMismatch):
        build_elb([[[1, 1]]], 1)
    with pytest.raises(ShapeMismatch):
        build_elb([[[1, 2]], [[1, 2], [3, 4]]], 2)
    with pytest.raises(ShapeMismatch):
        build_elb([[[1, 2]]], 1, [[[1.0]]])
    elb = ExpertLookaheadBuffer(1, 1)
    elb.append_row([[ElbEntry(0, 1.0)]])
    with pytest.raises(ShapeMismatch):
        elb.append_row([[ElbEntry(1, 1.0)]])
    with pytest.raises(ShapeMismatch):
        ExpertLookaheadBuffer(1, 1).append_row([[ElbEntry(0, 1.5)]])


def test_predicted_union_examples():
    elb = build_elb([[[0, 1], [2, 3]]], 1)
    assert predicted_union(elb) == {K(0, 0), K(0, 1), K(1, 2), K(1, 3)}
    twice = build_elb([[[0, 1], [2, 3]], [[1, 0], [3, 2]]], 2)
    assert predicted_union(twice) == predicted_union(elb)
    with pytest.raises(RangeOutOfBounds):
        predicted_union(elb, (0, 2))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6), k=st.integers(0, 6), L=st.integers(1, 4))
def test_predicted_union_brute_force(seed, k, L):
    rng = random.Random(seed)
    elb, drafts = random_elb(rng, k, L, 6, 2)
    a = rng.randint(0, k)
    b = rng.randint(a, k)
    oracle = {K(l, e) for i in range(a, b) for l in range(L) for e in drafts[i][l]}
    assert predicted_union(elb, (a, b)) == oracle


def test_incremental_fill_first_use():
    elb = ExpertLookaheadBuffer(3, 1)
    elb.append_row([[ElbEntry(4, 1.0)]])
    assert elb.first_use() == {K(0, 4): 0}
    elb.append_row([[ElbEntry(2, 1.0)]])
    elb.append_row([[ElbEntry(4, 1.0)]])
    assert elb.first_use() == {K(0, 4): 0, K(0, 2): 1}
    assert elb.first_use(1) == {K(0, 2): 1, K(0, 4): 2}
    assert elb.prefix(1).filled == 1


# --- prefetch plan ---------------------------------------------------------------------


def reference_plan(drafts, confs, resident, budget, f1, f2):
    """Step-by-step replay of the phase rules, recomputing everything from scratch."""
    k = len(drafts)
    scheduled, out, primed = [], [], []
    for i in range(k):
        visible = [(j, l, e, confs[j][l][n]) for j in range(i + 1) for l, cell in enumerate(drafts[j])
                   for n, e in enumerate(cell)]
        first, best = {}, {}
        for j, l, e, c in visible:
            key = K(l, e)
            first[key] = min(first.get(key, j), j)
            best[key] = max(best.get(key, 0.0), c)
        todo = [key for key in first if key not in resident and key not in scheduled]
        if i < f1 * k:
            for l, cell in enumerate(drafts[i]):
                for e in cell:
                    if K(l, e) in resident and K(l, e) not in primed:
                        primed.append(K(l, e))
            continue
        if i < f2 * k:
            todo.sort(key=lambda key: (-(best[key] * (k - first[key]) / k), first[key], key.layer, key.expert))
            if budget != math.inf:
                todo = todo[: int(budget)]
            phase = 2
        else:
            todo.sort(key=lambda key: (first[key], key.layer, key.expert))
            phase = 3
        for key in todo:
            scheduled.append(key)
            out.append((i, key, phase))
    return out, primed


def _confs(elb):
    return [[[e.confidence_score for e in cell] for cell in row] for row in elb.rows]


def test_plan_all_resident_is_empty():
    elb = build_elb([[[0, 1]], [[1, 2]]], 2)
    plan = plan_prefetch(elb, {K(0, 0), K(0, 1), K(0, 2)})
    assert len(plan) == 0


def test_plan_boundary_collapse_is_union_minus_resident():
    rng = random.Random(2)
    elb, _ = random_elb(rng, 6, 3, 8, 2)
    resident = {K(0, 1), K(1, 1), K(2, 5)}
    plan = plan_prefetch(elb, resident, 1, (0.0, 0.0))
    assert set(plan.keys()) == predicted_union(elb) - resident
    assert all(e.phase == 3 for e in plan.entries)


def test_plan_matches_reference_k8_budget2():
    for seed in range(50):
        rng = random.Random(seed)
        elb, drafts = random_elb(rng, 8, 3, 6, 2, scores=True)
        resident = {K(rng.randrange(3), rng.randrange(6)) for _ in range(5)}
        plan = plan_prefetch(elb, resident, 2, (0.25, 0.75))
        want, primed = reference_plan(drafts, _confs(elb), resident, 2, 0.25, 0.75)
        assert [tuple(e) for e in plan.entries] == want
        assert plan.primed == primed


@settings(max_examples=150, deadline=None)
@given(
    seed=st.integers(0, 10**6),
    k=st.integers(0, 9),
    budget=st.sampled_from([0, 1, 2, 3, math.inf]),
    f=st.tuples(st.floats(0, 1), st.floats(0, 1)).map(sorted),
)
def test_plan_properties(seed, k, budget, f):
    rng = random.Random(seed)
    elb, drafts = random_elb(rng, k, 2, 5, 2, scores=rng.random() < 0.5)
    resident = {K(rng.randrange(2), rng.randrange(5)) for _ in range(3)}
    plan = plan_prefetch(elb, resident, budget, tuple(f))
    keys = plan.keys()
    assert len(keys) == len(set(keys))
    assert not set(keys) & resident
    phases = [e.phase for e in plan.entries]
    assert phases == sorted(phases)
    assert 1 not in phases
    hints = [e.issue_after for e in plan.entries]
    assert hints == sorted(hints)
    for i in set(hints):
        batch = [e for e in plan.entries if e.issue_after == i]
        if batch[0].phase == 2 and budget != math.inf:
            assert len(batch) <= budget
        # causal: a key is never issued before its first predicted use is visible
        for e in batch:
            assert any(e.key.expert in drafts[j][e.key.layer] for j in range(i + 1))
    want, primed = reference_plan(drafts, _confs(elb), resident, budget, *f)
    assert [tuple(e) for e in plan.entries] == want
    assert plan.primed == primed


def test_plan_rejects_bad_arguments():
    elb = build_elb([[[0]]], 1)
    with pytest.raises(ValueError):
        plan_prefetch(elb, set(), 1, (0.8, 0.2))
    with pytest.raises(ValueError):
        plan_prefetch(elb, set(), -1)


def test_plan_json_shape():
    elb = build_elb([[[0, 1]], [[2, 1]]], 2)
    plan = plan_prefetch(elb, {K(0, 1)}, math.inf, (0.5, 0.5))
    assert plan.to_json() == {"entries": [[1, [0, 0], 3], [1, [0, 2], 3]], "primed": [[0, 1]]}


# --- cache and victims ---------------------------------------------------------------


def test_cache_capacity_enforced():
    cache = CacheState(2, 1)
    cache.insert(K(0, 0))
    cache.insert(K(0, 1))
    with pytest.raises(CapacityExceeded):
        cache.insert(K(0, 2))
    with pytest.raises(ValueError):
        cache.insert(K(0, 0))


def test_cache_global_mode_shares_slots():
    cache = CacheState(2, 3, GLOBAL)
    cache.insert(K(0, 0))
    cache.insert(K(2, 0))
    assert cache.is_full(cache.pool_of(K(1, 5)))
    assert cache.lru_victim(0) == K(0, 0)


def test_lru_victim_skips_in_flight():
    cache = CacheState(2, 1)
    cache.insert(K(0, 0), ready_at=5.0)
    cache.insert(K(0, 1), ready_at=1.0)
    assert cache.lru_victim(0, now=2.0) == K(0, 1)
    assert cache.lru_victim(0, now=0.5) is None


def test_victim_belady_examples():
    a, b = K(0, 0), K(0, 1)
    cache = CacheState(2, 1)
    cache.insert(a)
    cache.insert(b)
    elb = build_elb([[[7]], [[0]], [[9]], [[1]]], 4)
    assert select_victim_lookahead(cache, elb, 1) == b
    only_a = build_elb([[[0]], [[3]]], 2)
    assert select_victim_lookahead(cache, only_a, 0) == b


def test_victim_tie_break_prefers_larger_key():
    cache = CacheState(3, 2, GLOBAL)
    for key in (K(0, 3), K(1, 0), K(1, 2)):
        cache.insert(key)
    empty = build_elb([[[0], [5]]], 1)
    assert select_victim_lookahead(cache, empty, 0) == K(1, 2)


def test_victim_empty_cache():
    with pytest.raises(EmptyCache):
        select_victim_lookahead(CacheState(1, 1), build_elb([[[0]]], 1), 0)


def belady_replay(seq, capacity):
    cache = CacheState(capacity, 1)
    elb = build_elb([[[e]] for e in seq], len(seq))
    misses = 0
    for j, e in enumerate(seq):
        key = K(0, e)
        if key in cache:
            cache.touch(key)
            continue
        misses += 1
        if cache.is_full(0):
            cache.evict(select_victim_lookahead(cache, elb, j + 1))
        cache.insert(key)
    return misses


def optimal_misses(seq, capacity):
    """Exhaustive search over every eviction choice."""

    @lru_cache(maxsize=None)
    def go(j, resident):
        if j == len(seq):
            return 0
        e = seq[j]
        if e in resident:
            return go(j + 1, resident)
        if len(resident) < capacity:
            return 1 + go(j + 1, resident | {e})
        return 1 + min(go(j + 1, (resident - {v}) | {e}) for v in resident)

    return go(0, frozenset())


def test_belady_equals_exhaustive_small():
    for n in range(0, 6):
        for seq in itertools.product(range(3), repeat=n):
            for cap in (1, 2):
                assert belady_replay(seq, cap) == optimal_misses(seq, cap), (seq, cap)


@settings(max_examples=200, deadline=None)
@given(seq=st.lists(st.integers(0, 5), max_size=12), cap=st.integers(1, 4))
def test_belady_equals_exhaustive_random(seq, cap):
    assert belady_replay(tuple(seq), cap) == optimal_misses(tuple(seq), cap)


def test_victim_is_deterministic():
    rng = random.Random(4)
    elb, _ = random_elb(rng, 5, 2, 6, 2)
    cache = CacheState(4, 2, GLOBAL)
    for key in (K(0, 1), K(1, 1), K(0, 5), K(1, 4)):
        cache.insert(key)
    assert len({select_victim_lookahead(cache, elb, 2) for _ in range(5)}) == 1


def test_step_coverage_examples():
    cache = CacheState(3, 1)
    for e in (1, 2, 3):
        cache.insert(K(0, e))
    assert step_coverage(cache, {K(0, 2), K(0, 3), K(0, 4)}) == pytest.approx(2 / 3)
    assert step_coverage(cache, {K(0, 1), K(0, 2)}) == 1.0
    with pytest.raises(EmptyRequired):
        step_coverage(cache, set())


@settings(max_examples=80, deadline=None)
@given(res=st.sets(st.integers(0, 15)), req=st.sets(st.integers(0, 15), min_size=1))
def test_step_coverage_oracle(res, req):
    resident = {K(0, e) for e in res}
    required = {K(0, e) for e in req}
    assert step_coverage(resident, required) == len(res & req) / len(req)


def test_entropy_weighted_capacities():
    trace = generate_synthetic_trace(ModelShape(4, 16, 2), 400, FidelityStats(1, 0, 0), 0.5, skew=1.5, seed=3)
    caps = entropy_weighted_capacities(trace, 6)
    assert sum(caps.values()) == 24
    assert all(c >= 2 for c in caps.values())


# --- policies ------------------------------------------------------------------------


def run_requests(policy, seq, capacity, elb=None, rows=None):
    cache = CacheState(capacity, 1)
    hits = []
    for j, e in enumerate(seq):
        ctx = StepContext(elb, rows[j] if rows else j) if elb is not None else None
        hits.append(policy_step(policy, cache, K(0, e), ctx).hit)
        cache.check()
    return hits


def test_lru_abcabc():
    assert run_requests(Policy.LRU, [0, 1, 2, 0, 1, 2], 3) == [False] * 3 + [True] * 3


def test_lru_thrashes_on_cycle_longer_than_capacity():
    assert sum(run_requests(Policy.LRU, [0, 1, 2, 3] * 3, 3)) == 0


def test_lookahead_beats_lru_on_cycle():
    seq = [0, 1, 2, 3] * 3
    elb = build_elb([[[e]] for e in seq], len(seq))
    assert sum(run_requests(Policy.LOOKAHEAD, seq, 3, elb)) > 0


@pytest.mark.parametrize("policy", list(Policy))
def test_enough_capacity_hits_after_first_touch(policy):
    seq = [0, 3, 1, 0, 3, 2, 1, 2]
    elb = build_elb([[[e]] for e in seq], len(seq))
    hits = run_requests(policy, seq, 4, elb)
    seen = set()
    for e, h in zip(seq, hits):
        if e in seen:
            assert h
        seen.add(e)


def test_speculative_perfect_predictions_cover_everything():
    rng = random.Random(7)
    k, L, N, top_k = 4, 3, 16, 2
    rows = [[rng.sample(range(N), top_k) for _ in range(L)] for _ in range(k)]
    elb = build_elb(rows, k, num_layers=L)
    union = max(len({e for r in rows for e in r[l]}) for l in range(L))
    cache = CacheState(union, L)
    for i in range(k):
        for l in range(L):
            for e in rows[i][l]:
                assert policy_step("speculative", cache, K(l, e), StepContext(elb, i)).hit
    cache.check()


def test_single_prefetch_hits_own_prediction():
    elb = build_elb([[[5], [6]]], 1)
    cache = CacheState(1, 2)
    assert policy_step("single_later", cache, K(0, 5), StepContext(elb, 0)).hit
    sooner = CacheState(1, 2)
    assert not policy_step("single_sooner", sooner, K(0, 5), StepContext(elb, 0)).hit
    # the sooner variant fetched layer 1 while layer 0 ran
    assert policy_step("single_sooner", sooner, K(1, 6), StepContext(elb, 0)).hit


def test_policy_parse_and_errors():
    assert Policy.parse("Lookahead-Aware") is Policy.LOOKAHEAD
    assert Policy.parse("single_prefetch_sooner") is Policy.SINGLE_SOONER
    with pytest.raises(UnknownPolicy):
        Policy.parse("mru")
    with pytest.raises(ValueError):
        policy_step("speculative", CacheState(1, 1), K(0, 0))


@settings(max_examples=60, deadline=None)
@given(
    seed=st.integers(0, 10**6),
    policy=st.sampled_from(list(Policy)),
    cap=st.integers(1, 4),
)
def test_capacity_never_exceeded(seed, policy, cap):
    rng = random.Random(seed)
    k, L = 5, 2
    drafts = [[rng.sample(range(6), 1) for _ in range(L)] for _ in range(k)]
    elb = build_elb(drafts, k, num_layers=L)
    cache = CacheState(cap, L)
    for i in range(k):
        for l in range(L):
            policy_step(policy, cache, K(l, rng.randrange(6)), StepContext(elb, i))
            cache.check()
            for pool in cache.pools.values():
                assert len(pool) <= cap


# --- reorder -------------------------------------------------------------------------


def test_reorder_example():
    plan = reorder_verification([1, 2, 3], [[[10]], [[11]], [[10]]])
    assert plan.layers == (((10, (1, 3)), (11, (2,))),)
    assert plan.to_json() == [[[10, [1, 3]], [11, [2]]]]


def test_reorder_single_token():
    plan = reorder_verification([0], [[[4, 2], [1, 3]]])
    assert plan.layers == (((2, (0,)), (4, (0,))), ((1, (0,)), (3, (0,))))
    assert plan.requests() == [K(0, 2), K(0, 4), K(1, 1), K(1, 3)]


def test_reorder_mapping_and_errors():
    plan = reorder_verification([5, 6], {5: [[1]], 6: [[0]]})
    assert plan.layers == (((0, (6,)), (1, (5,))),)
    with pytest.raises(IncompleteRouting):
        reorder_verification([5, 7], {5: [[1]]})
    with pytest.raises(IncompleteRouting):
        reorder_verification([0, 1], [[[1]]])
    with pytest.raises(IncompleteRouting):
        reorder_verification([0, 1], [[[1]], [[1], [2]]])


@settings(max_examples=80, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(1, 8), L=st.integers(1, 3))
def test_reorder_is_a_permutation(seed, n, L):
    rng = random.Random(seed)
    window = list(range(100, 100 + n))
    routing = [[rng.sample(range(8), 3) for _ in range(L)] for _ in range(n)]
    plan = reorder_verification(window, routing)
    flat = plan.flatten()
    expected = sorted((l, p, e) for p, r in zip(window, routing) for l in range(L) for e in r[l])
    assert sorted(flat) == expected
    for groups in plan.layers:
        ids = [e for e, _ in groups]
        assert ids == sorted(ids) and len(ids) == len(set(ids))
        for _, ps in groups:
            assert list(ps) == sorted(ps)

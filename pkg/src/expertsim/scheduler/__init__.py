from .cache import (
    GLOBAL,
    PER_LAYER,
    CacheState,
    CapacityExceeded,
    EmptyCache,
    EmptyRequired,
    entropy_weighted_capacities,
    furthest_use_victim,
    select_victim_lookahead,
    step_coverage,
)
from .elb import ElbEntry, ExpertLookaheadBuffer, RangeOutOfBounds, ShapeMismatch, build_elb, predicted_union
from .policies import Policy, StepContext, StepResult, UnknownPolicy, policy_step
from .prefetch import DEFAULT_PHASES, PrefetchEntry, PrefetchPlan, plan_prefetch, token_phase
from .reorder import ExecutionPlan, IncompleteRouting, reorder_verification

__all__ = [
    "GLOBAL",
    "PER_LAYER",
    "CacheState",
    "CapacityExceeded",
    "EmptyCache",
    "EmptyRequired",
    "entropy_weighted_capacities",
    "furthest_use_victim",
    "select_victim_lookahead",
    "step_coverage",
    "ElbEntry",
    "ExpertLookaheadBuffer",
    "RangeOutOfBounds",
    "ShapeMismatch",
    "build_elb",
    "predicted_union",
    "Policy",
    "StepContext",
    "StepResult",
    "UnknownPolicy",
    "policy_step",
    "DEFAULT_PHASES",
    "PrefetchEntry",
    "PrefetchPlan",
    "plan_prefetch",
    "token_phase",
    "ExecutionPlan",
    "IncompleteRouting",
    "reorder_verification",
]

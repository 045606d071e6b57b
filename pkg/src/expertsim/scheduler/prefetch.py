"""Three-phase prefetch planning over a lookahead buffer.

Draft token ``i`` of a ``k``-token window falls in

* phase 1 when ``i < f1*k``: no transfers, resident predictions are counted
  as primed hits;
* phase 2 when ``f1*k <= i < f2*k``: at most ``budget`` transfers, chosen by
  ``confidence * (k - first_use) / k``;
* phase 3 otherwise: every predicted key not yet resident or scheduled.

Only rows ``0..i`` are visible when the entries for token ``i`` are chosen,
so a plan can be executed while the buffer is still being filled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

from ..trace import ExpertKey
from .elb import ExpertLookaheadBuffer

DEFAULT_PHASES = (0.25, 0.75)


class PrefetchEntry(NamedTuple):
    issue_after: int
    key: ExpertKey
    phase: int


@dataclass
class PrefetchPlan:
    entries: list[PrefetchEntry] = field(default_factory=list)
    primed: list[ExpertKey] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def keys(self) -> list[ExpertKey]:
        return [e.key for e in self.entries]

    def batches(self) -> list[tuple[int, list[ExpertKey]]]:
        """Entries grouped by issue point, in issue order."""
        out: list[tuple[int, list[ExpertKey]]] = []
        for e in self.entries:
            if out and out[-1][0] == e.issue_after:
                out[-1][1].append(e.key)
            else:
                out.append((e.issue_after, [e.key]))
        return out

    def to_json(self) -> dict:
        return {
            "entries": [[e.issue_after, [e.key.layer, e.key.expert], e.phase] for e in self.entries],
            "primed": [[k.layer, k.expert] for k in self.primed],
        }


def token_phase(i: int, k: int, phases: tuple[float, float]) -> int:
    f1, f2 = phases
    if i < f1 * k:
        return 1
    if i < f2 * k:
        return 2
    return 3


def plan_prefetch(
    elb: ExpertLookaheadBuffer,
    resident: Iterable[ExpertKey],
    bandwidth_budget: float = math.inf,
    phase_boundaries: tuple[float, float] = DEFAULT_PHASES,
) -> PrefetchPlan:
    f1, f2 = phase_boundaries
    if not 0.0 <= f1 <= f2 <= 1.0:
        raise ValueError(f"phase boundaries must satisfy 0 <= f1 <= f2 <= 1, got {phase_boundaries}")
    if bandwidth_budget < 0:
        raise ValueError("bandwidth budget must be >= 0")
    resident = set(resident)
    k = elb.filled
    first_use: dict[ExpertKey, int] = {}
    conf: dict[ExpertKey, float] = {}
    plan = PrefetchPlan()
    pending: list[ExpertKey] = []
    primed: set[ExpertKey] = set()

    for i in range(k):
        for key, entry in zip(elb.keys_at(i), (e for cell in elb.rows[i] for e in cell)):
            if key not in first_use:
                first_use[key] = i
                conf[key] = entry.confidence_score
                if key not in resident:
                    pending.append(key)
            elif entry.confidence_score > conf[key]:
                conf[key] = entry.confidence_score

        phase = token_phase(i, k, phase_boundaries)
        if phase == 1:
            for key in elb.keys_at(i):
                if key in resident and key not in primed:
                    primed.add(key)
                    plan.primed.append(key)
            continue
        if phase == 2:
            pending.sort(key=lambda key: (-conf[key] * (k - first_use[key]) / k, first_use[key], key))
            n = len(pending) if math.isinf(bandwidth_budget) else int(bandwidth_budget)
            chosen, pending = pending[:n], pending[n:]
        else:
            pending.sort(key=lambda key: (first_use[key], key))
            chosen, pending = pending, []
        plan.entries.extend(PrefetchEntry(i, key, phase) for key in chosen)
    return plan

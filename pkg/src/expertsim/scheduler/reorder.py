from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

from ..trace import ExpertKey


class IncompleteRouting(ValueError):
    pass


@dataclass(frozen=True)
class ExecutionPlan:
    """Per layer, experts in ascending id with the positions routed to each."""

    layers: tuple[tuple[tuple[int, tuple[int, ...]], ...], ...]

    def requests(self) -> list[ExpertKey]:
        """Expert fetch order implied by the plan: layer by layer, expert groups in order."""
        return [ExpertKey(l, e) for l, groups in enumerate(self.layers) for e, _ in groups]

    def flatten(self) -> list[tuple[int, int, int]]:
        return [(l, pos, e) for l, groups in enumerate(self.layers) for e, ps in groups for pos in ps]

    def to_json(self) -> list:
        return [[[e, list(ps)] for e, ps in groups] for groups in self.layers]


def reorder_verification(
    window: Sequence[int],
    routing: Mapping[int, Sequence[Sequence[int]]] | Sequence[Sequence[Sequence[int]]],
) -> ExecutionPlan:
    """Group the window's tokens by expert so each expert is visited once per layer.

    ``routing[pos][layer]`` lists the experts token ``pos`` uses at ``layer``;
    a sequence is indexed by offset within ``window``, a mapping by position.
    """
    if isinstance(routing, Mapping):
        rows = []
        for pos in window:
            if pos not in routing:
                raise IncompleteRouting(f"no routing for token {pos}")
            rows.append(routing[pos])
    else:
        if len(routing) < len(window):
            raise IncompleteRouting(f"routing covers {len(routing)} of {len(window)} tokens")
        rows = list(routing[: len(window)])
    if not rows:
        return ExecutionPlan(())
    num_layers = len(rows[0])
    for pos, per_layer in zip(window, rows):
        if len(per_layer) != num_layers:
            raise IncompleteRouting(f"token {pos} does not cover every layer")
    layers = []
    for l in range(num_layers):
        groups: dict[int, list[int]] = {}
        for pos, per_layer in zip(window, rows):
            for e in per_layer[l]:
                if e in groups:
                    groups[e].append(pos)
                else:
                    groups[e] = [pos]
        layers.append(tuple([(e, tuple(groups[e])) for e in sorted(groups)]))
    return ExecutionPlan(tuple(layers))

"""Expert lookahead buffer built from draft-model routing predictions."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

from ..trace import ExpertKey


class ShapeMismatch(ValueError):
    pass


class RangeOutOfBounds(IndexError):
    pass


class ElbEntry(NamedTuple):
    expert_id: int
    confidence_score: float


@dataclass
class ExpertLookaheadBuffer:
    """``k`` x ``num_layers`` grid of predicted experts.

    Rows are appended one draft token at a time; ``filled`` is the number of
    rows available so far. Each cell holds the top_k predicted entries.
    """

    k: int
    num_layers: int
    rows: list[tuple[tuple[ElbEntry, ...], ...]] = field(default_factory=list)
    _row_keys: list[tuple[ExpertKey, ...]] = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        self._row_keys = [
            tuple(ExpertKey(l, e.expert_id) for l, cell in enumerate(row) for e in cell) for row in self.rows
        ]

    @property
    def filled(self) -> int:
        return len(self.rows)

    def append_row(self, cells: Sequence[Sequence[ElbEntry]]) -> None:
        if self.filled >= self.k:
            raise ShapeMismatch(f"ELB already holds {self.k} rows")
        if len(cells) != self.num_layers:
            raise ShapeMismatch(f"row covers {len(cells)} layers, expected {self.num_layers}")
        row = []
        for layer, cell in enumerate(cells):
            ids = [e.expert_id for e in cell]
            if len(set(ids)) != len(ids):
                raise ShapeMismatch(f"layer {layer} cell repeats an expert")
            for e in cell:
                if not 0.0 <= e.confidence_score <= 1.0:
                    raise ShapeMismatch(f"confidence {e.confidence_score} outside [0, 1]")
            row.append(tuple(cell))
        self.rows.append(tuple(row))
        self._row_keys.append(tuple(ExpertKey(l, e.expert_id) for l, cell in enumerate(row) for e in cell))

    def _push(self, row: tuple, keys: tuple[ExpertKey, ...]) -> None:
        # pre-validated row, used by the simulator's per-token cache
        self.rows.append(row)
        self._row_keys.append(keys)

    def keys_at(self, row: int) -> tuple[ExpertKey, ...]:
        """Predicted keys of one draft token, layer-major."""
        return self._row_keys[row]

    def prefix(self, n: int) -> "ExpertLookaheadBuffer":
        return ExpertLookaheadBuffer(self.k, self.num_layers, self.rows[:n])

    def first_use(self, start: int = 0) -> dict[ExpertKey, int]:
        """Earliest row >= ``start`` in which each predicted key appears."""
        out: dict[ExpertKey, int] = {}
        for i in range(start, self.filled):
            for key in self.keys_at(i):
                out.setdefault(key, i)
        return out

    def confidence(self) -> dict[ExpertKey, float]:
        """Highest confidence with which each key was predicted."""
        out: dict[ExpertKey, float] = {}
        for row in self.rows:
            for layer, cell in enumerate(row):
                for e in cell:
                    key = ExpertKey(layer, e.expert_id)
                    if e.confidence_score > out.get(key, -1.0):
                        out[key] = e.confidence_score
        return out


def _normalize(scores: Sequence[float]) -> list[float]:
    total = sum(scores)
    if total <= 0:
        return [1.0] * len(scores)
    return [s / total for s in scores]


def build_elb(
    draft_sets: Sequence[Sequence[Sequence[int]]],
    k: int,
    gate_scores: Sequence[Sequence[Sequence[float]]] | None = None,
    num_layers: int | None = None,
) -> ExpertLookaheadBuffer:
    """Fill an ELB from the first ``k`` tokens of per-layer draft predictions.

    Gate scores, when given, are normalized within each cell; otherwise every
    entry gets confidence 1.0.
    """
    if k < 0:
        raise ShapeMismatch("k must be >= 0")
    if len(draft_sets) < k:
        raise ShapeMismatch(f"need predictions for {k} tokens, got {len(draft_sets)}")
    if num_layers is None:
        num_layers = len(draft_sets[0]) if k else 0
    if gate_scores is not None and len(gate_scores) < k:
        raise ShapeMismatch("gate scores do not cover the draft window")

    elb = ExpertLookaheadBuffer(k, num_layers)
    for i in range(k):
        layers = draft_sets[i]
        if len(layers) != num_layers:
            raise ShapeMismatch(f"token {i} covers {len(layers)} layers, expected {num_layers}")
        cells = []
        for j, experts in enumerate(layers):
            if gate_scores is not None and gate_scores[i] is not None:
                raw = gate_scores[i][j]
                if len(raw) != len(experts):
                    raise ShapeMismatch(f"token {i} layer {j}: scores do not match experts")
                conf = _normalize(raw)
            else:
                conf = [1.0] * len(experts)
            cells.append([ElbEntry(int(e), c) for e, c in zip(experts, conf)])
        elb.append_row(cells)
    return elb


def predicted_union(elb: ExpertLookaheadBuffer, token_range: tuple[int, int] | None = None) -> set[ExpertKey]:
    a, b = token_range if token_range is not None else (0, elb.filled)
    if not 0 <= a <= b <= elb.filled:
        raise RangeOutOfBounds(f"range [{a}, {b}) outside filled prefix {elb.filled}")
    out: set[ExpertKey] = set()
    for i in range(a, b):
        out.update(elb.keys_at(i))
    return out

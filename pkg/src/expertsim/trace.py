"""Expert-activation traces: data model, JSONL I/O, synthesis and statistics.

A trace records, for every generated token, the experts the target model
routed to in each MoE layer, the experts the draft model predicted for the
same position, and whether the drafted token matched the target token.

JSONL layout (one record per line, UTF-8)::

    {"shape":{"L":2,"N":4,"top_k":2,"shared":0,"expert_bytes":1000},"meta":{...}}
    {"pos":0,"target":[[0,[1,3]],[1,[0,2]]],"draft":[[0,[3,1]],[1,[0,2]]],"acc":true}

Token lines may carry an optional ``"conf"`` array shaped like ``"draft"``
holding the draft router's gate scores for the predicted experts.
"""

from __future__ import annotations

import io
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import IO, Iterable, NamedTuple, Sequence

import numpy as np


class TraceError(ValueError):
    """Base class for trace validation failures."""


class MalformedRecord(TraceError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: malformed record: {reason}")
        self.line = line
        self.reason = reason


class ShapeViolation(TraceError):
    def __init__(self, line: int, field: str, reason: str = ""):
        msg = f"line {line}: field {field!r} violates model shape"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)
        self.line = line
        self.field = field


class EmptyTrace(TraceError):
    def __init__(self, reason: str = "trace has no header record"):
        super().__init__(reason)


class LayerOutOfRange(TraceError):
    pass


class InvalidFidelity(TraceError):
    pass


class DegenerateShape(TraceError):
    pass


class ExpertKey(NamedTuple):
    layer: int
    expert: int


@dataclass(frozen=True)
class ModelShape:
    num_moe_layers: int
    experts_per_layer: int
    top_k: int
    shared_experts: int = 0
    expert_size_bytes: int = 1

    def __post_init__(self):
        if min(self.num_moe_layers, self.experts_per_layer, self.top_k, self.expert_size_bytes) < 1:
            raise ValueError(f"model shape counts must be >= 1: {self}")
        if self.shared_experts < 0:
            raise ValueError("shared_experts must be >= 0")
        if self.top_k > self.experts_per_layer:
            raise ValueError(f"top_k={self.top_k} exceeds experts_per_layer={self.experts_per_layer}")

    def to_json(self) -> dict:
        return {
            "L": self.num_moe_layers,
            "N": self.experts_per_layer,
            "top_k": self.top_k,
            "shared": self.shared_experts,
            "expert_bytes": self.expert_size_bytes,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ModelShape":
        return cls(
            num_moe_layers=obj["L"],
            experts_per_layer=obj["N"],
            top_k=obj["top_k"],
            shared_experts=obj.get("shared", 0),
            expert_size_bytes=obj.get("expert_bytes", 1),
        )


# Published model shapes; expert bytes assume 16-bit gate/up/down matrices.
PRESET_SHAPES = {
    "phi-3.5-moe": ModelShape(32, 8, 2, 0, 3 * 4096 * 6400 * 2),
    "qwen1.5-moe": ModelShape(24, 60, 4, 1, 3 * 2048 * 1408 * 2),
    "deepseek-v2-lite": ModelShape(26, 64, 6, 1, 3 * 2048 * 1408 * 2),
}


@dataclass(frozen=True)
class TokenRecord:
    position: int
    target_sets: tuple[tuple[int, ...], ...]
    draft_sets: tuple[tuple[int, ...], ...]
    draft_accepted: bool
    draft_scores: tuple[tuple[float, ...], ...] | None = None


@dataclass
class Trace:
    shape: ModelShape
    tokens: list[TokenRecord]
    metadata: dict[str, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.tokens)

    def validate(self) -> None:
        for i, tok in enumerate(self.tokens):
            if tok.position != i:
                raise ShapeViolation(i + 2, "pos", f"expected {i}, got {tok.position}")
            _check_token(tok, self.shape, i + 2)


@dataclass(frozen=True)
class FidelityStats:
    hard_rate: float
    soft_rate: float
    mismatch_rate: float

    def __post_init__(self):
        rates = (self.hard_rate, self.soft_rate, self.mismatch_rate)
        if any(r < 0 or r > 1 for r in rates):
            raise InvalidFidelity(f"fidelity rates must lie in [0, 1]: {rates}")
        if abs(math.fsum(rates) - 1.0) > 1e-9:
            raise InvalidFidelity(f"fidelity rates must sum to 1, got {math.fsum(rates)!r}")


def _check_token(tok: TokenRecord, shape: ModelShape, line: int) -> None:
    L, N, k = shape.num_moe_layers, shape.experts_per_layer, shape.top_k
    for name, sets in (("target", tok.target_sets), ("draft", tok.draft_sets)):
        if len(sets) != L:
            raise ShapeViolation(line, name, f"covers {len(sets)} layers, expected {L}")
        for layer, experts in enumerate(sets):
            if len(experts) != k:
                raise ShapeViolation(line, name, f"layer {layer} has {len(experts)} experts, expected {k}")
            if len(set(experts)) != k:
                raise ShapeViolation(line, name, f"layer {layer} repeats an expert")
            for e in experts:
                if not 0 <= e < N:
                    raise ShapeViolation(line, name, f"layer {layer} expert {e} outside [0, {N})")
    if tok.draft_scores is not None:
        if len(tok.draft_scores) != L or any(len(s) != k for s in tok.draft_scores):
            raise ShapeViolation(line, "conf", "gate scores must mirror the draft sets")
        if any(s < 0 or not math.isfinite(s) for row in tok.draft_scores for s in row):
            raise ShapeViolation(line, "conf", "gate scores must be finite and non-negative")


def _layered(value, line: int, name: str, num_layers: int) -> list:
    """Decode ``[[layer, [...]], ...]`` into a dense per-layer list."""
    if not isinstance(value, list):
        raise MalformedRecord(line, f"{name!r} must be an array")
    out: list = [None] * num_layers
    for item in value:
        if not (isinstance(item, list) and len(item) == 2 and isinstance(item[1], list)):
            raise MalformedRecord(line, f"{name!r} entries must be [layer, [values...]]")
        layer, vals = item
        if not isinstance(layer, int) or isinstance(layer, bool):
            raise MalformedRecord(line, f"{name!r} layer index must be an integer")
        if not 0 <= layer < num_layers:
            raise ShapeViolation(line, name, f"layer {layer} outside [0, {num_layers})")
        if out[layer] is not None:
            raise ShapeViolation(line, name, f"layer {layer} listed twice")
        out[layer] = vals
    if any(v is None for v in out):
        raise ShapeViolation(line, name, "does not cover every layer")
    return out


def _int_sets(rows: list, line: int, name: str) -> tuple[tuple[int, ...], ...]:
    for row in rows:
        if any(not isinstance(e, int) or isinstance(e, bool) for e in row):
            raise MalformedRecord(line, f"{name!r} expert ids must be integers")
    return tuple(tuple(row) for row in rows)


def parse_trace(stream: IO[bytes] | IO[str] | bytes | str) -> Trace:
    """Parse a JSONL trace, failing on the first bad line."""
    if isinstance(stream, bytes):
        stream = io.BytesIO(stream)
    elif isinstance(stream, str):
        stream = io.StringIO(stream)

    shape: ModelShape | None = None
    meta: dict[str, str] = {}
    tokens: list[TokenRecord] = []
    for lineno, raw in enumerate(stream, start=1):
        if isinstance(raw, bytes):
            try:
                raw = raw.decode("utf-8")
            except UnicodeDecodeError as exc:
                raise MalformedRecord(lineno, f"not UTF-8 ({exc.reason})") from None
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise MalformedRecord(lineno, exc.msg) from None
        if not isinstance(rec, dict):
            raise MalformedRecord(lineno, "record must be a JSON object")

        if shape is None:
            if "shape" not in rec:
                raise MalformedRecord(lineno, "first record must be a header carrying 'shape'")
            try:
                shape = ModelShape.from_json(rec["shape"])
            except (KeyError, TypeError) as exc:
                raise MalformedRecord(lineno, f"bad shape header: {exc}") from None
            except ValueError as exc:
                raise ShapeViolation(lineno, "shape", str(exc)) from None
            meta = {str(k): str(v) for k, v in rec.get("meta", {}).items()}
            continue

        for key in ("pos", "target", "draft", "acc"):
            if key not in rec:
                raise MalformedRecord(lineno, f"missing field {key!r}")
        if not isinstance(rec["acc"], bool):
            raise MalformedRecord(lineno, "'acc' must be true or false")
        if rec["pos"] != len(tokens):
            raise ShapeViolation(lineno, "pos", f"expected {len(tokens)}, got {rec['pos']!r}")
        L = shape.num_moe_layers
        target = _int_sets(_layered(rec["target"], lineno, "target", L), lineno, "target")
        draft = _int_sets(_layered(rec["draft"], lineno, "draft", L), lineno, "draft")
        scores = None
        if rec.get("conf") is not None:
            rows = _layered(rec["conf"], lineno, "conf", L)
            for row in rows:
                if any(not isinstance(s, (int, float)) or isinstance(s, bool) for s in row):
                    raise MalformedRecord(lineno, "'conf' values must be numbers")
            scores = tuple(tuple(float(s) for s in row) for row in rows)
        tok = TokenRecord(rec["pos"], target, draft, rec["acc"], scores)
        _check_token(tok, shape, lineno)
        tokens.append(tok)

    if shape is None:
        raise EmptyTrace()
    return Trace(shape, tokens, meta)


def _token_json(tok: TokenRecord) -> dict:
    rec = {
        "pos": tok.position,
        "target": [[l, list(s)] for l, s in enumerate(tok.target_sets)],
        "draft": [[l, list(s)] for l, s in enumerate(tok.draft_sets)],
        "acc": tok.draft_accepted,
    }
    if tok.draft_scores is not None:
        rec["conf"] = [[l, list(s)] for l, s in enumerate(tok.draft_scores)]
    return rec


def iter_trace_lines(trace: Trace) -> Iterable[str]:
    dump = lambda obj: json.dumps(obj, separators=(",", ":"), ensure_ascii=False)  # noqa: E731
    yield dump({"shape": trace.shape.to_json(), "meta": dict(sorted(trace.metadata.items()))}) + "\n"
    for tok in trace.tokens:
        yield dump(_token_json(tok)) + "\n"


def write_trace(trace: Trace) -> bytes:
    return "".join(iter_trace_lines(trace)).encode("utf-8")


def _layer_log_weights(rng: np.random.Generator, n: int, skew: float) -> np.ndarray:
    # power law over a random ranking so that each layer has its own hot experts
    ranks = rng.permutation(n)
    return -skew * np.log(ranks + 1.0)


def _nth_outsider(sorted_members: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Map ``r`` in [0, N - k) to the r-th expert id absent from each row."""
    out = r.copy()
    for j in range(sorted_members.shape[1]):
        out += out >= sorted_members[:, j]
    return out


def generate_synthetic_trace(
    shape: ModelShape,
    num_tokens: int,
    fidelity: FidelityStats,
    accept_rate: float,
    skew: float = 0.0,
    seed: int = 0,
) -> Trace:
    """Draw a trace whose draft/target agreement follows ``fidelity``.

    Each (token, layer) pair independently becomes a hard match (draft copies
    the target order), a soft match (non-identity permutation of the target
    set) or a mismatch (exactly one expert swapped for a non-target one).
    Target experts are drawn without replacement, in order, from a power-law
    distribution with exponent ``skew`` (Gumbel top-k sampling).
    """
    if not 0.0 <= accept_rate <= 1.0:
        raise ValueError(f"accept_rate must lie in [0, 1], got {accept_rate}")
    if skew < 0:
        raise ValueError(f"skew must be >= 0, got {skew}")
    if num_tokens < 0:
        raise ValueError("num_tokens must be >= 0")
    L, N, k = shape.num_moe_layers, shape.experts_per_layer, shape.top_k
    if fidelity.mismatch_rate > 0 and k == N:
        raise DegenerateShape("top_k == experts_per_layer leaves no expert to mispredict")
    if fidelity.soft_rate > 0 and k == 1:
        raise DegenerateShape("top_k == 1 admits no non-identity reordering")

    rng = np.random.default_rng(seed)
    T = num_tokens
    hard_cut = fidelity.hard_rate
    soft_cut = fidelity.hard_rate + fidelity.soft_rate
    rows = np.arange(T)
    targets = np.empty((L, T, k), dtype=np.int64)
    drafts = np.empty((L, T, k), dtype=np.int64)
    for layer in range(L):
        logw = _layer_log_weights(rng, N, skew)
        keys = logw + rng.gumbel(size=(T, N))
        tgt = np.argsort(-keys, axis=1, kind="stable")[:, :k]
        u = rng.random(T)
        drf = tgt.copy()

        soft = (u >= hard_cut) & (u < soft_cut)
        perm = np.argsort(rng.random((T, k)), axis=1)
        if k > 1:
            identity = (perm == np.arange(k)).all(axis=1)
            perm[identity, 0], perm[identity, 1] = 1, 0
        drf[soft] = np.take_along_axis(tgt, perm, axis=1)[soft]

        miss = u >= soft_cut
        slot = rng.integers(k, size=T)
        outsider = _nth_outsider(np.sort(tgt, axis=1), rng.integers(N - k, size=T) if N > k else np.zeros(T, dtype=np.int64))
        drf[rows[miss], slot[miss]] = outsider[miss]

        targets[layer] = tgt
        drafts[layer] = drf
    accepted = rng.random(T) < accept_rate

    tgt_t = targets.transpose(1, 0, 2).tolist()
    drf_t = drafts.transpose(1, 0, 2).tolist()
    tokens = [
        TokenRecord(
            pos,
            tuple(map(tuple, tgt_t[pos])),
            tuple(map(tuple, drf_t[pos])),
            bool(accepted[pos]),
        )
        for pos in range(T)
    ]
    meta = {
        "source": "synthetic",
        "seed": str(seed),
        "fidelity": f"{fidelity.hard_rate},{fidelity.soft_rate},{fidelity.mismatch_rate}",
        "accept_rate": str(accept_rate),
        "skew": str(skew),
    }
    return Trace(shape, tokens, meta)


def activation_counts(trace: Trace, layer: int) -> Counter:
    if not 0 <= layer < trace.shape.num_moe_layers:
        raise LayerOutOfRange(f"layer {layer} outside [0, {trace.shape.num_moe_layers})")
    counts: Counter = Counter()
    for tok in trace.tokens:
        counts.update(tok.target_sets[layer])
    return counts


def layer_entropy(trace: Trace, layer: int) -> float:
    """Shannon entropy in bits of the layer's target activation histogram."""
    counts = activation_counts(trace, layer)
    if not trace.tokens:
        raise EmptyTrace("entropy of an empty trace is undefined")
    c = np.fromiter(counts.values(), dtype=float)
    p = c / c.sum()
    h = float(-(p * np.log2(p)).sum())
    return max(h, 0.0)


HARD, SOFT, MISMATCH = "hard", "soft", "mismatch"


def match_kind(draft: Sequence[int], target: Sequence[int]) -> str:
    if tuple(draft) == tuple(target):
        return HARD
    if set(draft) == set(target):
        return SOFT
    return MISMATCH


def classify_fidelity(trace: Trace, aggregation: str = "pair") -> FidelityStats:
    """Hard/soft/mismatch rates.

    ``aggregation="pair"`` classifies each (token, layer) pair. With
    ``"token"`` a token is hard only if every layer is hard, a mismatch if
    any layer is, and soft otherwise.
    """
    if not trace.tokens:
        raise EmptyTrace("cannot classify an empty trace")
    counts = Counter()
    for tok in trace.tokens:
        kinds = [match_kind(d, t) for d, t in zip(tok.draft_sets, tok.target_sets)]
        if aggregation == "pair":
            counts.update(kinds)
        elif aggregation == "token":
            if MISMATCH in kinds:
                counts[MISMATCH] += 1
            elif SOFT in kinds:
                counts[SOFT] += 1
            else:
                counts[HARD] += 1
        else:
            raise ValueError(f"unknown aggregation {aggregation!r}")
    total = sum(counts.values())
    hard = counts[HARD] / total
    soft = counts[SOFT] / total
    # derive the last share so that hard + soft + mismatch == 1.0 in floating point
    return FidelityStats(hard, soft, 1.0 - (hard + soft) if counts[MISMATCH] else 0.0)

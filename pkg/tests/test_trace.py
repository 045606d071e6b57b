import io
import json
import math
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from expertsim.trace import (
    PRESET_SHAPES,
    DegenerateShape,
    EmptyTrace,
    FidelityStats,
    InvalidFidelity,
    LayerOutOfRange,
    MalformedRecord,
    ModelShape,
    ShapeViolation,
    TokenRecord,
    Trace,
    classify_fidelity,
    generate_synthetic_trace,
    layer_entropy,
    match_kind,
    parse_trace,
    write_trace,
)

SMALL = ModelShape(2, 4, 2, 0, 10)


def header(shape=SMALL, meta=None):
    return json.dumps({"shape": shape.to_json(), "meta": meta or {}})


def token_line(pos, target, draft, acc=True, **extra):
    rec = {
        "pos": pos,
        "target": [[l, list(s)] for l, s in enumerate(target)],
        "draft": [[l, list(s)] for l, s in enumerate(draft)],
        "acc": acc,
    }
    rec.update(extra)
    return json.dumps(rec)


def test_parse_minimal():
    text = header() + "\n" + token_line(0, [[0, 1], [2, 3]], [[1, 0], [2, 3]]) + "\n"
    trace = parse_trace(text)
    assert len(trace) == 1
    tok = trace.tokens[0]
    assert tok.target_sets == ((0, 1), (2, 3))
    assert tok.draft_sets == ((1, 0), (2, 3))
    assert tok.draft_accepted is True
    assert tok.draft_scores is None


def test_parse_accepts_bytes_and_streams():
    text = header() + "\n" + token_line(0, [[0, 1], [2, 3]], [[0, 1], [2, 3]]) + "\n"
    a = parse_trace(text.encode())
    b = parse_trace(io.BytesIO(text.encode()))
    c = parse_trace(io.StringIO(text))
    assert a.tokens == b.tokens == c.tokens


def test_expert_out_of_range_is_shape_violation():
    text = header() + "\n" + token_line(0, [[0, 4], [2, 3]], [[0, 1], [2, 3]])
    with pytest.raises(ShapeViolation) as err:
        parse_trace(text)
    assert err.value.line == 2
    assert err.value.field == "target"


def test_repeated_expert_rejected():
    text = header() + "\n" + token_line(0, [[1, 1], [2, 3]], [[0, 1], [2, 3]])
    with pytest.raises(ShapeViolation):
        parse_trace(text)


def test_wrong_top_k_rejected():
    text = header() + "\n" + token_line(0, [[0, 1, 2], [2, 3, 0]], [[0, 1], [2, 3]])
    with pytest.raises(ShapeViolation):
        parse_trace(text)


def test_malformed_json_reports_line():
    good = token_line(0, [[0, 1], [2, 3]], [[0, 1], [2, 3]])
    text = "\n".join([header(), good, "{not json"])
    with pytest.raises(MalformedRecord) as err:
        parse_trace(text)
    assert err.value.line == 3


def test_missing_field_is_malformed():
    text = header() + "\n" + json.dumps({"pos": 0, "target": [], "acc": True})
    with pytest.raises(MalformedRecord):
        parse_trace(text)


def test_non_contiguous_positions():
    lines = [header(), token_line(0, [[0, 1], [2, 3]], [[0, 1], [2, 3]]), token_line(2, [[0, 1], [2, 3]], [[0, 1], [2, 3]])]
    with pytest.raises(ShapeViolation) as err:
        parse_trace("\n".join(lines))
    assert err.value.line == 3


def test_empty_stream_raises():
    with pytest.raises(EmptyTrace):
        parse_trace("")


def test_header_only_gives_empty_trace():
    trace = parse_trace(header() + "\n")
    assert trace.tokens == []
    assert write_trace(trace).count(b"\n") == 1


def test_one_token_trace_writes_two_lines():
    trace = generate_synthetic_trace(SMALL, 1, FidelityStats(1, 0, 0), 0.5, seed=1)
    assert write_trace(trace).count(b"\n") == 2


def test_round_trip_ten_tokens():
    trace = generate_synthetic_trace(SMALL, 10, FidelityStats(0.4, 0.4, 0.2), 0.7, seed=3)
    back = parse_trace(write_trace(trace))
    assert back.shape == trace.shape
    assert back.tokens == trace.tokens
    assert back.metadata == trace.metadata


def test_round_trip_with_gate_scores():
    tok = TokenRecord(0, ((0, 1), (2, 3)), ((0, 1), (3, 2)), False, ((0.75, 0.25), (0.5, 0.5)))
    trace = Trace(SMALL, [tok], {"source": "capture"})
    assert parse_trace(write_trace(trace)).tokens == [tok]


def test_write_is_deterministic():
    trace = generate_synthetic_trace(PRESET_SHAPES["qwen1.5-moe"], 50, FidelityStats(0.5, 0.3, 0.2), 0.8, seed=9)
    assert write_trace(trace) == write_trace(trace)


@settings(max_examples=40, deadline=None)
@given(
    L=st.integers(1, 4),
    N=st.integers(2, 9),
    data=st.data(),
    tokens=st.integers(0, 12),
    seed=st.integers(0, 2**31),
)
def test_round_trip_property(L, N, data, tokens, seed):
    k = data.draw(st.integers(2, N))
    shape = ModelShape(L, N, k, 0, 7)
    mismatch = 0.0 if k == N else 0.2
    fid = FidelityStats(0.5, 0.5 - mismatch, mismatch)
    trace = generate_synthetic_trace(shape, tokens, fid, 0.5, seed=seed)
    trace.validate()
    assert parse_trace(write_trace(trace)).tokens == trace.tokens


# --- generator -----------------------------------------------------------------------


def test_generator_is_seeded():
    shape = PRESET_SHAPES["deepseek-v2-lite"]
    fid = FidelityStats(0.441, 0.468, 0.091)
    a = generate_synthetic_trace(shape, 200, fid, 0.8, skew=1.0, seed=5)
    b = generate_synthetic_trace(shape, 200, fid, 0.8, skew=1.0, seed=5)
    c = generate_synthetic_trace(shape, 200, fid, 0.8, skew=1.0, seed=6)
    assert write_trace(a) == write_trace(b)
    assert write_trace(a) != write_trace(c)


def test_hard_only_fidelity_is_exact():
    trace = generate_synthetic_trace(ModelShape(3, 16, 4), 300, FidelityStats(1, 0, 0), 0.5, seed=2)
    stats = classify_fidelity(trace)
    assert stats.hard_rate == 1.0
    assert stats.soft_rate == 0.0 and stats.mismatch_rate == 0.0


def test_fidelity_calibration_5000_tokens():
    fid = FidelityStats(0.441, 0.468, 0.091)
    for seed in (0, 1):
        trace = generate_synthetic_trace(ModelShape(8, 64, 6), 5000, fid, 0.8, seed=seed)
        got = classify_fidelity(trace)
        assert abs(got.hard_rate - 0.441) <= 0.02
        assert abs(got.soft_rate - 0.468) <= 0.02
        assert abs(got.mismatch_rate - 0.091) <= 0.02


def test_mismatch_changes_exactly_one_expert():
    trace = generate_synthetic_trace(ModelShape(4, 10, 3), 400, FidelityStats(0, 0, 1), 0.5, seed=4)
    for tok in trace.tokens:
        for d, t in zip(tok.draft_sets, tok.target_sets):
            assert len(set(d) - set(t)) == 1
            # positions other than the replaced slot keep the target's order
            assert sum(a != b for a, b in zip(d, t)) == 1


def test_soft_is_a_non_identity_permutation():
    trace = generate_synthetic_trace(ModelShape(4, 10, 2), 300, FidelityStats(0, 1, 0), 0.5, seed=4)
    for tok in trace.tokens:
        for d, t in zip(tok.draft_sets, tok.target_sets):
            assert set(d) == set(t) and d != t


def test_acceptance_rate_roughly_matches():
    trace = generate_synthetic_trace(ModelShape(1, 8, 2), 4000, FidelityStats(1, 0, 0), 0.3, seed=8)
    rate = sum(t.draft_accepted for t in trace.tokens) / 4000
    assert abs(rate - 0.3) < 0.03


def test_skew_concentrates_activations():
    shape = ModelShape(1, 16, 2)
    flat = generate_synthetic_trace(shape, 3000, FidelityStats(1, 0, 0), 0.5, skew=0.0, seed=1)
    steep = generate_synthetic_trace(shape, 3000, FidelityStats(1, 0, 0), 0.5, skew=2.0, seed=1)
    assert layer_entropy(steep, 0) < layer_entropy(flat, 0) - 0.5


def test_generator_rejects_bad_inputs():
    with pytest.raises(InvalidFidelity):
        FidelityStats(0.5, 0.5, 0.5)
    with pytest.raises(InvalidFidelity):
        FidelityStats(1.2, -0.2, 0.0)
    with pytest.raises(DegenerateShape):
        generate_synthetic_trace(ModelShape(1, 4, 4), 5, FidelityStats(0.9, 0.0, 0.1), 0.5)
    with pytest.raises(DegenerateShape):
        generate_synthetic_trace(ModelShape(1, 4, 1), 5, FidelityStats(0.9, 0.1, 0.0), 0.5)
    with pytest.raises(ValueError):
        generate_synthetic_trace(SMALL, 5, FidelityStats(1, 0, 0), 1.5)
    with pytest.raises(ValueError):
        generate_synthetic_trace(SMALL, 5, FidelityStats(1, 0, 0), 0.5, skew=-1)


def test_top_k_equals_n_with_hard_and_soft_is_fine():
    trace = generate_synthetic_trace(ModelShape(2, 3, 3), 50, FidelityStats(0.5, 0.5, 0), 0.5, seed=1)
    trace.validate()


def test_model_shape_invariants():
    with pytest.raises(ValueError):
        ModelShape(1, 4, 5)
    with pytest.raises(ValueError):
        ModelShape(0, 4, 2)
    with pytest.raises(ValueError):
        ModelShape(1, 4, 2, shared_experts=-1)


# --- statistics ----------------------------------------------------------------------


def _trace_from_targets(shape, targets):
    toks = [TokenRecord(i, t, t, True) for i, t in enumerate(targets)]
    return Trace(shape, toks)


def test_entropy_single_expert_is_zero():
    shape = ModelShape(1, 8, 1)
    trace = _trace_from_targets(shape, [((0,),)] * 20)
    assert layer_entropy(trace, 0) == 0.0


@pytest.mark.parametrize("n", [8, 60, 64])
def test_entropy_uniform_is_log2_n(n):
    shape = ModelShape(1, n, 1)
    trace = _trace_from_targets(shape, [((e,),) for e in range(n)] * 3)
    assert abs(layer_entropy(trace, 0) - math.log2(n)) <= 1e-9


def test_entropy_matches_histogram_oracle():
    trace = generate_synthetic_trace(ModelShape(3, 8, 2), 500, FidelityStats(1, 0, 0), 0.5, skew=2.0, seed=11)
    for layer in range(3):
        hist = Counter(e for tok in trace.tokens for e in tok.target_sets[layer])
        total = sum(hist.values())
        oracle = -sum(c / total * math.log(c / total, 2) for c in hist.values())
        assert layer_entropy(trace, layer) == pytest.approx(oracle, abs=1e-12)


def test_entropy_errors():
    trace = _trace_from_targets(ModelShape(1, 4, 1), [((0,),)])
    with pytest.raises(LayerOutOfRange):
        layer_entropy(trace, 1)
    with pytest.raises(EmptyTrace):
        layer_entropy(Trace(ModelShape(1, 4, 1), []), 0)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), skew=st.floats(0, 3))
def test_entropy_bounded(seed, skew):
    shape = ModelShape(2, 12, 3)
    trace = generate_synthetic_trace(shape, 30, FidelityStats(1, 0, 0), 0.5, skew=skew, seed=seed)
    for layer in range(2):
        assert 0.0 <= layer_entropy(trace, layer) <= math.log2(12) + 1e-12


def test_match_kind_examples():
    assert match_kind([3, 7, 12, 20], [3, 7, 12, 20]) == "hard"
    assert match_kind([7, 3, 12, 20], [3, 7, 12, 20]) == "soft"
    assert match_kind([3, 7, 12, 21], [3, 7, 12, 20]) == "mismatch"


def test_classify_pair_vs_token_aggregation():
    shape = ModelShape(2, 4, 2)
    toks = [
        TokenRecord(0, ((0, 1), (2, 3)), ((0, 1), (2, 3)), True),  # hard, hard
        TokenRecord(1, ((0, 1), (2, 3)), ((1, 0), (2, 3)), True),  # soft, hard
        TokenRecord(2, ((0, 1), (2, 3)), ((0, 1), (2, 0)), True),  # hard, mismatch
        TokenRecord(3, ((0, 1), (2, 3)), ((1, 0), (0, 3)), True),  # soft, mismatch
    ]
    trace = Trace(shape, toks)
    pair = classify_fidelity(trace)
    assert (pair.hard_rate, pair.soft_rate, pair.mismatch_rate) == (4 / 8, 2 / 8, 2 / 8)
    token = classify_fidelity(trace, "token")
    assert (token.hard_rate, token.soft_rate, token.mismatch_rate) == (1 / 4, 1 / 4, 2 / 4)
    with pytest.raises(ValueError):
        classify_fidelity(trace, "layer")


def test_classify_empty_trace():
    with pytest.raises(EmptyTrace):
        classify_fidelity(Trace(SMALL, []))


@settings(max_examples=60, deadline=None)
@given(
    h=st.integers(0, 10), s=st.integers(0, 10), m=st.integers(0, 10),
    seed=st.integers(0, 1000), aggregation=st.sampled_from(["pair", "token"]),
)
def test_classify_components_sum_to_one_exactly(h, s, m, seed, aggregation):
    total = h + s + m
    if total == 0:
        return
    fid = FidelityStats(h / total, s / total, 1.0 - (h / total + s / total))
    trace = generate_synthetic_trace(ModelShape(3, 8, 3), 25, fid, 0.5, seed=seed)
    got = classify_fidelity(trace, aggregation)
    assert got.hard_rate + got.soft_rate + got.mismatch_rate == 1.0

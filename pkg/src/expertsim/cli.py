"""Command-line front end.

    expertsim gen-trace --shape deepseek-v2-lite --tokens 5000 --out t.jsonl
    expertsim analyze t.jsonl
    expertsim simulate t.jsonl --policy speculative --capacity 24 --out report.json
    expertsim compare t.jsonl --policies lru,speculative --capacities 16,24,32
    expertsim roofline --k-range 1..16

Exit status: 0 on success, 1 on data or I/O errors, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from . import config as cfgmod
from . import perfmodel as pm
from .config import RunConfig
from .perfmodel import GovernorConfig, HardwareProfile, ProfileError
from .scheduler import Policy
from .scheduler.policies import UnknownPolicy
from .sim import GOVERNOR, ConfigError, compare_policies, policy_table_csv, run_simulation
from .trace import (
    FidelityStats,
    TraceError,
    classify_fidelity,
    generate_synthetic_trace,
    layer_entropy,
    match_kind,
    parse_trace,
    write_trace,
)

EXIT_OK, EXIT_DATA, EXIT_USAGE = 0, 1, 2


# --- flag value parsers (argparse turns ArgumentTypeError into exit 2) --------------


def _fidelity(text: str) -> tuple[float, float, float]:
    try:
        h, s, m = (float(x) for x in text.split(","))
        FidelityStats(h, s, m)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected h,s,m summing to 1: {exc}") from None
    return h, s, m


def _capacity(text: str) -> int | None:
    if text.lower() in ("inf", "none", "unlimited"):
        return None
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"capacity must be a positive integer or 'inf', got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError("capacity must be >= 1")
    return value


def _capacities(text: str) -> list[int | None]:
    return [_capacity(t) for t in text.split(",") if t]


def _k_policy(text: str) -> int | str:
    if text == GOVERNOR:
        return text
    try:
        k = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--k takes an integer or '{GOVERNOR}'") from None
    if k < 1:
        raise argparse.ArgumentTypeError("k must be >= 1")
    return k


def _policy(text: str) -> str:
    try:
        return Policy.parse(text).value
    except UnknownPolicy as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _policies(text: str) -> list[str]:
    return [_policy(t) for t in text.split(",") if t]


def _k_range(text: str) -> tuple[int, int]:
    try:
        a, b = (int(x) for x in text.split(".."))
    except ValueError:
        raise argparse.ArgumentTypeError(f"--k-range takes a..b, got {text!r}") from None
    if not 1 <= a <= b:
        raise argparse.ArgumentTypeError("--k-range needs 1 <= a <= b")
    return a, b


def _nonneg(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not value >= 0:
        raise argparse.ArgumentTypeError("value must be >= 0")
    return value


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError("value must be >= 1")
    return value


# --- helpers -------------------------------------------------------------------------


def _load_config(args) -> RunConfig:
    return cfgmod.load(args.config)


def _read_trace(path: str):
    with open(path, "rb") as fh:
        return parse_trace(fh)


def _write_text(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _override_sim(cfg: RunConfig, args) -> RunConfig:
    sim = cfg.sim
    if getattr(args, "policy", None) is not None:
        sim = replace(sim, policy=args.policy)
    if getattr(args, "capacity", False) is not False:
        sim = replace(sim, cache_capacity=args.capacity)
    if getattr(args, "capacity_mode", None) is not None:
        sim = replace(sim, capacity_mode=args.capacity_mode)
    if getattr(args, "entropy_weighting", False):
        sim = replace(sim, entropy_weighting=True)
    if getattr(args, "k", None) is not None:
        sim = replace(sim, k_policy=args.k)
    if getattr(args, "prefetch_budget", None) is not None:
        sim = replace(sim, prefetch_budget=args.prefetch_budget)
    if getattr(args, "rollback", None) is not None:
        sim = replace(sim, rollback_time=args.rollback)
    gov = cfg.governor
    if getattr(args, "k_max", None) is not None:
        gov = replace(gov, k_max=args.k_max)
    if getattr(args, "ttft_budget", None) is not None:
        gov = replace(gov, ttft_budget=args.ttft_budget)
    profile = cfg.profile
    if getattr(args, "profile", None):
        profile = HardwareProfile.load(args.profile)
    out = replace(cfg, sim=sim, governor=gov, profile=profile)
    cfgmod.validate(out)
    return out


# --- commands --------------------------------------------------------------------------


def cmd_gen_trace(args) -> int:
    cfg = _load_config(args)
    g = cfg.generator
    g = replace(
        g,
        shape=args.shape if args.shape is not None else g.shape,
        tokens=args.tokens if args.tokens is not None else g.tokens,
        fidelity=args.fidelity if args.fidelity is not None else g.fidelity,
        accept_rate=args.accept_rate if args.accept_rate is not None else g.accept_rate,
        skew=args.skew if args.skew is not None else g.skew,
        seed=args.seed if args.seed is not None else g.seed,
    )
    cfg = replace(cfg, generator=g)
    cfgmod.validate(cfg)
    trace = generate_synthetic_trace(cfg.shape(), g.tokens, cfg.fidelity(), g.accept_rate, skew=g.skew, seed=g.seed)
    Path(args.out).write_bytes(write_trace(trace))

    stats = classify_fidelity(trace)
    L, N = trace.shape.num_moe_layers, trace.shape.experts_per_layer
    entropies = [layer_entropy(trace, l) for l in range(L)]
    accepted = sum(t.draft_accepted for t in trace.tokens) / len(trace.tokens)
    print(f"wrote {len(trace.tokens)} tokens to {args.out}")
    print(f"fidelity hard={stats.hard_rate:.3f} soft={stats.soft_rate:.3f} mismatch={stats.mismatch_rate:.3f}")
    print(f"entropy mean={sum(entropies) / L:.3f} bits max={math.log2(N):.3f} bits")
    print(f"draft acceptance={accepted:.3f}")
    return EXIT_OK


def _analysis_rows(trace, aggregation: str) -> list[list]:
    L, N = trace.shape.num_moe_layers, trace.shape.experts_per_layer
    counts = [{"hard": 0, "soft": 0, "mismatch": 0} for _ in range(L)]
    for tok in trace.tokens:
        for l in range(L):
            counts[l][match_kind(tok.draft_sets[l], tok.target_sets[l])] += 1
    rows = []
    for l in range(L):
        n = sum(counts[l].values()) or 1
        c = counts[l]
        rows.append([l, layer_entropy(trace, l), math.log2(N), c["hard"] / n, c["soft"] / n, c["mismatch"] / n])
    if trace.tokens:
        total = classify_fidelity(trace, aggregation)
        mean_h = sum(r[1] for r in rows) / L
        rows.append(["all", mean_h, math.log2(N), total.hard_rate, total.soft_rate, total.mismatch_rate])
    return rows


def cmd_analyze(args) -> int:
    trace = _read_trace(args.trace)
    rows = _analysis_rows(trace, args.aggregation)
    header = ["layer", "entropy_bits", "max_bits", "hard", "soft", "mismatch"]
    if args.format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([r[0], *(f"{x:.6f}" for x in r[1:])])
        _write_text(args.out, buf.getvalue())
    else:
        lines = ["{:>6} {:>12} {:>9} {:>7} {:>7} {:>9}".format(*header)]
        for r in rows:
            lines.append("{:>6} {:>12.4f} {:>9.4f} {:>7.3f} {:>7.3f} {:>9.3f}".format(*r))
        _write_text(args.out, "\n".join(lines) + "\n")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _override_sim(_load_config(args), args)
    trace = _read_trace(args.trace)
    report = run_simulation(trace, cfg.sim_config(record_plans=args.dump_plans is not None))
    if args.out:
        Path(args.out).write_text(report.dumps(), encoding="utf-8")
    if args.out_csv:
        Path(args.out_csv).write_text(report.cycles_csv(), encoding="utf-8")
    if args.timeline:
        Path(args.timeline).write_text(report.timeline_csv(), encoding="utf-8")
    if args.dump_plans:
        with open(args.dump_plans, "w", encoding="utf-8") as fh:
            for c in report.cycles:
                rec = {"cycle": c.cycle_index, "prefetch": c.plan, "execution": c.execution}
                fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
    print(f"tokens={report.total_tokens} cycles={len(report.cycles)}")
    print(f"tpot={report.tpot * 1e3:.3f} ms")
    print(f"mean_coverage={report.mean_coverage:.4f}")
    print(f"stall_fraction={report.stall_fraction:.4f}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _override_sim(_load_config(args), args)
    trace = _read_trace(args.trace)
    policies = args.policies or [cfg.sim.policy]
    capacities = args.capacities if args.capacities is not None else [cfg.sim.cache_capacity]
    rows = compare_policies(trace, cfg.sim_config(), policies, capacities, jobs=args.jobs)
    _write_text(args.out, policy_table_csv(rows))
    return EXIT_OK


def cmd_roofline(args) -> int:
    cfg = _load_config(args)
    profile = HardwareProfile.load(args.profile) if args.profile else cfg.profile
    a, b = args.k_range
    model = cfg.acceptance.model(b)
    rate = args.new_per_token

    def estimator(k: int) -> float:
        return rate * k

    points = pm.roofline(profile, model, range(a, b + 1), estimator)
    k_slo = cfg.governor.k_slo
    if k_slo is not None and not a <= k_slo <= b:
        k_slo = None
    k_star = pm.select_k(profile, model, GovernorConfig(a, b, k_slo), estimator)
    _write_text(args.out, pm.roofline_csv(points))
    print(f"k*={k_star}", file=sys.stdout if args.out else sys.stderr)
    return EXIT_OK


# --- parser --------------------------------------------------------------------------


def _sim_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("trace", help="trace JSONL file")
    p.add_argument("--profile", help="hardware profile JSON (overrides the config's profile section)")
    p.add_argument("--capacity", type=_capacity, default=False, help="experts per pool, or 'inf'")
    p.add_argument("--capacity-mode", choices=["per_layer", "global"])
    p.add_argument("--entropy-weighting", action="store_true", help="split capacity by layer entropy")
    p.add_argument("--k", type=_k_policy, help=f"draft length, or '{GOVERNOR}'")
    p.add_argument("--k-max", type=_positive_int)
    p.add_argument("--ttft-budget", type=_nonneg, help="seconds; caps k via first-cycle latency")
    p.add_argument("--prefetch-budget", type=_nonneg)
    p.add_argument("--rollback", type=_nonneg, help="rollback time per rejection, seconds")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="expertsim", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version="%(prog)s 0.1.0")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, func, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help=f"run config JSON (default: ${cfgmod.ENV_VAR})")
        p.set_defaults(func=func)
        return p

    p = command("gen-trace", cmd_gen_trace, "write a synthetic routing trace")
    p.add_argument("--shape", help="preset name or L,N,top_k[,shared[,bytes]]")
    p.add_argument("--tokens", type=_positive_int)
    p.add_argument("--fidelity", type=_fidelity, help="hard,soft,mismatch")
    p.add_argument("--accept-rate", type=float)
    p.add_argument("--skew", type=_nonneg)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = command("analyze", cmd_analyze, "per-layer entropy and draft fidelity")
    p.add_argument("trace")
    p.add_argument("--format", choices=["csv", "table"], default="table")
    p.add_argument("--aggregation", choices=["pair", "token"], default="pair")
    p.add_argument("--out")

    p = command("simulate", cmd_simulate, "replay a trace through the simulator")
    _sim_flags(p)
    p.add_argument("--policy", type=_policy)
    p.add_argument("--out", help="report JSON")
    p.add_argument("--out-csv", help="per-cycle CSV")
    p.add_argument("--timeline", help="per-segment CSV")
    p.add_argument("--dump-plans", help="per-cycle prefetch and execution plans, JSONL")

    p = command("compare", cmd_compare, "coverage and TPOT over policies x capacities")
    _sim_flags(p)
    p.add_argument("--policies", type=_policies, help="comma-separated")
    p.add_argument("--capacities", type=_capacities, help="comma-separated; 'inf' for unlimited")
    p.add_argument("--jobs", type=_positive_int, default=1)
    p.add_argument("--out")

    p = command("roofline", cmd_roofline, "operating points over a range of k")
    p.add_argument("--profile", help="hardware profile JSON")
    p.add_argument("--k-range", type=_k_range, default=(1, 16), help="a..b (default 1..16)")
    p.add_argument("--new-per-token", type=_nonneg, default=0.0,
                   help="new experts fetched per drafted token (default 0)")
    p.add_argument("--out")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (TraceError, ConfigError, ProfileError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

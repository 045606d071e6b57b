"""Trace-driven simulator for speculative MoE decoding with expert offloading."""

from .perfmodel import AcceptanceModel, GovernorConfig, HardwareProfile
from .scheduler import CacheState, Policy
from .sim import SimConfig, SimReport, compare_policies, run_simulation, sweep_k
from .trace import (
    ExpertKey,
    FidelityStats,
    ModelShape,
    TokenRecord,
    Trace,
    classify_fidelity,
    generate_synthetic_trace,
    layer_entropy,
    parse_trace,
    write_trace,
)

__version__ = "0.1.0"

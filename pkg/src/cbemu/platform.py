"""Emulated Cluster-Booster machine description and virtual-time cost model.

All durations are seconds of virtual time.  The configuration file stores
latencies in microseconds and link bandwidth in bits per second; the
in-memory objects use seconds and bytes per second.
"""

from __future__ import annotations

import enum
import json
import math
from decimal import Decimal
from dataclasses import dataclass, field, fields, replace
from typing import Any


class NodeKind(enum.Enum):
    CLUSTER = "cluster"
    BOOSTER = "booster"


class Solver(enum.Enum):
    FIELD = "field"
    PARTICLE = "particle"


class ConfigError(ValueError):
    """Raised for malformed or invalid platform configuration documents."""

    def __init__(self, message: str, keys: list[str] | None = None):
        super().__init__(message)
        self.keys = keys or []


@dataclass(frozen=True)
class ModuleSpec:
    kind: NodeKind
    node_count: int
    cores_per_node: int
    speed_factor_field: float
    speed_factor_particle: float
    mpi_latency: float  # seconds

    def speed_factor(self, solver: Solver) -> float:
        if solver is Solver.FIELD:
            return self.speed_factor_field
        return self.speed_factor_particle


@dataclass(frozen=True)
class InterconnectModel:
    link_bandwidth: float  # bytes/s


@dataclass(frozen=True)
class WorkloadModel:
    """Work units charged per step by the xPic-mini solvers.

    Field work per rank and step is ``field_work_per_cell_iter * cells * cg_iters``;
    particle work is ``particle_work_per_particle * particles``.  One work unit
    takes one second on a module with speed factor 1.
    """

    field_work_per_cell_iter: float
    particle_work_per_particle: float


# Calibrated on the default bench workload (64x64 cells and 16 particles per
# cell per node, CG tolerance 1e-10, about 133 CG iterations per step): the
# field solve on one Cluster node costs about 5% of the particle step on one
# Booster node, roughly 0.8 ms against 15 ms.  See configs/deep_er.json.
DEFAULT_WORKLOAD = WorkloadModel(
    field_work_per_cell_iter=1.46e-9,
    particle_work_per_particle=2.3e-7,
)


def _default_cluster() -> ModuleSpec:
    return ModuleSpec(
        kind=NodeKind.CLUSTER,
        node_count=16,
        cores_per_node=24,
        speed_factor_field=1.0,
        speed_factor_particle=1.0 / 1.35,
        mpi_latency=1.0e-6,
    )


def _default_booster() -> ModuleSpec:
    return ModuleSpec(
        kind=NodeKind.BOOSTER,
        node_count=8,
        cores_per_node=64,
        speed_factor_field=1.0 / 6.0,
        speed_factor_particle=1.0,
        mpi_latency=1.8e-6,
    )


@dataclass(frozen=True)
class PlatformConfig:
    cluster: ModuleSpec = field(default_factory=_default_cluster)
    booster: ModuleSpec = field(default_factory=_default_booster)
    interconnect: InterconnectModel = field(
        default_factory=lambda: InterconnectModel(link_bandwidth=100e9 / 8)
    )
    comm_overhead_fraction: float = 0.035
    workload: WorkloadModel = DEFAULT_WORKLOAD

    def module(self, kind: NodeKind) -> ModuleSpec:
        return self.cluster if kind is NodeKind.CLUSTER else self.booster


def default_config() -> PlatformConfig:
    """The DEEP-ER prototype configuration (16 Cluster, 8 Booster nodes)."""
    return PlatformConfig()


def validate_config(cfg: PlatformConfig) -> list[str]:
    """Return the key paths of every violated invariant (empty list means ok)."""
    bad: list[str] = []
    for name in ("cluster", "booster"):
        mod = getattr(cfg, name)
        if not isinstance(mod.node_count, int) or mod.node_count < 1:
            bad.append(f"{name}.node_count")
        if not isinstance(mod.cores_per_node, int) or mod.cores_per_node < 1:
            bad.append(f"{name}.cores_per_node")
        for key in ("speed_factor_field", "speed_factor_particle", "mpi_latency"):
            value = getattr(mod, key)
            if not _is_finite(value) or value <= 0:
                bad.append(f"{name}.{key}")
    bw = cfg.interconnect.link_bandwidth
    if not _is_finite(bw) or bw <= 0:
        bad.append("interconnect.link_bandwidth")
    frac = cfg.comm_overhead_fraction
    if not _is_finite(frac) or not 0.0 <= frac < 1.0:
        bad.append("comm_overhead_fraction")
    for key in ("field_work_per_cell_iter", "particle_work_per_particle"):
        value = getattr(cfg.workload, key)
        if not _is_finite(value) or value < 0:
            bad.append(f"workload.{key}")
    return bad


def _is_finite(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)


# -- serialization ---------------------------------------------------------

_MODULE_KEYS = {f.name for f in fields(ModuleSpec)} - {"kind"}
_WORKLOAD_KEYS = {f.name for f in fields(WorkloadModel)}
_TOP_KEYS = {"cluster", "booster", "interconnect", "comm_overhead_fraction", "workload"}


def _module_from_doc(base: ModuleSpec, doc: Any, name: str) -> ModuleSpec:
    if not isinstance(doc, dict):
        raise ConfigError(f"'{name}' must be an object", [name])
    unknown = set(doc) - _MODULE_KEYS
    if unknown:
        keys = sorted(f"{name}.{k}" for k in unknown)
        raise ConfigError(f"unknown keys: {', '.join(keys)}", keys)
    updates = dict(doc)
    if "mpi_latency" in updates and _is_finite(updates["mpi_latency"]):
        updates["mpi_latency"] = _from_micros(updates["mpi_latency"])
    return replace(base, **updates)


def load_platform_config(text: str) -> PlatformConfig:
    """Parse a JSON platform document; omitted fields take prototype defaults."""
    try:
        doc = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed config document: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown keys: {', '.join(sorted(unknown))}", sorted(unknown))

    cfg = default_config()
    cluster = _module_from_doc(cfg.cluster, doc.get("cluster", {}), "cluster")
    booster = _module_from_doc(cfg.booster, doc.get("booster", {}), "booster")

    net = doc.get("interconnect", {})
    if not isinstance(net, dict) or set(net) - {"link_bandwidth"}:
        raise ConfigError("'interconnect' accepts only link_bandwidth", ["interconnect"])
    interconnect = cfg.interconnect
    if "link_bandwidth" in net:
        bits = net["link_bandwidth"]
        interconnect = InterconnectModel(bits / 8 if _is_finite(bits) else bits)

    work = doc.get("workload", {})
    if not isinstance(work, dict) or set(work) - _WORKLOAD_KEYS:
        raise ConfigError("'workload' has unknown keys", ["workload"])
    workload = replace(cfg.workload, **work)

    cfg = PlatformConfig(
        cluster=cluster,
        booster=booster,
        interconnect=interconnect,
        comm_overhead_fraction=doc.get("comm_overhead_fraction", cfg.comm_overhead_fraction),
        workload=workload,
    )
    bad = validate_config(cfg)
    if bad:
        raise ConfigError(f"invalid config values: {', '.join(bad)}", bad)
    return cfg


def _module_to_doc(mod: ModuleSpec) -> dict[str, Any]:
    return {
        "node_count": mod.node_count,
        "cores_per_node": mod.cores_per_node,
        "speed_factor_field": mod.speed_factor_field,
        "speed_factor_particle": mod.speed_factor_particle,
        "mpi_latency": _micros(mod.mpi_latency),
    }


def _from_micros(value: float) -> float:
    # decimal shift of the written digits, so "1.8" reads as exactly 1.8e-6
    return float(Decimal(repr(float(value))).scaleb(-6))


def _micros(seconds: float) -> float:
    """A microsecond value that :func:`_from_micros` maps back to ``seconds``."""
    guess = float(Decimal(repr(seconds)).scaleb(6))
    cand = guess
    for _ in range(8):
        if _from_micros(cand) == seconds:
            return cand
        cand = math.nextafter(cand, math.inf if _from_micros(cand) < seconds else -math.inf)
    return guess


def dump_platform_config(cfg: PlatformConfig) -> str:
    doc = {
        "cluster": _module_to_doc(cfg.cluster),
        "booster": _module_to_doc(cfg.booster),
        "interconnect": {"link_bandwidth": cfg.interconnect.link_bandwidth * 8},
        "comm_overhead_fraction": cfg.comm_overhead_fraction,
        "workload": {
            "field_work_per_cell_iter": cfg.workload.field_work_per_cell_iter,
            "particle_work_per_particle": cfg.workload.particle_work_per_particle,
        },
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


# -- cost model ------------------------------------------------------------

def comm_cost(size: int, src: NodeKind, dst: NodeKind, cfg: PlatformConfig) -> float:
    """Virtual seconds to move ``size`` bytes from a ``src`` node to a ``dst`` node."""
    if size < 0:
        raise ValueError("message size must be non-negative")
    latency = max(cfg.module(src).mpi_latency, cfg.module(dst).mpi_latency)
    return latency + size / cfg.interconnect.link_bandwidth


def compute_cost(work: float, kind: NodeKind, solver: Solver, cfg: PlatformConfig) -> float:
    """Virtual seconds to perform ``work`` units of ``solver`` work on a ``kind`` node."""
    if work < 0:
        raise ValueError("work must be non-negative")
    return work / cfg.module(kind).speed_factor(solver)

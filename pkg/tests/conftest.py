import dataclasses
import sys

import pytest

from cbemu import mprt
from cbemu.modsched import Allocation
from cbemu.platform import NodeKind, default_config
from cbemu.xpic import ROLE_BOOSTER, ROLE_MONOLITHIC


def full_alloc(cfg=None) -> Allocation:
    cfg = cfg or default_config()
    return Allocation("test", frozenset(range(cfg.cluster.node_count)),
                      frozenset(range(cfg.booster.node_count)))


def run_mono(params, n, kind=NodeKind.CLUSTER, cfg=None):
    cfg = cfg or default_config()
    rt = mprt.Runtime(cfg)
    rt.init_world(ROLE_MONOLITHIC, n, kind, full_alloc(cfg), params)
    return rt.run()[0]


def run_split(params, n_booster, n_cluster, cfg=None):
    """Returns (booster results, cluster results)."""
    cfg = cfg or default_config()
    alloc = full_alloc(cfg)
    rt = mprt.Runtime(cfg)
    rt.init_world(ROLE_BOOSTER, n_booster, NodeKind.BOOSTER, alloc, params, n_cluster, alloc)
    out = rt.run()
    return out[0], out[1]


def zero_comm(cfg):
    """The perfect-interconnect limit: no latency, infinite bandwidth, no surcharge."""
    return dataclasses.replace(
        cfg,
        cluster=dataclasses.replace(cfg.cluster, mpi_latency=0.0),
        booster=dataclasses.replace(cfg.booster, mpi_latency=0.0),
        interconnect=dataclasses.replace(cfg.interconnect, link_bandwidth=float("inf")),
        comm_overhead_fraction=0.0,
    )


@pytest.fixture
def cfg():
    return default_config()


@pytest.fixture
def alloc(cfg):
    return full_alloc(cfg)


def equivalence_mismatches(params, n):
    """Compare monolithic and split runs with ``n`` ranks per solver.

    Returns a list of human-readable mismatches (empty when bit-identical) and
    the worst per-step charge error seen in either run.
    """
    import numpy as np

    mono = run_mono(params, n)
    boo, clu = run_split(params, n, n)
    bad = []
    for r in range(n):
        m, b, c = mono[r], boo[r], clu[r]
        if m["digests"]["particles"] != b["digests"]["particles"]:
            bad.append(f"rank {r}: particle state differs")
        if m["digests"]["fields"] != c["digests"]["fields"]:
            bad.append(f"rank {r}: field state differs")
        for a, z in zip(m["particles"], b["particles"]):
            if not np.array_equal(a, z):
                bad.append(f"rank {r}: final particle arrays differ")
        for a, z in zip(m["grid"], c["grid"]):
            if not np.array_equal(a, z):
                bad.append(f"rank {r}: final phi/E differ")
        if "rho" in m and not np.array_equal(m["rho"], c["rho"]):
            bad.append(f"rank {r}: rho differs")
    mrec, brec, crec = mono[0]["records"], boo[0]["records"], clu[0]["records"]
    for x, y, z in zip(mrec, brec, crec):
        if x.kinetic != y.kinetic or (x.step > 0 and x.field_energy != z.field_energy):
            bad.append(f"step {x.step}: energies differ")
        if x.step > 0 and x.cg_iters != z.cg_iters:
            bad.append(f"step {x.step}: CG iterations differ")
    worst = max(r.charge_error for res in (mono, boo) for rank in res for r in rank["records"])
    return bad, worst


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.report_line(num))

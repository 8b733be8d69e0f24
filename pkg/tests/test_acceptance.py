"""Acceptance suite: one check per criterion, each reported as a PASS/FAIL line.

Run under pytest (lines appear in the terminal summary) or directly with
``python tests/test_acceptance.py``.
"""

import math
import random
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from conftest import equivalence_mismatches, run_mono, run_split  # noqa: E402
from timing_oracle import scenario_total  # noqa: E402

from cbemu import mprt  # noqa: E402
from cbemu.bench import MODES, Scenario, bench_params, run_scenario, speedup_table  # noqa: E402
from cbemu.ckpt import (  # noqa: E402
    CheckpointBlock,
    CheckpointLevel,
    CheckpointStore,
    CorruptBlock,
    FailureModel,
    container_pack,
    container_unpack,
    plan_interval,
)
from cbemu.cli import main as bench_main  # noqa: E402
from cbemu.modsched import Allocation  # noqa: E402
from cbemu.platform import NodeKind, comm_cost, default_config  # noqa: E402
from cbemu.xpic import SimParams, init_state  # noqa: E402
from cbemu.xpic.fields import neg_laplacian, solve_poisson  # noqa: E402
from cbemu.xpic.particles import boris_push  # noqa: E402
from cbemu.xpic.state import row_blocks  # noqa: E402

CN, BN = NodeKind.CLUSTER, NodeKind.BOOSTER
RESULTS: dict[int, tuple[bool, str]] = {}
_cache: dict = {}


def weak_reports():
    """Default-size runs of every mode at 1, 2, 4 and 8 nodes (shared by 6 and 7)."""
    if "weak" not in _cache:
        cfg = default_config()
        t0 = time.perf_counter()
        reps = {(m, n): run_scenario(Scenario(m, n, bench_params(n)), cfg)
                for m in MODES for n in (1, 2, 4, 8)}
        _cache["weak"] = reps, time.perf_counter() - t0
    return _cache["weak"]


def random_configs(count, seed=20240601):
    rng = random.Random(seed)
    out = []
    for _ in range(count):
        n = rng.randint(1, 4)
        nx = rng.choice([4, 8, 12, 16, 24, 32, 48, 64])
        ny = rng.randint(max(n, 4), 64)
        big = nx * ny > 1024
        steps = rng.randint(0, 8 if big else 50)
        b0 = rng.choice([(0.0, 0.0, 0.0), (0.0, 0.0, 1.0), (0.2, -0.3, 0.6)])
        out.append((SimParams(cells_x=nx, cells_y=ny, particles_per_cell=rng.randint(1, 3),
                              steps=steps, seed=rng.randrange(2**31), b0=b0,
                              vth=rng.choice([0.05, 0.2, 0.5]),
                              cell_size=rng.choice([0.5, 1.0, 1.3])), n))
    return out


def check_1():
    t0 = time.perf_counter()
    configs = random_configs(24)
    bad, worst = [], 0.0
    for params, n in configs:
        mism, w = equivalence_mismatches(params, n)
        worst = max(worst, w)
        bad += [f"{params.cells_x}x{params.cells_y} n={n}: {m}" for m in mism]
    _cache["charge_worst"] = worst
    dt = time.perf_counter() - t0
    ok = not bad and dt <= 120 and len(configs) >= 20
    return ok, f"{len(configs)} configs, {len(bad)} mismatches, {dt:.1f}s" + (
        f"; first: {bad[0]}" if bad else "")


def check_2():
    worst = _cache.get("charge_worst")
    if worst is None:
        worst = max(equivalence_mismatches(p, n)[1] for p, n in random_configs(6))
    params = SimParams(cells_x=16, cells_y=16, particles_per_cell=8, steps=10, seed=9,
                       cell_size=0.7, vth=0.4, b0=(0.0, 0.0, 0.5))
    for res in (run_mono(params, 3), run_mono(params, 2, BN), run_split(params, 2, 2)[0]):
        worst = max(worst, max(r.charge_error for rank in res for r in rank["records"]))
    return worst <= 1e-12, f"worst relative charge error {worst:.2e}"


def _solve_dist(rho, params, n):
    def role(ctx):
        r0, r1 = row_blocks(params.cells_y, ctx.world.size)[ctx.world.rank]
        return solve_poisson(rho[r0:r1], np.zeros((r1 - r0, params.cells_x)), ctx.world, params)

    rt = mprt.Runtime(default_config())
    rt.register_role("acc.solve", role)
    rt.init_world("acc.solve", n, CN, Allocation("a", frozenset(range(16)), frozenset(range(8))))
    out = rt.run()[0]
    return np.concatenate([o[0] for o in out]), out[0][2]


def check_3():
    worst_mode, worst_post = 0.0, 0.0
    params = SimParams(cells_x=16, cells_y=12, cell_size=0.5, solver_tol=1e-10)
    nx, ny, dx = params.cells_x, params.cells_y, params.cell_size
    x, y = np.arange(nx) * dx, np.arange(ny) * dx
    for n in (1, 2, 3, 4):
        for kx, ky in ((1, 0), (0, 1), (2, 3), (5, 4)):
            rho = np.cos(2 * np.pi * kx * x[None, :] / (nx * dx)
                         + 2 * np.pi * ky * y[:, None] / (ny * dx))
            lam = (4 * math.sin(math.pi * kx / nx) ** 2
                   + 4 * math.sin(math.pi * ky / ny) ** 2) / dx**2
            exact = rho / lam
            phi, _ = _solve_dist(rho, params, n)
            err = np.max(np.abs(phi - exact)) / np.max(np.abs(exact))
            worst_mode = max(worst_mode, err / params.solver_tol)
    rng = np.random.default_rng(3)
    for n in (1, 2, 3, 4):
        p = SimParams(cells_x=10, cells_y=8, solver_tol=1e-9)
        rho = rng.normal(size=(8, 10))
        phi, resid = _solve_dist(rho, p, n)
        rhs = rho - rho.mean()
        true = np.linalg.norm(rhs - neg_laplacian(phi, None, 1.0)) / np.linalg.norm(rhs)
        worst_post = max(worst_post, true / p.solver_tol, resid / p.solver_tol)
    # every solve inside a full application run
    app = SimParams(cells_x=16, cells_y=16, particles_per_cell=4, steps=6, seed=1)
    for rank in run_mono(app, 2):
        for r in rank["records"]:
            if r.step > 0:
                worst_post = max(worst_post, r.residual / app.solver_tol)
    ok = worst_mode <= 10 and worst_post <= 1
    return ok, f"mode error {worst_mode:.2f} x tol, residual {worst_post:.2f} x tol"


def check_4():
    rng = np.random.default_rng(4)
    inc = 0.0
    for _ in range(200):
        qm, dt, e = rng.uniform(-3, 3), rng.uniform(0.01, 0.5), rng.uniform(-2, 2, 3)
        v0 = rng.uniform(-1, 1, (1, 3))
        v1 = boris_push(v0, e[None, :], np.zeros(3), qm, dt)
        inc = max(inc, float(np.max(np.abs((v1 - v0) - qm * e * dt))))
    speed = angle = 0.0
    for _ in range(200):
        qm, bz, dt = rng.choice([-1.0, 1.0]), rng.uniform(0.1, 3), rng.uniform(0.01, 0.5)
        v0 = np.array([[rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-1, 1)]])
        v1 = boris_push(v0, np.zeros((1, 3)), np.array([0.0, 0.0, bz]), qm, dt)
        s0 = np.linalg.norm(v0)
        speed = max(speed, abs(np.linalg.norm(v1) - s0) / s0)
        got = math.atan2(v0[0, 0] * v1[0, 1] - v0[0, 1] * v1[0, 0],
                         v0[0, 0] * v1[0, 0] + v0[0, 1] * v1[0, 1])
        angle = max(angle, abs(abs(got) - 2 * math.atan(abs(qm * bz) * dt / 2)))
    ok = inc <= 1e-14 and speed <= 1e-12 and angle <= 1e-12
    return ok, f"E increment {inc:.1e}, speed {speed:.1e}, angle {angle:.1e}"


def check_5():
    cfg = default_config()
    got = [comm_cost(0, CN, CN, cfg), comm_cost(0, BN, BN, cfg), comm_cost(1 << 20, CN, BN, cfg)]
    want = [1.0e-6, 1.8e-6, 1.8e-6 + (1 << 20) / 12.5e9]
    rel = max(abs(g - w) / w for g, w in zip(got, want))
    rounded = round(got[2] * 1e6, 3)
    ok = rel <= 1e-12 and rounded == 85.686
    return ok, (f"{got[0] * 1e6:.6f} / {got[1] * 1e6:.6f} / {got[2] * 1e6:.5f} us, "
                f"max rel err {rel:.1e}")


def check_6():
    reps, _ = weak_reports()
    t = speedup_table([reps[(m, 1)] for m in MODES])
    c, b = t["cluster/cb"], t["booster/cb"]
    fr, pr = t["field_booster_over_cluster"], t["particle_cluster_over_booster"]
    sf, sp = t["exchange_share_field"], t["exchange_share_particle"]
    ok = (1.20 <= c <= 1.40 and 1.10 <= b <= 1.35
          and math.isclose(fr, 6.0, rel_tol=1e-12) and math.isclose(pr, 1.35, rel_tol=1e-12)
          and 0.03 <= sf <= 0.04 and 0.03 <= sp <= 0.04)
    return ok, (f"cluster/cb {c:.3f}, booster/cb {b:.3f}, solver ratios {fr:.6f}/{pr:.6f}, "
                f"exchange share {sf:.2%}/{sp:.2%}")


def check_7():
    reps, secs = weak_reports()
    cfg = default_config()
    t = speedup_table([reps[(m, 8)] for m in MODES])
    eff = {m: reps[(m, 1)].total / reps[(m, 8)].total for m in MODES}
    oracle = max(abs(r.total - scenario_total(r, cfg)) for r in reps.values())
    c, b = t["cluster/cb"], t["booster/cb"]
    ok = (1.25 <= c <= 1.50 and 1.20 <= b <= 1.45
          and eff["cb"] > eff["cluster"] > eff["booster"]
          and 0.80 <= eff["cb"] <= 0.90 and oracle <= 1e-9 and secs <= 60)
    return ok, (f"N=8 cluster/cb {c:.3f}, booster/cb {b:.3f}, efficiency cb {eff['cb']:.3f} "
                f"> cluster {eff['cluster']:.3f} > booster {eff['booster']:.3f}, "
                f"oracle gap {oracle:.1e}s, {secs:.1f}s")


def check_8():
    failures = []

    def child(ctx):
        inter = ctx.get_parent()
        return inter.local_size, inter.remote_size, ctx.world.size, tuple(
            r.gid for r in inter.remote_group.members)

    for p in range(1, 5):
        for c in range(1, 5):
            def parent(ctx, c=c):
                none = ctx.get_parent() is None
                inter = ctx.world.spawn("acc.child", c, BN, ctx.alloc)
                return none, inter.local_size, inter.remote_size, tuple(
                    r.gid for r in inter.local_group.members)

            rt = mprt.Runtime(default_config())
            rt.register_role("acc.parent", parent)
            rt.register_role("acc.child", child)
            rt.init_world("acc.parent", p, CN,
                          Allocation("a", frozenset(range(16)), frozenset(range(8))))
            out = rt.run()
            par, chi = out[0], out[1]
            if not all(x[0] for x in par) or {x[1:3] for x in par} != {(p, c)}:
                failures.append((p, c, "parent"))
            if len(chi) != c or any(x[:3] != (c, p, c) or x[3] != par[0][3] for x in chi):
                failures.append((p, c, "child"))
    return not failures, f"16 (p, c) pairs, {len(failures)} failures"


def check_9():
    from test_modsched import random_walk

    try:
        grants = random_walk(2024, 10_000)
    except AssertionError as exc:
        return False, f"walk failed: {exc}"
    return True, f"10000 ops, {grants} grants, no double allocation"


def check_10():
    problems = []
    with tempfile.TemporaryDirectory() as tmp:
        for nodes in range(2, 9):
            params = SimParams(cells_x=8, cells_y=2 * nodes, particles_per_cell=2, seed=nodes)
            state = {}
            for r in range(nodes):
                _, p = init_state(params, r, nodes)
                state[r] = p.x.astype("<f8").tobytes() + p.v.astype("<f8").tobytes()
            store = CheckpointStore(Path(tmp) / f"b{nodes}", list(range(nodes)))
            store.ckpt_write(state, 1, CheckpointLevel.BUDDY)
            for lost in range(nodes):
                snap = {k: store.local_path(k, 1).read_bytes() for k in range(nodes)}
                snap_b = {k: store.buddy_path(k, 1).read_bytes() for k in range(nodes)}
                _, got = store.ckpt_restart_latest({lost})
                if got != state:
                    problems.append(f"buddy n={nodes} lost={lost}")
                # restore the destroyed node for the next case
                store.local_path(lost, 1).write_bytes(snap[lost])
                prev = (lost - 1) % nodes
                store.buddy_path(prev, 1).write_bytes(snap_b[prev])
            g = CheckpointStore(Path(tmp) / f"g{nodes}", list(range(nodes)))
            g.ckpt_write(state, 1, CheckpointLevel.GLOBAL)
            _, got = g.ckpt_restart_latest(set(range(nodes)))
            if got != state:
                problems.append(f"global n={nodes}")
    blocks = [CheckpointBlock(r, 0, bytes(range(r, r + 40))) for r in range(5)]
    data = container_pack(blocks)
    if container_pack(container_unpack(data)) != data:
        problems.append("container round trip")
    corrupt = bytearray(data)
    corrupt[-3] ^= 0xFF
    try:
        container_unpack(bytes(corrupt))
        problems.append("corruption undetected")
    except CorruptBlock as exc:
        if exc.rank != 4:
            problems.append("corruption blamed on wrong rank")
    fm = FailureModel(node_mtbf=86400.0, checkpoint_cost=12.0)
    for n in (1, 2, 8, 100):
        want = math.sqrt(2 * 12.0 * 86400.0 / n)
        if not math.isclose(plan_interval(fm, n), want, rel_tol=1e-12):
            problems.append(f"interval n={n}")
    return not problems, "2-8 nodes buddy/global restore, container, interval" + (
        f"; failed: {problems[:3]}" if problems else " all exact")


def check_11():
    with tempfile.TemporaryDirectory() as tmp:
        outs = []
        for k in ("a", "b"):
            run = ["run", "--mode", "cb", "--nodes", "4", "--steps", "3",
                   "--out", f"{tmp}/run{k}"]
            scale = ["scale", "--nodes", "1,2", "--cells-per-node", "1024", "--steps", "3",
                     "--out", f"{tmp}/scale{k}"]
            codes = (bench_main(run), bench_main(scale))
            files = {}
            for d in (f"run{k}", f"scale{k}"):
                for p in sorted(Path(tmp, d).iterdir()):
                    files[(d[:-1], p.name)] = p.read_bytes()
            outs.append((codes, files))
    same = outs[0] == outs[1] and outs[0][0] == (0, 0)
    return same, f"{len(outs[0][1])} output files compared byte for byte"


CRITERIA = {
    1: ("split vs monolithic bit-identical", check_1),
    2: ("charge conservation", check_2),
    3: ("Poisson mode and CG residual", check_3),
    4: ("Boris pusher", check_4),
    5: ("cost model anchors", check_5),
    6: ("single-node speedup bracket", check_6),
    7: ("weak-scaling bracket and oracle", check_7),
    8: ("spawn semantics", check_8),
    9: ("scheduler safety", check_9),
    10: ("checkpoint restore", check_10),
    11: ("bench determinism", check_11),
}


def report_line(num: int) -> str:
    ok, detail = RESULTS[num]
    return f"[{'PASS' if ok else 'FAIL'}] {num:2d} {CRITERIA[num][0]}: {detail}"


@pytest.mark.parametrize("num", sorted(CRITERIA))
def test_criterion(num):
    try:
        RESULTS[num] = CRITERIA[num][1]()
    except Exception as exc:  # a crash is a failed criterion, reported like one
        RESULTS[num] = (False, f"{type(exc).__name__}: {exc}")
    print(report_line(num))
    assert RESULTS[num][0], report_line(num)


if __name__ == "__main__":
    failed = 0
    for num in sorted(CRITERIA):
        try:
            RESULTS[num] = CRITERIA[num][1]()
        except Exception as exc:
            RESULTS[num] = (False, f"{type(exc).__name__}: {exc}")
        print(report_line(num), flush=True)
        failed += not RESULTS[num][0]
    sys.exit(1 if failed else 0)

import dataclasses
import math

import pytest

from cbemu.bench import (
    MODES,
    BenchError,
    CheckpointPlan,
    Scenario,
    bench_params,
    emit_results,
    rows_to_csv,
    run_scenario,
    speedup_table,
    weak_scaling,
)
from cbemu.ckpt import CheckpointLevel
from cbemu.platform import default_config
from cbemu.xpic import SimParams

from conftest import zero_comm
from timing_oracle import scenario_total

SMALL = dict(cells_per_node=256, particles_per_cell=2, steps=2)


@pytest.mark.parametrize("mode", MODES)
@pytest.mark.parametrize("nodes", [1, 2, 3, 4])
def test_total_matches_closed_form(mode, nodes):
    cfg = default_config()
    p = SimParams(cells_x=16, cells_y=10, particles_per_cell=2, steps=2, seed=3)
    rep = run_scenario(Scenario(mode, nodes, p), cfg)
    assert rep.total == pytest.approx(scenario_total(rep, cfg), abs=1e-9)


@pytest.mark.parametrize("mode", MODES)
def test_segments_add_up_to_total(mode):
    cfg = default_config()
    rep = run_scenario(Scenario(mode, 2, bench_params(2, **SMALL)), cfg)
    assert rep.field + rep.particle + rep.exchange == pytest.approx(rep.total, abs=1e-9)
    assert rep.field_compute <= rep.field and rep.particle_compute <= rep.particle


def test_modes_agree_on_physics():
    cfg = default_config()
    p = bench_params(2, **SMALL)
    reps = [run_scenario(Scenario(m, 2, p), cfg) for m in MODES]
    assert len({r.final_kinetic for r in reps}) == 1
    assert len({r.final_field_energy for r in reps}) == 1


def test_zero_steps_costs_only_startup():
    rep = run_scenario(Scenario("cluster", 1, bench_params(1, **{**SMALL, "steps": 0})),
                       default_config())
    assert rep.total < 1e-6


def test_oversized_request_fails():
    cfg = default_config()
    with pytest.raises(BenchError):
        run_scenario(Scenario("booster", 10_000, bench_params(10_000, 16, 1, 1)), cfg)


def test_scenario_request_shapes():
    p = bench_params(2, **SMALL)
    assert (Scenario("cb", 2, p).request("j").cluster_nodes,
            Scenario("cb", 2, p).request("j").booster_nodes) == (2, 2)
    assert Scenario("cluster", 2, p).request("j").booster_nodes == 0
    with pytest.raises(ValueError):
        Scenario("gpu", 1, p)


def test_perfect_platform_scales_perfectly():
    rows = weak_scaling(MODES, [1, 2, 4], zero_comm(default_config()), **SMALL)
    for r in rows:
        assert r.efficiency == pytest.approx(1.0, rel=1e-12)
        assert r.speedup == pytest.approx(r.nodes, rel=1e-12)


def test_weak_scaling_table_and_files(tmp_path):
    rows = weak_scaling(MODES, [1, 2, 4, 8], default_config(), **SMALL)
    assert len(rows) == 12
    for r in rows:
        assert 0 < r.efficiency <= 1.0
        assert r.speedup == pytest.approx(r.efficiency * r.nodes)
    emit_results(rows, tmp_path / "a")
    emit_results(rows, tmp_path / "b")
    for name in ("results.csv", "runtime.dat", "efficiency.dat"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    lines = (tmp_path / "a" / "results.csv").read_text().splitlines()
    assert len(lines) == 13 and lines[0].startswith("mode,nodes")
    assert len((tmp_path / "a" / "runtime.dat").read_text().splitlines()) == 5


def test_empty_table_is_header_only(tmp_path):
    assert rows_to_csv([]).count("\n") == 1
    emit_results([], tmp_path)
    assert (tmp_path / "results.csv").read_text().splitlines() == [rows_to_csv([]).strip()]


def test_bad_node_lists():
    with pytest.raises(ValueError):
        weak_scaling(MODES, [2, 4], default_config(), **SMALL)
    with pytest.raises(ValueError):
        bench_params(1, cells_per_node=100 + 1)


def test_speedup_table_identical_reports():
    rep = run_scenario(Scenario("cluster", 1, bench_params(1, **SMALL)), default_config())
    reps = [dataclasses.replace(rep, scenario=dataclasses.replace(rep.scenario, mode=m))
            for m in MODES]
    table = speedup_table(reps)
    for key in ("cluster/cb", "booster/cb", "field_booster_over_cluster",
                "particle_cluster_over_booster"):
        assert table[key] == 1.0
    with pytest.raises(ValueError):
        speedup_table([rep, rep])


def test_per_solver_ratios_and_share():
    cfg = default_config()
    p = bench_params(1, **SMALL)
    table = speedup_table([run_scenario(Scenario(m, 1, p), cfg) for m in MODES])
    assert table["field_booster_over_cluster"] == pytest.approx(6.0, rel=1e-12)
    assert table["particle_cluster_over_booster"] == pytest.approx(1.35, rel=1e-12)
    # tiny segments: the wire time alone exceeds the overhead fraction
    assert table["exchange_share_field"] > 0.035


@pytest.mark.parametrize("mode", ["cluster", "cb"])
def test_checkpoint_plan_writes_epochs(tmp_path, mode):
    cfg = default_config()
    p = bench_params(2, cells_per_node=64, particles_per_cell=1, steps=4)
    probe = run_scenario(Scenario(mode, 2, p), cfg)
    plan = CheckpointPlan(CheckpointLevel.BUDDY, probe.total / 3, str(tmp_path))
    rep = run_scenario(Scenario(mode, 2, p, plan), cfg)
    assert rep.checkpoint_epochs
    assert rep.total == probe.total
    assert list(tmp_path.rglob("*.cbck"))
    assert math.isclose(rep.final_kinetic, probe.final_kinetic, rel_tol=0, abs_tol=0)


def test_trace_lines_only_on_request():
    cfg = default_config()
    p = bench_params(2, **SMALL)
    assert run_scenario(Scenario("cb", 2, p), cfg).trace_lines == []
    lines = run_scenario(Scenario("cb", 2, p), cfg, trace=True).trace_lines
    assert lines and lines == run_scenario(Scenario("cb", 2, p), cfg, trace=True).trace_lines

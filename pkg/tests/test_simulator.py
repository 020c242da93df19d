import json
import math

import pytest
from hypothesis import given, settings, strategies as st

from shardplan.costs import FLOPS_MUON, NUMEL
from shardplan.dp_partition import (
    alpha_balanced_partition,
    atomic_ownership_partition,
    equal_chunk_partition,
)
from shardplan.simulator import (
    FwdBwdProfile,
    NetModel,
    Primitive,
    SimulationError,
    StrategyKind,
    collective_time,
    simulate_dp_step,
    simulate_tp_sc,
    simulate_tp_step,
    summary_csv,
)
from shardplan.tp_schedule import build_micro_groups
from shardplan.workload import ParamSpec, build_workload, layout_from_sizes, load_model_config

GiB = 2**30
FAST = NetModel(latency=0.0, bandwidth=math.inf, intra_latency=0.0, intra_bandwidth=math.inf,
                compute_throughput=1.0)


def plan_for(strategy, layout, cost=NUMEL):
    if strategy == StrategyKind.ASC:
        return atomic_ownership_partition(layout, cost=cost)
    if strategy == StrategyKind.LB_ASC:
        return alpha_balanced_partition(layout, cost=cost)
    return None


def test_ring_example():
    net = NetModel(latency=10e-6, bandwidth=100 * GiB)
    t = collective_time(8 * GiB, "reduce_scatter", 8, net)
    assert t == pytest.approx(10e-6 + 7 / 8 * 8 / 100, rel=1e-12)


def test_all_reduce_is_twice_reduce_scatter():
    net = NetModel(latency=0.0)
    for R in (2, 4, 32):
        assert collective_time(1e9, Primitive.ALL_REDUCE, R, net) == 2 * collective_time(
            1e9, Primitive.REDUCE_SCATTER, R, net)


def test_empty_payload_costs_latency():
    net = NetModel(latency=3e-5)
    for p in Primitive:
        assert collective_time(0, p, 8, net) == 3e-5


def test_unknown_primitive_and_bad_net():
    with pytest.raises(SimulationError):
        collective_time(1, "gossip", 2, NetModel())
    with pytest.raises(SimulationError):
        NetModel(bandwidth=0)
    with pytest.raises(SimulationError):
        NetModel.from_dict({"net": {"warp": 9}})


def test_uniform_work_division():
    layout = layout_from_sizes([[4] * 8], 4)
    total = 32
    sc = simulate_dp_step(layout, None, "SC", NUMEL, FAST)
    lb = simulate_dp_step(layout, plan_for(StrategyKind.LB_ASC, layout), "LB_ASC", NUMEL, FAST)
    assert sc.optimizer_time == total
    assert lb.optimizer_time == total / 4
    assert sum(sc.rank_compute) == 4 * sum(lb.rank_compute)


def test_gradient_traffic_nv_vs_lb():
    w = build_workload(load_model_config("toy"))
    L = w.layout
    nv = simulate_dp_step(L, None, "NV_LAYERWISE", FLOPS_MUON)
    lb = simulate_dp_step(L, plan_for(StrategyKind.LB_ASC, L), "LB_ASC", FLOPS_MUON)
    assert nv.comm_volumes["all_reduce"] == 2 * lb.comm_volumes["reduce_scatter"]
    assert nv.optimizer_comm_time > 0 and nv.optimizer_comm_bytes > 0
    assert lb.optimizer_comm_bytes == 0 and lb.optimizer_comm_time == 0
    assert not [e for e in lb.events if e.phase == "optimizer" and e.channel == "comm"]


def test_nv_all_gather_switch():
    w = build_workload(load_model_config("toy"))
    tl = simulate_dp_step(w.layout, None, "NV_LAYERWISE", redistribution="all_gather")
    assert "all_gather" in tl.comm_volumes and "broadcast" not in tl.comm_volumes


def test_heterogeneous_straggler_ratio():
    layout = layout_from_sizes([[4, 2, 2]], 4)
    asc_plan = atomic_ownership_partition(layout)
    lb_plan = alpha_balanced_partition(layout)
    asc = simulate_dp_step(layout, asc_plan, "ASC", NUMEL, FAST)
    lb = simulate_dp_step(layout, lb_plan, "LB_ASC", NUMEL, FAST)
    assert asc.optimizer_time / lb.optimizer_time == max(asc_plan.rank_loads) / max(lb_plan.rank_loads)


def test_strategy_plan_mismatch():
    layout = layout_from_sizes([[3, 3, 2]], 2)
    with pytest.raises(SimulationError):
        simulate_dp_step(layout, equal_chunk_partition(layout), "LB_ASC")
    with pytest.raises(SimulationError):
        simulate_dp_step(layout, alpha_balanced_partition(layout), "ASC")
    with pytest.raises(SimulationError):
        simulate_dp_step(layout, None, "LB_ASC")


def test_exclude_removes_optimizer_work():
    layout = layout_from_sizes([[4, 4]], 2)
    tl = simulate_dp_step(layout, None, "SC", NUMEL, FAST, exclude=frozenset({0}))
    assert tl.optimizer_time == 4


def test_single_tp_group_equal_loads():
    ps = [ParamSpec(i, f"p{i}", (5,)) for i in range(4)]
    plan = build_micro_groups(ps, NUMEL, 4, c_max=5)
    net = NetModel(intra_latency=0.0, intra_bandwidth=math.inf, compute_throughput=1.0)
    tl = simulate_tp_step(plan, 4, net)
    assert len(plan.groups) == 1
    assert tl.optimizer_time == 5
    computes = [e for e in tl.events if e.channel == "compute"]
    assert {(e.start, e.end) for e in computes} == {(0.0, 5.0)}


def test_tp_sc_redundancy():
    w = build_workload(load_model_config("toy"))
    tasks = w.tp_task_params()
    plan = build_micro_groups(tasks, FLOPS_MUON, 2, c_max=10**9)
    asc = simulate_tp_step(plan, 2, cost=FLOPS_MUON)
    sc = simulate_tp_sc(tasks, 2, cost=FLOPS_MUON)
    assert sum(sc.rank_compute) == 2 * sum(asc.rank_compute)


def test_tp_comm_order():
    ps = [ParamSpec(i, f"p{i}", (8,)) for i in range(6)]
    plan = build_micro_groups(ps, NUMEL, 2, c_max=8)
    tl = simulate_tp_step(plan, 2)
    labels = [e.label for e in tl.events if e.rank == 0 and e.channel == "comm"]
    assert labels == ["G0 gather", "G1 gather", "G0 scatter", "G2 gather", "G1 scatter", "G2 scatter"]


def test_tp_plan_degree_mismatch():
    plan = build_micro_groups([ParamSpec(0, "p", (3,))], NUMEL, 2, c_max=3)
    with pytest.raises(SimulationError):
        simulate_tp_step(plan, 4)


def test_exports(tmp_path):
    w = build_workload(load_model_config("toy"))
    tl = simulate_dp_step(w.layout, plan_for(StrategyKind.LB_ASC, w.layout), "LB_ASC")
    path = tmp_path / "t.json"
    tl.dump_chrome_trace(path)
    data = json.loads(path.read_text())
    assert data["otherData"]["version"] == 1
    assert len(data["traceEvents"]) == len(tl.events)
    text = summary_csv([("lb", tl)])
    assert text.splitlines()[0] == "# format=sim-summary version=1"
    assert text.splitlines()[2].startswith("lb,LB_ASC,")


def _channels_serial(tl):
    by = {}
    for e in tl.events:
        by.setdefault((e.rank, e.channel), []).append(e)
    for evs in by.values():
        evs.sort(key=lambda e: (e.start, e.end))
        for a, b in zip(evs, evs[1:]):
            if a.end > b.start + 1e-12:
                return False
    return True


sizes_st = st.lists(st.lists(st.integers(1, 64), min_size=1, max_size=8), min_size=1, max_size=5)


@settings(max_examples=40)
@given(sizes_st, st.sampled_from([2, 4]), st.sampled_from(list(StrategyKind)),
       st.floats(1e3, 1e9), st.floats(1.1, 10))
def test_simulator_properties(buckets, R, strategy, bw, slow):
    layout = layout_from_sizes(buckets, R)
    plan = plan_for(strategy, layout)
    profile = FwdBwdProfile.proportional(layout, 1e-6)
    fast_net = NetModel(latency=1e-6, bandwidth=bw, compute_throughput=1e6)
    slow_net = NetModel(latency=1e-6, bandwidth=bw / slow, compute_throughput=1e6)
    a = simulate_dp_step(layout, plan, strategy, NUMEL, fast_net, profile)
    b = simulate_dp_step(layout, plan, strategy, NUMEL, slow_net, profile)
    assert b.iteration_time >= a.iteration_time
    compute = sum(profile.forward) + sum(profile.backward)
    comm = sum(e.end - e.start for e in a.events if e.rank == 0 and e.channel == "comm"
               and e.phase != "optimizer")
    assert compute - 1e-12 <= a.fwd_bwd_time <= compute + comm + 1e-12
    assert _channels_serial(a)
    # volume accounting re-derived from parameter bytes
    nbytes = sum(p.nbytes for p in layout.params)
    grad = a.comm_volumes.get("all_reduce", 0) + a.comm_volumes.get("reduce_scatter", 0)
    factor = 2 if strategy in (StrategyKind.SC, StrategyKind.NV_LAYERWISE) else 1
    assert grad == pytest.approx(factor * nbytes * (R - 1) / R)

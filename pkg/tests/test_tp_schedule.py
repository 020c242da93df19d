import itertools

import pytest
from hypothesis import given, strategies as st

from oracles import optimal_makespan
from shardplan.costs import BYTES, FLOPS_MUON, NUMEL
from shardplan.tp_schedule import (
    Assignment,
    MicroGroup,
    MicroGroupPlan,
    UnschedulableError,
    build_micro_groups,
    min_heap_balance,
    naive_micro_groups,
    single_item_groups,
    validate_micro_groups,
)
from shardplan.workload import ParamSpec, build_workload, load_model_config


def items(costs):
    return [ParamSpec(i, f"p{i}", (c,)) for i, c in enumerate(costs)]


def group_costs(plan):
    return [sorted((a.cost for rank in g.assignments for a in rank), reverse=True) for g in plan.groups]


def test_min_heap_example_matches_oracle():
    assign, loads, l_max = min_heap_balance([(c, c) for c in [5, 4, 3, 2, 1]], 2)
    assert sorted(loads, reverse=True) == [8, 7] and l_max == 8
    assert assign[0][:2] == [5, 2]
    assert l_max == optimal_makespan([5, 4, 3, 2, 1], 2)


def test_min_heap_degenerate():
    assert min_heap_balance([], 3) == ([[], [], []], [0, 0, 0], 0)
    assign, loads, l_max = min_heap_balance([(7, "x")], 4)
    assert assign[0] == ["x"] and l_max == 7
    assert min_heap_balance([(c, c) for c in (1, 2, 3)], 1)[2] == 6


def test_rollback_trace():
    plan = build_micro_groups(items([6, 5, 4]), NUMEL, 2, c_max=6)
    assert group_costs(plan) == [[6, 5], [4]]
    assert plan.groups[0].rank_loads == (6, 5)


def test_equal_costs_fill_one_per_rank():
    plan = build_micro_groups(items([3] * 8), NUMEL, 4, c_max=3)
    assert [len(g.param_ids) for g in plan.groups] == [4, 4]
    assert all(g.rank_loads == (3, 3, 3, 3) for g in plan.groups)


def test_unbounded_single_rank():
    plan = build_micro_groups(items([1, 2, 3]), NUMEL, 1, c_max=6)
    assert len(plan.groups) == 1 and plan.groups[0].rank_loads == (6,)


def test_oversized_item_named():
    with pytest.raises(UnschedulableError, match="p1"):
        build_micro_groups(items([2, 9]), NUMEL, 2, c_max=5)


def test_sort_is_cost_then_id_descending():
    plan = build_micro_groups(items([2, 2, 2]), NUMEL, 3, c_max=2)
    assert plan.groups[0].param_ids == [2, 1, 0]


def test_validator_examples():
    ps = items([4, 3, 2])
    plan = build_micro_groups(ps, NUMEL, 2, c_max=5)
    assert validate_micro_groups(plan, ps, NUMEL) == []
    dup = MicroGroup(len(plan.groups), ((Assignment(0, (4,), 4),), ()), (4, 0))
    kinds = [v.kind for v in validate_micro_groups(
        MicroGroupPlan(plan.groups + (dup,), plan.c_max, 2), ps)]
    assert "duplicate" in kinds
    over = MicroGroupPlan(plan.groups, 3, 2)
    assert "capacity" in [v.kind for v in validate_micro_groups(over, ps)]
    missing = MicroGroupPlan(plan.groups[:-1], plan.c_max, 2)
    assert "coverage" in [v.kind for v in validate_micro_groups(missing, ps)]


def test_plan_roundtrip_and_bytes_identity():
    w = build_workload(load_model_config("toy"))
    ps = w.tp_params
    a = build_micro_groups(ps, FLOPS_MUON, w.tp_degree, c_max=10**7)
    b = build_micro_groups(ps, FLOPS_MUON, w.tp_degree, c_max=10**7)
    assert a.dumps() == b.dumps()
    assert MicroGroupPlan.loads(a.dumps()) == a


def test_tp_degree_one_groups_are_trivially_balanced():
    w = build_workload(load_model_config("toy"))
    plan = build_micro_groups(w.tp_task_params(), BYTES, 1, c_max=512 * 2**20)
    assert all(g.imbalance == 0 for g in plan.groups)


def test_baselines_cover_everything():
    ps = items([5, 1, 4, 2, 3, 3])
    for plan in (single_item_groups(ps, NUMEL, 3), naive_micro_groups(ps, NUMEL, 3, c_max=5)):
        assert sorted(plan.param_ids) == list(range(6))
        assert all(g.l_max <= plan.c_max for g in plan.groups)


cost_lists = st.lists(st.integers(1, 20), min_size=1, max_size=10)


@given(cost_lists, st.integers(1, 4), st.integers(0, 40))
def test_group_invariants(costs, R, slack):
    ps = items(costs)
    c_max = max(costs) + slack
    plan = build_micro_groups(ps, NUMEL, R, c_max)
    assert validate_micro_groups(plan, ps, NUMEL) == []
    for g in plan.groups:
        assert g.l_max == max(g.rank_loads)
        assert g.saturation == sum(a.cost for rank in g.assignments for a in rank)
        assert g.l_max <= (4 / 3 - 1 / (3 * R)) * optimal_makespan([a.cost for r in g.assignments for a in r], R) + 1e-9


@given(cost_lists, st.integers(1, 4), st.integers(0, 40))
def test_groups_are_maximal(costs, R, slack):
    """Adding the next sorted item to any finalized group would break the cap."""
    ps = items(costs)
    c_max = max(costs) + slack
    plan = build_micro_groups(ps, NUMEL, R, c_max)
    for g, nxt in zip(plan.groups, plan.groups[1:]):
        # the seed of the next group is its most expensive item (sorted stream)
        seed = max((a for rank in nxt.assignments for a in rank), key=lambda a: (a.cost, a.param_id))
        current = [(a.cost, a.param_id) for rank in g.assignments for a in rank]
        assert min_heap_balance(current + [(seed.cost, seed.param_id)], R)[2] > c_max


def test_exhaustive_small_domain_lpt_bound():
    for n in range(1, 7):
        for costs in itertools.combinations_with_replacement([1, 2, 3, 5], n):
            for R in (2, 3):
                plan = build_micro_groups(items(costs), NUMEL, R, c_max=max(costs) * 2)
                for g in plan.groups:
                    opt = optimal_makespan([a.cost for rank in g.assignments for a in rank], R)
                    assert g.l_max <= (4 / 3 - 1 / (3 * R)) * opt + 1e-9

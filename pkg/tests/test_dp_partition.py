import pytest
from hypothesis import given, strategies as st

from oracles import best_atomic_max_deviation
from shardplan.costs import FLOPS_MUON, NUMEL
from shardplan.dp_partition import (
    ALPHA_BALANCED,
    DpPartitionPlan,
    PlanError,
    alpha_balanced_partition,
    atomic_ownership_partition,
    compute_deficits,
    equal_chunk_partition,
    layerwise_assignment,
    ownership_violations,
    validate_plan,
)
from shardplan.metrics import dp_objectives
from shardplan.workload import build_workload, layout_from_sizes, load_model_config


def kinds(v):
    return [x.kind for x in v]


def test_equal_chunk_examples():
    assert equal_chunk_partition(layout_from_sizes([[16]], 2)).cut_vectors == ((0, 8, 16),)
    plan = equal_chunk_partition(layout_from_sizes([[3, 3, 2]], 2))
    assert plan.cut_vectors == ((0, 4, 8),) and not plan.atomic
    single = equal_chunk_partition(layout_from_sizes([[3, 3, 2]], 1))
    assert single.cut_vectors == ((0, 8),) and single.atomic


def test_equal_chunk_remainder_to_last_rank():
    plan = equal_chunk_partition(layout_from_sizes([[10]], 3))
    assert plan.rank_sizes == ((3, 3, 4),)


def test_atomic_ownership_examples():
    plan = atomic_ownership_partition(layout_from_sizes([[3, 3, 2]], 2))
    assert plan.rank_loads == (6, 2) and plan.atomic
    assert atomic_ownership_partition(layout_from_sizes([[1] * 4], 4)).rank_loads == (1, 1, 1, 1)
    assert atomic_ownership_partition(layout_from_sizes([[4, 2, 2]], 4)).rank_loads == (4, 0, 2, 2)


def test_alpha_single_bucket_trace():
    plan = alpha_balanced_partition(layout_from_sizes([[8, 4, 2, 2]], 2))
    assert plan.cut_vectors == ((0, 8, 16),) and plan.rank_loads == (8, 8)


def test_alpha_two_bucket_trace_is_optimal():
    buckets = [[7, 3], [3, 3]]
    layout = layout_from_sizes(buckets, 2)
    plan = alpha_balanced_partition(layout)
    assert plan.cut_vectors == ((0, 7, 10), (0, 0, 6))
    assert plan.rank_loads == (7, 9)
    j_dp, _ = dp_objectives(plan, layout)
    assert j_dp == 1 == best_atomic_max_deviation(buckets, 2)


def test_alpha_zero_ignores_accumulated_load():
    layout = layout_from_sizes([[5, 5, 1, 1], [6, 6]], 2)
    plan = alpha_balanced_partition(layout, alpha=0.0)
    # each bucket independently aims at half its total
    assert plan.cut_vectors == ((0, 5, 12), (0, 6, 12))


def test_alpha_out_of_range():
    with pytest.raises(PlanError):
        alpha_balanced_partition(layout_from_sizes([[1, 2]], 2), alpha=1.5)


def test_empty_bucket_is_skipped():
    layout = layout_from_sizes([[], [2, 2]], 2)
    plan = alpha_balanced_partition(layout)
    assert plan.cut_vectors[0] == (0, 0, 0)
    assert validate_plan(plan, layout) == []


def test_deficits():
    st_ = compute_deficits([1, 5, 3], 3)
    assert st_.deficits == (2, 0, 0) and st_.d_total == 2
    assert compute_deficits([3, 3], 3).fill_vector() == [0.5, 0.5]


def test_validate_examples():
    layout = layout_from_sizes([[3, 3, 2]], 2)
    bad = DpPartitionPlan(ALPHA_BALANCED, 2, ((0, 9, 8),), (0, 0), ((9, -1),), False)
    assert "monotonicity" in kinds(validate_plan(bad, layout))
    v = validate_plan(equal_chunk_partition(layout), layout)
    assert [(x.kind, "offset 4" in x.detail) for x in v] == [("atomicity", True)]


def test_layerwise_ownership_mismatch_is_detected():
    layout = layout_from_sizes([[1, 5, 1, 5]], 2)
    owners = {0: 1, 1: 0, 2: 1, 3: 0}
    assert kinds(ownership_violations(owners, layout)) == ["data-task-mismatch"]


def test_layerwise_assignment_groups_layers():
    w = build_workload(load_model_config("toy"))
    owners = layerwise_assignment(w.layout, FLOPS_MUON)
    by_layer = {}
    for p in w.layout.params:
        if p.layer is not None:
            by_layer.setdefault(p.layer, set()).add(owners[p.id])
    assert all(len(r) == 1 for r in by_layer.values())


def test_plan_roundtrip():
    layout = layout_from_sizes([[7, 3], [3, 3]], 2)
    plan = alpha_balanced_partition(layout, alpha=0.5, cost=FLOPS_MUON)
    assert DpPartitionPlan.loads(plan.dumps()) == plan
    with pytest.raises(ValueError):
        DpPartitionPlan.from_dict({"format": "other"})


def test_owner_map_needs_atomic_plan():
    layout = layout_from_sizes([[3, 3, 2]], 2)
    with pytest.raises(PlanError):
        equal_chunk_partition(layout).owner_map(layout)
    assert alpha_balanced_partition(layout).owner_map(layout) == {0: 0, 1: 1, 2: 1}


def test_rank_mismatch():
    with pytest.raises(PlanError):
        alpha_balanced_partition(layout_from_sizes([[1, 2]], 2), R=3)


buckets_st = st.lists(st.lists(st.integers(1, 100), min_size=0, max_size=12), min_size=1, max_size=6)


@given(buckets_st, st.sampled_from([1, 2, 3, 4, 8]), st.floats(0, 1))
def test_generated_plans_are_valid_and_conserve(buckets, R, alpha):
    layout = layout_from_sizes(buckets, R)
    total = sum(map(sum, buckets))
    for plan in (alpha_balanced_partition(layout, alpha=alpha), atomic_ownership_partition(layout)):
        assert validate_plan(plan, layout) == []
        assert plan.atomic
        assert sum(plan.rank_loads) == total
        assert all(sum(s) == b.size for s, b in zip(plan.rank_sizes, layout.buckets))


@given(buckets_st, st.sampled_from([2, 3, 4]))
def test_determinism(buckets, R):
    layout = layout_from_sizes(buckets, R)
    assert alpha_balanced_partition(layout) == alpha_balanced_partition(layout)


@given(st.lists(st.lists(st.integers(1, 9), min_size=1, max_size=5), min_size=1, max_size=2),
       st.sampled_from([2, 3]))
def test_alpha_one_never_beats_the_exact_optimum(buckets, R):
    layout = layout_from_sizes(buckets, R)
    j_dp, _ = dp_objectives(alpha_balanced_partition(layout), layout)
    assert j_dp >= best_atomic_max_deviation(buckets, R) - 1e-9


def test_alpha_one_beats_naive_on_most_random_workloads():
    import random

    rng = random.Random(1234)
    wins = 0
    for _ in range(1000):
        buckets = [[rng.randint(1, 1000) for _ in range(rng.randint(1, 40))]
                   for _ in range(rng.randint(1, 8))]
        layout = layout_from_sizes(buckets, rng.choice([2, 4, 8, 16]))
        a = dp_objectives(alpha_balanced_partition(layout, cost=NUMEL), layout)[0]
        b = dp_objectives(atomic_ownership_partition(layout), layout)[0]
        wins += a <= b
    assert wins >= 950

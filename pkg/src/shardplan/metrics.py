"""Load-balance ratio, DP objectives and plan comparison tables."""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass
from typing import Sequence

from shardplan.costs import CostKind, CostModel, FLOPS_MUON
from shardplan.dp_partition import DpPartitionPlan, slice_loads
from shardplan.tp_schedule import MicroGroupPlan
from shardplan.workload import BufferLayout

MEMORY_MULTIPLIER = 3  # master weight + momentum state per element
REPORT_VERSION = 1


class MetricError(ValueError):
    pass


class MetricKind(str, enum.Enum):
    FLOPS = "flops"
    MEMORY = "memory_elements"
    BYTES = "bytes"


@dataclass(frozen=True)
class LoadReport:
    per_rank: tuple[float, ...]
    metric_kind: MetricKind = MetricKind.FLOPS

    @property
    def max(self) -> float:
        return max(self.per_rank)

    @property
    def avg(self) -> float:
        return sum(self.per_rank) / len(self.per_rank)

    @property
    def r_lb(self) -> float:
        return self.max / self.avg


def load_balance_ratio(values: Sequence[float], metric_kind: MetricKind | str = MetricKind.FLOPS) -> LoadReport:
    values = tuple(values)
    if not values:
        raise MetricError("load_balance_ratio of an empty vector")
    if sum(values) <= 0:
        raise MetricError("load-balance ratio undefined: average load is zero")
    return LoadReport(values, MetricKind(metric_kind))


def plan_rank_metric(plan: DpPartitionPlan, layout: BufferLayout, cost) -> list:
    """Per-rank total of ``cost`` under ``plan``'s cuts (re-evaluated, not the planning cost)."""
    totals = [0] * plan.R
    for bucket, cuts in zip(layout.buckets, plan.cut_vectors):
        for r, w in enumerate(slice_loads(bucket, cuts, cost)):
            totals[r] += w
    return totals


def memory_per_rank(plan: DpPartitionPlan, multiplier: float = MEMORY_MULTIPLIER) -> list:
    return [multiplier * sum(sizes[r] for sizes in plan.rank_sizes) for r in range(plan.R)]


def dp_objectives(plan: DpPartitionPlan, layout: BufferLayout, cost: CostModel | None = None):
    """Return ``(j_dp, j_comm)``: the worst absolute deviation of a rank's load
    from the mean, and the total deviation of slice sizes from ``|B_i|/R``."""
    loads = plan.rank_loads if cost is None else plan_rank_metric(plan, layout, cost)
    mu = sum(loads) / plan.R
    j_dp = max(abs(load - mu) for load in loads)
    j_comm = 0.0
    for b, sizes in zip(layout.buckets, plan.rank_sizes):
        even = b.size / plan.R
        j_comm += sum(abs(s - even) for s in sizes)
    return j_dp, j_comm


@dataclass(frozen=True)
class ComparisonRow:
    name: str
    r_lb_flops: float
    r_lb_memory: float
    j_dp: float
    j_comm: float
    max_load: float
    groups: int | None = None


COLUMNS = ("name", "r_lb_flops", "r_lb_memory", "j_dp", "j_comm", "max_load", "groups")


def compare_plans(plans: Sequence[tuple[str, DpPartitionPlan]], layout: BufferLayout,
                  cost: CostModel | None = None,
                  flops: CostModel = FLOPS_MUON,
                  tp_plans: dict[str, MicroGroupPlan] | None = None) -> list[ComparisonRow]:
    """One row per named plan, in input order.

    ``flops`` re-evaluates compute balance independently of the planning cost;
    ``cost`` (defaults to each plan's own) drives the objective values.
    """
    rows = []
    for name, plan in plans:
        flop_loads = plan_rank_metric(plan, layout, flops)
        mem = memory_per_rank(plan)
        j_dp, j_comm = dp_objectives(plan, layout, cost)
        tp = (tp_plans or {}).get(name)
        rows.append(ComparisonRow(
            name,
            load_balance_ratio(flop_loads).r_lb,
            load_balance_ratio(mem, MetricKind.MEMORY).r_lb,
            j_dp, j_comm, max(flop_loads),
            len(tp.groups) if tp is not None else None))
    return rows


def tp_group_report(plan: MicroGroupPlan) -> list[dict]:
    return [
        {"group": g.index, "l_max": g.l_max, "phi1": g.imbalance, "phi2": g.saturation,
         "items": len(g.param_ids)}
        for g in plan.groups
    ]


def tp_rank_totals(plan: MicroGroupPlan) -> list:
    totals = [0] * plan.R
    for g in plan.groups:
        for r, load in enumerate(g.rank_loads):
            totals[r] += load
    return totals


def rows_to_csv(rows: Sequence[ComparisonRow], kind: str = "plan-comparison") -> str:
    buf = io.StringIO()
    buf.write(f"# format={kind} version={REPORT_VERSION}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for row in rows:
        w.writerow([row.name, f"{row.r_lb_flops:.6f}", f"{row.r_lb_memory:.6f}",
                    f"{row.j_dp:.6g}", f"{row.j_comm:.6g}", f"{row.max_load:.6g}",
                    "" if row.groups is None else row.groups])
    return buf.getvalue()


def load_report_csv(reports: dict[str, LoadReport]) -> str:
    buf = io.StringIO()
    buf.write(f"# format=load-report version={REPORT_VERSION}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("name", "metric", "rank", "value"))
    for name, rep in reports.items():
        for r, v in enumerate(rep.per_rank):
            w.writerow((name, rep.metric_kind.value, r, f"{v:.10g}"))
    for name, rep in reports.items():
        w.writerow((name, rep.metric_kind.value, "r_lb", f"{rep.r_lb:.6f}"))
    return buf.getvalue()


def cost_metric_kind(cost: CostModel) -> MetricKind:
    if cost.kind is CostKind.BYTES:
        return MetricKind.BYTES
    if cost.kind is CostKind.NUMEL:
        return MetricKind.MEMORY
    return MetricKind.FLOPS

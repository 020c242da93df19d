"""Tensor-parallel micro-group scheduling: global LPT sort, greedy packing with
rollback against a per-rank cap, and min-heap LPT host assignment."""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass
from typing import Mapping, Sequence

from shardplan.costs import CostModel, NUMEL
from shardplan.workload import ParamSpec

PLAN_FORMAT = "shardplan.tp-plan"
PLAN_VERSION = 1


class UnschedulableError(ValueError):
    pass


@dataclass(frozen=True)
class Assignment:
    param_id: int
    shape: tuple[int, ...]
    cost: float


@dataclass(frozen=True)
class MicroGroup:
    index: int
    assignments: tuple[tuple[Assignment, ...], ...]  # per host rank
    rank_loads: tuple[float, ...]

    @property
    def l_max(self):
        return max(self.rank_loads) if self.rank_loads else 0

    @property
    def imbalance(self):
        """max - min rank load within the group."""
        return max(self.rank_loads) - min(self.rank_loads)

    @property
    def saturation(self):
        """Total load carried by the group."""
        return sum(self.rank_loads)

    @property
    def param_ids(self) -> list[int]:
        return [a.param_id for rank in self.assignments for a in rank]

    def host_of(self) -> dict[int, int]:
        return {a.param_id: r for r, rank in enumerate(self.assignments) for a in rank}


@dataclass(frozen=True)
class MicroGroupPlan:
    groups: tuple[MicroGroup, ...]
    c_max: float
    R: int
    cost_kind: str = "numel"

    def host_map(self) -> dict[int, int]:
        out = {}
        for g in self.groups:
            out.update(g.host_of())
        return out

    def group_of(self) -> dict[int, int]:
        return {pid: g.index for g in self.groups for pid in g.param_ids}

    @property
    def param_ids(self) -> list[int]:
        return [pid for g in self.groups for pid in g.param_ids]

    def to_dict(self) -> dict:
        return {
            "format": PLAN_FORMAT,
            "version": PLAN_VERSION,
            "R": self.R,
            "c_max": self.c_max,
            "cost_kind": self.cost_kind,
            "groups": [
                {
                    "index": g.index,
                    "rank_loads": list(g.rank_loads),
                    "ranks": [[{"param_id": a.param_id, "shape": list(a.shape), "cost": a.cost}
                               for a in rank] for rank in g.assignments],
                }
                for g in self.groups
            ],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "MicroGroupPlan":
        if data.get("format") != PLAN_FORMAT or data.get("version") != PLAN_VERSION:
            raise ValueError(f"not a v{PLAN_VERSION} TP plan file")
        groups = tuple(
            MicroGroup(
                g["index"],
                tuple(tuple(Assignment(a["param_id"], tuple(a["shape"]), a["cost"]) for a in rank)
                      for rank in g["ranks"]),
                tuple(g["rank_loads"]),
            )
            for g in data["groups"]
        )
        return cls(groups, data["c_max"], int(data["R"]), data.get("cost_kind", "numel"))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "MicroGroupPlan":
        return cls.from_dict(json.loads(text))


def min_heap_balance(items: Sequence[tuple], R: int):
    """LPT: place items, heaviest first, on the least-loaded rank.

    ``items`` are ``(cost, payload)`` pairs. Equal loads resolve to the lowest
    rank index. Returns ``(assignments, loads, l_max)`` where ``assignments[r]``
    lists the payloads placed on rank ``r``.
    """
    if R < 1:
        raise ValueError("R must be >= 1")
    # stable: equal costs keep their incoming (globally sorted) order
    ordered = sorted(items, key=lambda it: it[0], reverse=True)
    heap = [(0, r) for r in range(R)]
    assignments: list[list] = [[] for _ in range(R)]
    loads = [0] * R
    for cost, payload in ordered:
        load, r = heapq.heappop(heap)
        assignments[r].append(payload)
        loads[r] = load + cost
        heapq.heappush(heap, (loads[r], r))
    return assignments, loads, max(loads)


def _sorted_items(params: Sequence[ParamSpec], cost: CostModel) -> list[tuple]:
    items = [(cost(p), p.id, p) for p in params]
    items.sort(key=lambda it: (it[0], it[1]), reverse=True)
    return items


def _finalize(index: int, items: list[tuple], R: int) -> MicroGroup:
    payload = [(c, Assignment(p.id, p.shape, c)) for c, _, p in items]
    assignments, loads, _ = min_heap_balance(payload, R)
    return MicroGroup(index, tuple(tuple(a) for a in assignments), tuple(loads))


def build_micro_groups(params: Sequence[ParamSpec], cost: CostModel, R: int,
                       c_max: float) -> MicroGroupPlan:
    """Chunk the globally sorted task stream into groups whose LPT makespan stays within ``c_max``.

    After each append the candidate set is re-solved; on overflow the item is
    rolled back, the previous group is finalized and the item is retried as the
    seed of a fresh group.
    """
    if R < 1:
        raise ValueError("R must be >= 1")
    items = _sorted_items(params, cost)
    groups: list[MicroGroup] = []
    current: list[tuple] = []
    idx = 0
    while idx < len(items):
        current.append(items[idx])
        _, _, l_max = min_heap_balance([(c, pid) for c, pid, _ in current], R)
        if l_max <= c_max:
            idx += 1
            continue
        current.pop()
        if not current:
            c, _, p = items[idx]
            raise UnschedulableError(
                f"parameter {p.name!r} (id {p.id}) has cost {c} exceeding c_max {c_max}")
        groups.append(_finalize(len(groups), current, R))
        current = []
    if current:
        groups.append(_finalize(len(groups), current, R))
    return MicroGroupPlan(tuple(groups), c_max, R, cost.kind.value)


def single_item_groups(params: Sequence[ParamSpec], cost: CostModel, R: int) -> MicroGroupPlan:
    """No-fuse baseline: one tensor per group, hosts from a global LPT assignment."""
    items = _sorted_items(params, cost)
    hosts, _, _ = min_heap_balance([(c, p.id) for c, _, p in items], R)
    host = {pid: r for r, rank in enumerate(hosts) for pid in rank}
    groups = []
    for i, (c, _, p) in enumerate(items):
        ranks = [() for _ in range(R)]
        ranks[host[p.id]] = (Assignment(p.id, p.shape, c),)
        loads = [0] * R
        loads[host[p.id]] = c
        groups.append(MicroGroup(i, tuple(ranks), tuple(loads)))
    c_max = max((c for c, _, _ in items), default=0)
    return MicroGroupPlan(tuple(groups), c_max, R, cost.kind.value)


def naive_micro_groups(params: Sequence[ParamSpec], cost: CostModel, R: int,
                       c_max: float) -> MicroGroupPlan:
    """Unbalanced baseline: declaration order, host = position mod R, a new group
    whenever a rank would pass the cap."""
    groups: list[MicroGroup] = []
    ranks: list[list[Assignment]] = [[] for _ in range(R)]
    loads = [0] * R
    for i, p in enumerate(params):
        c = cost(p)
        if c > c_max:
            raise UnschedulableError(f"parameter {p.name!r} (id {p.id}) has cost {c} exceeding c_max {c_max}")
        r = i % R
        if loads[r] + c > c_max:
            groups.append(MicroGroup(len(groups), tuple(map(tuple, ranks)), tuple(loads)))
            ranks, loads = [[] for _ in range(R)], [0] * R
        ranks[r].append(Assignment(p.id, p.shape, c))
        loads[r] += c
    if any(ranks):
        groups.append(MicroGroup(len(groups), tuple(map(tuple, ranks)), tuple(loads)))
    return MicroGroupPlan(tuple(groups), c_max, R, cost.kind.value)


@dataclass(frozen=True)
class GroupViolation:
    kind: str
    group: int
    detail: str

    def __str__(self) -> str:
        return f"group {self.group}: {self.kind}: {self.detail}"


def validate_micro_groups(plan: MicroGroupPlan, params: Sequence[ParamSpec],
                          cost: CostModel | None = None) -> list[GroupViolation]:
    out: list[GroupViolation] = []
    expected = {p.id for p in params}
    seen: dict[int, int] = {}
    for g in plan.groups:
        if len(g.assignments) != plan.R or len(g.rank_loads) != plan.R:
            out.append(GroupViolation("shape", g.index, f"expected {plan.R} ranks"))
        for pid in g.param_ids:
            if pid in seen:
                out.append(GroupViolation("duplicate", g.index, f"param {pid} also in group {seen[pid]}"))
            else:
                seen[pid] = g.index
            if pid not in expected:
                out.append(GroupViolation("unknown", g.index, f"param {pid} not in workload"))
        if g.l_max > plan.c_max:
            out.append(GroupViolation("capacity", g.index, f"l_max {g.l_max} > c_max {plan.c_max}"))
    missing = sorted(expected - set(seen))
    if missing:
        out.append(GroupViolation("coverage", -1, f"params not scheduled: {missing[:10]}"))
    if cost is not None and not out:
        rebuilt = build_micro_groups(params, cost, plan.R, plan.c_max)
        if rebuilt != plan:
            out.append(GroupViolation("determinism", -1, "rebuilding from the same inputs gives a different plan"))
    return out

"""Discrete-event model of one training iteration's optimizer-relevant phases.

Each rank owns two serial channels, ``compute`` and ``comm``, which overlap
freely with each other. Collectives are synchronous across the group: one
starts when every participant's comm channel is free and its input is ready.
Costs are converted to seconds with a single throughput constant.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Mapping, Sequence

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from shardplan.costs import CostModel, FLOPS_MUON
from shardplan.dp_partition import (
    ALPHA_BALANCED,
    ATOMIC_OWNERSHIP,
    DpPartitionPlan,
    PlanError,
    layerwise_assignment,
)
from shardplan.tp_schedule import MicroGroupPlan
from shardplan.workload import BufferLayout, ParamSpec

TRACE_FORMAT = "shardplan.timeline"
SUMMARY_VERSION = 1


class SimulationError(ValueError):
    pass


class Primitive(str, enum.Enum):
    REDUCE_SCATTER = "reduce_scatter"
    ALL_GATHER = "all_gather"
    ALL_REDUCE = "all_reduce"
    ALL_TO_ALL = "all_to_all"
    BROADCAST = "broadcast"


class StrategyKind(str, enum.Enum):
    SC = "SC"
    NV_LAYERWISE = "NV_LAYERWISE"
    ASC = "ASC"
    LB_ASC = "LB_ASC"


class Redistribution(str, enum.Enum):
    BROADCAST = "broadcast"
    ALL_GATHER = "all_gather"


@dataclass(frozen=True)
class NetModel:
    """Latencies in seconds, bandwidths in bytes/s, throughput in cost units/s."""

    latency: float = 20e-6
    bandwidth: float = 50e9
    intra_latency: float = 10e-6
    intra_bandwidth: float = 300e9
    compute_throughput: float = 400e12

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name.endswith("latency"):
                if v < 0:
                    raise SimulationError(f"{f.name} must be >= 0")
            elif not v > 0:
                raise SimulationError(f"{f.name} must be positive")

    def link(self, intra: bool) -> tuple[float, float]:
        return (self.intra_latency, self.intra_bandwidth) if intra else (self.latency, self.bandwidth)

    @classmethod
    def from_dict(cls, data: Mapping) -> "NetModel":
        data = dict(data.get("net", data))
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise SimulationError(f"unknown net keys: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in data.items()})

    @classmethod
    def load(cls, path: str | Path) -> "NetModel":
        with open(path, "rb") as fh:
            return cls.from_dict(tomllib.load(fh))


def ring_traffic(volume: float, primitive: Primitive | str, R: int) -> float:
    """Bytes each rank sends under the ring algorithm for a ``volume``-byte buffer."""
    primitive = Primitive(primitive)
    if R <= 1:
        return 0.0
    frac = (R - 1) / R
    if primitive is Primitive.ALL_REDUCE:
        return 2 * volume * frac
    if primitive is Primitive.BROADCAST:
        return float(volume)
    return volume * frac


def collective_time(volume_bytes: float, primitive: Primitive | str, R: int, net: NetModel,
                    intra: bool = False) -> float:
    if volume_bytes < 0:
        raise SimulationError("negative collective volume")
    try:
        primitive = Primitive(primitive)
    except ValueError:
        raise SimulationError(f"unknown primitive {primitive!r}") from None
    latency, bw = net.link(intra)
    return latency + ring_traffic(volume_bytes, primitive, R) / bw


def _variable_time(slice_bytes: Sequence[float], net: NetModel, intra: bool = False) -> float:
    """Ring reduce-scatter/all-gather with uneven slices: the largest slice sets the pace."""
    R = len(slice_bytes)
    latency, bw = net.link(intra)
    if R <= 1:
        return latency
    return latency + (R - 1) * max(slice_bytes) / bw


@dataclass(frozen=True)
class Event:
    rank: int
    channel: str
    kind: str
    start: float
    end: float
    phase: str
    nbytes: float = 0.0
    cost: float = 0.0
    label: str = ""


@dataclass
class SimTimeline:
    strategy: str
    R: int
    events: list[Event] = field(default_factory=list)
    fwd_bwd_time: float = 0.0
    optimizer_time: float = 0.0
    comm_volumes: dict[str, float] = field(default_factory=dict)
    optimizer_comm_bytes: float = 0.0
    optimizer_comm_time: float = 0.0
    rank_compute: list[float] = field(default_factory=list)
    exposed_comm: float = 0.0

    @property
    def iteration_time(self) -> float:
        return self.fwd_bwd_time + self.optimizer_time

    def add_volume(self, primitive: Primitive, nbytes: float):
        self.comm_volumes[primitive.value] = self.comm_volumes.get(primitive.value, 0.0) + nbytes

    def rank_events(self, rank: int) -> list[Event]:
        return [e for e in self.events if e.rank == rank]

    def summary(self) -> dict:
        row = {
            "strategy": self.strategy,
            "fwd_bwd_time": self.fwd_bwd_time,
            "optimizer_time": self.optimizer_time,
            "iteration_time": self.iteration_time,
            "exposed_comm": self.exposed_comm,
            "optimizer_comm_bytes": self.optimizer_comm_bytes,
        }
        for p in Primitive:
            row[f"{p.value}_bytes"] = self.comm_volumes.get(p.value, 0.0)
        return row

    def to_chrome_trace(self) -> dict:
        trace = []
        for e in self.events:
            trace.append({
                "name": e.label or e.kind, "cat": e.phase, "ph": "X",
                "ts": e.start * 1e6, "dur": (e.end - e.start) * 1e6,
                "pid": e.rank, "tid": e.channel,
                "args": {"kind": e.kind, "bytes": e.nbytes, "cost": e.cost},
            })
        return {"traceEvents": trace, "displayTimeUnit": "ms",
                "otherData": {"format": TRACE_FORMAT, "version": SUMMARY_VERSION,
                              "strategy": self.strategy}}

    def dump_chrome_trace(self, path: str | Path):
        Path(path).write_text(json.dumps(self.to_chrome_trace(), sort_keys=True))


SUMMARY_COLUMNS = ("label", "strategy", "fwd_bwd_time", "optimizer_time", "iteration_time",
                   "exposed_comm", "optimizer_comm_bytes") + tuple(f"{p.value}_bytes" for p in Primitive)


def summary_csv(rows: Iterable[tuple[str, SimTimeline]]) -> str:
    buf = io.StringIO()
    buf.write(f"# format=sim-summary version={SUMMARY_VERSION}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for label, tl in rows:
        s = tl.summary()
        w.writerow([label] + [s[c] if isinstance(s[c], str) else f"{s[c]:.9g}" for c in SUMMARY_COLUMNS[1:]])
    return buf.getvalue()


@dataclass(frozen=True)
class FwdBwdProfile:
    forward: tuple[float, ...]
    backward: tuple[float, ...]

    @classmethod
    def proportional(cls, layout: BufferLayout, seconds_per_element: float,
                     backward_factor: float = 2.0) -> "FwdBwdProfile":
        fwd = tuple(b.size * seconds_per_element for b in layout.buckets)
        return cls(fwd, tuple(backward_factor * f for f in fwd))

    @classmethod
    def from_tokens(cls, layout: BufferLayout, tokens: int = 65536,
                    throughput: float = 400e12) -> "FwdBwdProfile":
        # 2 FLOPs per parameter per token forward, twice that backward
        return cls.proportional(layout, 2.0 * tokens / throughput)


def _check_plan(strategy: StrategyKind, plan: DpPartitionPlan | None, layout: BufferLayout):
    required = {StrategyKind.ASC: ATOMIC_OWNERSHIP, StrategyKind.LB_ASC: ALPHA_BALANCED}.get(strategy)
    if required is None:
        return
    if plan is None or plan.kind != required:
        got = None if plan is None else plan.kind
        raise SimulationError(f"{strategy.value} needs a {required} plan, got {got}")
    if plan.R != layout.R or len(plan.cut_vectors) != len(layout.buckets):
        raise SimulationError("plan does not match layout")


def simulate_dp_step(layout: BufferLayout, plan: DpPartitionPlan | None, strategy: StrategyKind | str,
                     cost: CostModel = FLOPS_MUON, net: NetModel = NetModel(),
                     profile: FwdBwdProfile | None = None,
                     exclude: frozenset[int] = frozenset(),
                     redistribution: Redistribution | str = Redistribution.BROADCAST,
                     grad_dtype_bytes: int | None = None,
                     record_events: bool = True) -> SimTimeline:
    """Simulate forward, backward and the DP optimizer step for one strategy.

    ``cost`` converts owned parameters into compute time and is independent of
    whatever cost the plan was built with. Parameters in ``exclude`` are
    skipped by the DP optimizer step (their update happens elsewhere, e.g. in
    the TP plane).
    """
    strategy = StrategyKind(strategy)
    redistribution = Redistribution(redistribution)
    _check_plan(strategy, plan, layout)
    R = layout.R
    N = len(layout.buckets)
    if profile is None:
        profile = FwdBwdProfile.from_tokens(layout, throughput=net.compute_throughput)
    if len(profile.forward) != N or len(profile.backward) != N:
        raise SimulationError("profile length does not match bucket count")
    tl = SimTimeline(strategy.value, R)
    zero = strategy in (StrategyKind.ASC, StrategyKind.LB_ASC)

    def nbytes(p: ParamSpec) -> int:
        return p.numel * (grad_dtype_bytes or p.dtype_bytes)

    bucket_bytes = [sum(nbytes(p) for p in b.params) for b in layout.buckets]
    if zero:
        elem_bytes = [bucket_bytes[i] / b.size if b.size else 0 for i, b in enumerate(layout.buckets)]
        slice_bytes = [[s * elem_bytes[i] for s in plan.rank_sizes[i]] for i in range(N)]

    def emit(channel, kind, start, end, phase, nbytes=0.0, cost_=0.0, label="", ranks=range(R)):
        if record_events:
            for r in ranks:
                tl.events.append(Event(r, channel, kind, start, end, phase, nbytes, cost_, label))

    # forward: ZeRO strategies gather each bucket's parameters before using it
    t_compute = t_comm = 0.0
    for i in range(N):
        ready = 0.0
        if zero:
            dur = _variable_time(slice_bytes[i], net)
            start = t_comm
            t_comm = start + dur
            ready = t_comm
            tl.add_volume(Primitive.ALL_GATHER, ring_traffic(bucket_bytes[i], Primitive.ALL_GATHER, R))
            emit("comm", Primitive.ALL_GATHER.value, start, t_comm, "forward", bucket_bytes[i], label=f"AG b{i}")
        start = max(t_compute, ready)
        t_compute = start + profile.forward[i]
        emit("compute", "forward", start, t_compute, "forward", label=f"F b{i}")
    t_comm = max(t_comm, t_compute)

    # backward: buckets complete in reverse order; their gradient collective overlaps the next bucket
    for i in reversed(range(N)):
        start = t_compute
        t_compute = start + profile.backward[i]
        emit("compute", "backward", start, t_compute, "backward", label=f"B b{i}")
        if zero:
            prim = Primitive.REDUCE_SCATTER
            dur = _variable_time(slice_bytes[i], net)
        else:
            prim = Primitive.ALL_REDUCE
            dur = collective_time(bucket_bytes[i], prim, R, net)
        c_start = max(t_comm, t_compute)
        t_comm = c_start + dur
        tl.add_volume(prim, ring_traffic(bucket_bytes[i], prim, R))
        emit("comm", prim.value, c_start, t_comm, "backward", bucket_bytes[i], label=f"{prim.value} b{i}")
    tl.fwd_bwd_time = max(t_compute, t_comm)
    tl.exposed_comm = tl.fwd_bwd_time - (sum(profile.forward) + sum(profile.backward))

    # optimizer step
    params = [p for p in layout.params if p.id not in exclude]
    if strategy is StrategyKind.SC:
        owners = None
        loads = [sum(cost(p) for p in params)] * R
    else:
        if strategy is StrategyKind.NV_LAYERWISE:
            owners = layerwise_assignment(layout, cost)
        else:
            owners = plan.owner_map(layout)
        loads = [0] * R
        for p in params:
            loads[owners[p.id]] += cost(p)
    tl.rank_compute = list(loads)
    t0 = tl.fwd_bwd_time
    for r in range(R):
        emit("compute", "optimizer", t0, t0 + loads[r] / net.compute_throughput, "optimizer",
             cost_=loads[r], label="optimizer", ranks=(r,))
    compute_span = max(loads) / net.compute_throughput
    comm_span = 0.0
    if strategy is StrategyKind.NV_LAYERWISE:
        owned_bytes = [0] * R
        for p in layout.params:
            owned_bytes[owners[p.id]] += nbytes(p)
        t = t0 + compute_span
        if redistribution is Redistribution.BROADCAST:
            for r in range(R):
                dur = collective_time(owned_bytes[r], Primitive.BROADCAST, R, net)
                emit("comm", "broadcast", t, t + dur, "optimizer", owned_bytes[r], label=f"bcast from r{r}")
                t += dur
                tl.add_volume(Primitive.BROADCAST, ring_traffic(owned_bytes[r], Primitive.BROADCAST, R))
                tl.optimizer_comm_bytes += ring_traffic(owned_bytes[r], Primitive.BROADCAST, R)
        else:
            dur = _variable_time(owned_bytes, net)
            emit("comm", "all_gather", t, t + dur, "optimizer", sum(owned_bytes), label="param all_gather")
            t += dur
            traffic = ring_traffic(sum(owned_bytes), Primitive.ALL_GATHER, R)
            tl.add_volume(Primitive.ALL_GATHER, traffic)
            tl.optimizer_comm_bytes += traffic
        comm_span = t - (t0 + compute_span)
    tl.optimizer_comm_time = comm_span
    tl.optimizer_time = compute_span + comm_span
    return tl


def _group_bytes(group, dtype_bytes: int) -> float:
    return sum(math.prod(a.shape) * dtype_bytes for rank in group.assignments for a in rank)


def simulate_tp_step(micro_plan: MicroGroupPlan, tp_degree: int, net: NetModel = NetModel(),
                     cost: CostModel | None = None, grad_dtype_bytes: int = 2,
                     record_events: bool = True) -> SimTimeline:
    """Micro-group lifecycle: all-to-all gather, host compute, all-to-all scatter.

    Comm order is ``G0, G1, S0, G2, S1, ...``: one group of gradients is
    prefetched while the previous group computes. Compute of group ``k`` on a
    rank starts once its gather landed and the rank finished group ``k-1``.
    """
    T = tp_degree
    if micro_plan.R != T:
        raise SimulationError(f"plan built for {micro_plan.R} ranks, tp_degree is {T}")
    tl = SimTimeline("TP_ASC", T)
    groups = micro_plan.groups
    K = len(groups)

    def emit(rank_list, channel, kind, start, end, nbytes=0.0, cost_=0.0, label=""):
        if record_events:
            for r in rank_list:
                tl.events.append(Event(r, channel, kind, start, end, "optimizer", nbytes, cost_, label))

    loads = []
    for g in groups:
        if cost is None:
            loads.append(list(g.rank_loads))
        else:
            loads.append([sum(cost.cost_of_shape(a.shape) for a in rank) for rank in g.assignments])
    # each rank holds 1/T of every full gradient in the group
    a2a = [collective_time(_group_bytes(g, grad_dtype_bytes) / T, Primitive.ALL_TO_ALL, T, net, intra=True)
           for g in groups]
    order: list[tuple[str, int]] = []
    for k in range(K):
        order.append(("gather", k))
        if k >= 1:
            order.append(("scatter", k - 1))
    if K:
        order.append(("scatter", K - 1))

    gather_end = [0.0] * K
    compute_end = [[0.0] * T for _ in range(K)]
    rank_free = [0.0] * T
    t_comm = 0.0
    computed = -1

    def run_compute(k):
        for r in range(T):
            start = max(gather_end[k], rank_free[r])
            end = start + loads[k][r] / net.compute_throughput
            if loads[k][r]:
                emit((r,), "compute", "optimizer", start, end, cost_=loads[k][r], label=f"G{k} compute")
            compute_end[k][r] = end
            rank_free[r] = end

    for kind, k in order:
        if kind == "gather":
            start = t_comm
            t_comm = start + a2a[k]
            gather_end[k] = t_comm
            emit(range(T), "comm", "all_to_all", start, t_comm, _group_bytes(groups[k], grad_dtype_bytes),
                 label=f"G{k} gather")
        else:
            while computed < k:
                computed += 1
                run_compute(computed)
            start = max(t_comm, max(compute_end[k]))
            t_comm = start + a2a[k]
            emit(range(T), "comm", "all_to_all", start, t_comm, _group_bytes(groups[k], grad_dtype_bytes),
                 label=f"G{k} scatter")
        vol = ring_traffic(_group_bytes(groups[k], grad_dtype_bytes) / T, Primitive.ALL_TO_ALL, T)
        tl.add_volume(Primitive.ALL_TO_ALL, vol)
        tl.optimizer_comm_bytes += vol
    tl.rank_compute = [sum(loads[k][r] for k in range(K)) for r in range(T)]
    tl.optimizer_time = t_comm
    tl.optimizer_comm_time = sum(a2a) * 2
    return tl


def simulate_tp_sc(params: Sequence[ParamSpec], tp_degree: int, net: NetModel = NetModel(),
                   cost: CostModel = FLOPS_MUON, grad_dtype_bytes: int = 2,
                   record_events: bool = True) -> SimTimeline:
    """TP synchronous baseline: per-tensor all-gather, then every rank updates the full tensor."""
    T = tp_degree
    tl = SimTimeline("TP_SC", T)
    t_comm = t_compute = 0.0
    for p in params:
        nbytes = p.numel * grad_dtype_bytes
        start = t_comm
        t_comm = start + collective_time(nbytes, Primitive.ALL_GATHER, T, net, intra=True)
        vol = ring_traffic(nbytes, Primitive.ALL_GATHER, T)
        tl.add_volume(Primitive.ALL_GATHER, vol)
        tl.optimizer_comm_bytes += vol
        c = cost(p)
        c_start = max(t_compute, t_comm)
        t_compute = c_start + c / net.compute_throughput
        if record_events:
            for r in range(T):
                tl.events.append(Event(r, "comm", "all_gather", start, t_comm, "optimizer", nbytes, label=p.name))
                tl.events.append(Event(r, "compute", "optimizer", c_start, t_compute, "optimizer", cost=c, label=p.name))
    tl.rank_compute = [sum(cost(p) for p in params)] * T
    tl.optimizer_time = max(t_comm, t_compute)
    return tl

"""Data-parallel partition plans over a bucketed flat buffer.

Three planners share one plan type:

* ``equal_chunk_partition`` - the ZeRO-1 default, ``|B|/R`` slices that ignore
  parameter boundaries;
* ``atomic_ownership_partition`` - each parameter goes wholly to the rank
  whose stride contains its start offset;
* ``alpha_balanced_partition`` - greedy LPT over buckets that shifts atomic
  cut points to fill per-rank load deficits.

Cut vectors are always reported per bucket in original bucket order; any
reordering done while planning is virtual.
"""

from __future__ import annotations

import bisect
import heapq
import json
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

from shardplan.costs import CostModel, NUMEL
from shardplan.workload import Bucket, BufferLayout, ParamSpec

PLAN_FORMAT = "shardplan.dp-plan"
PLAN_VERSION = 1

EQUAL_CHUNK = "equal_chunk"
ATOMIC_OWNERSHIP = "atomic_ownership"
ALPHA_BALANCED = "alpha_balanced"


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class DpPartitionPlan:
    kind: str
    R: int
    cut_vectors: tuple[tuple[int, ...], ...]
    rank_loads: tuple[float, ...]
    rank_sizes: tuple[tuple[int, ...], ...]
    atomic: bool
    alpha: float | None = None
    cost_kind: str = "numel"

    def owner_map(self, layout: BufferLayout) -> dict[int, int]:
        """param id -> owning rank. Only defined for atomic plans."""
        if not self.atomic:
            raise PlanError(f"{self.kind} plan does not assign whole parameters")
        return _owners_from_cuts(self, layout)

    def owned_params(self, layout: BufferLayout) -> list[list[ParamSpec]]:
        owners = self.owner_map(layout)
        out: list[list[ParamSpec]] = [[] for _ in range(self.R)]
        for p in layout.params:
            out[owners[p.id]].append(p)
        return out

    def to_dict(self) -> dict:
        return {
            "format": PLAN_FORMAT,
            "version": PLAN_VERSION,
            "kind": self.kind,
            "R": self.R,
            "alpha": self.alpha,
            "cost_kind": self.cost_kind,
            "atomic": self.atomic,
            "buckets": [
                {"index": i, "cuts": list(cuts), "sizes": list(sizes)}
                for i, (cuts, sizes) in enumerate(zip(self.cut_vectors, self.rank_sizes))
            ],
            "rank_loads": list(self.rank_loads),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "DpPartitionPlan":
        if data.get("format") != PLAN_FORMAT:
            raise PlanError(f"not a DP plan file (format={data.get('format')!r})")
        if data.get("version") != PLAN_VERSION:
            raise PlanError(f"unsupported DP plan version {data.get('version')}")
        buckets = sorted(data["buckets"], key=lambda b: b["index"])
        return cls(
            kind=data["kind"],
            R=int(data["R"]),
            cut_vectors=tuple(tuple(b["cuts"]) for b in buckets),
            rank_loads=tuple(data["rank_loads"]),
            rank_sizes=tuple(tuple(b["sizes"]) for b in buckets),
            atomic=bool(data["atomic"]),
            alpha=data.get("alpha"),
            cost_kind=data.get("cost_kind", "numel"),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "DpPartitionPlan":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class DeficitState:
    loads: tuple[float, ...]
    mu: float
    deficits: tuple[float, ...] = field(init=False)
    d_total: float = field(init=False)

    def __post_init__(self):
        d = tuple(max(0.0, self.mu - load) for load in self.loads)
        object.__setattr__(self, "deficits", d)
        object.__setattr__(self, "d_total", sum(d))

    def fill_vector(self) -> list[float]:
        R = len(self.loads)
        if self.d_total > 0:
            return [d / self.d_total for d in self.deficits]
        return [1.0 / R] * R


def _cumulative(bucket: Bucket, cost: Callable[[ParamSpec], float]) -> list:
    phi = [0]
    for p in bucket.params:
        phi.append(phi[-1] + cost(p))
    return phi


def slice_loads(bucket: Bucket, cuts: Sequence[int], cost: Callable[[ParamSpec], float]) -> list:
    """Per-rank load of one bucket under ``cuts``.

    A parameter cut across ranks contributes to each rank in proportion to the
    elements it holds (only equal-chunk plans do this).
    """
    R = len(cuts) - 1
    loads = [0] * R
    ends = bucket.offsets[1:] + (bucket.size,)
    for p, start, end in zip(bucket.params, bucket.offsets, ends):
        w = cost(p)
        r = max(0, bisect.bisect_right(cuts, start) - 1)
        while r < R and cuts[r] < end:
            overlap = min(end, cuts[r + 1]) - max(start, cuts[r])
            if overlap == end - start:
                loads[r] += w
            elif overlap > 0:
                loads[r] += w * overlap / (end - start)
            r += 1
    return loads


def _finish(kind: str, layout: BufferLayout, cut_vectors: list[list[int]], cost: CostModel,
            alpha: float | None, loads: Sequence | None = None) -> DpPartitionPlan:
    R = layout.R
    if loads is None:
        loads = [0] * R
        for bucket, cuts in zip(layout.buckets, cut_vectors):
            for r, w in enumerate(slice_loads(bucket, cuts, cost)):
                loads[r] += w
    sizes = tuple(tuple(c[r + 1] - c[r] for r in range(R)) for c in cut_vectors)
    atomic = all(set(c) <= set(b.boundaries) for b, c in zip(layout.buckets, cut_vectors))
    return DpPartitionPlan(kind, R, tuple(tuple(c) for c in cut_vectors), tuple(loads),
                           sizes, atomic, alpha, cost.kind.value)


def equal_chunk_partition(layout: BufferLayout, R: int | None = None,
                          cost: CostModel = NUMEL) -> DpPartitionPlan:
    """ZeRO-1 equal slices; the remainder of ``|B| mod R`` goes to the last rank."""
    R = layout.R if R is None else R
    _check_R(layout, R)
    cut_vectors = []
    for b in layout.buckets:
        chunk = b.size // R
        cut_vectors.append([r * chunk for r in range(R)] + [b.size])
    return _finish(EQUAL_CHUNK, layout, cut_vectors, cost, None)


def atomic_ownership_partition(layout: BufferLayout, R: int | None = None,
                               cost: CostModel = NUMEL) -> DpPartitionPlan:
    """Assign each parameter to the rank whose stride ``|B|/R`` holds its start."""
    R = layout.R if R is None else R
    _check_R(layout, R)
    cut_vectors = []
    for b in layout.buckets:
        size = b.size
        if size == 0:
            cut_vectors.append([0] * (R + 1))
            continue
        # floor(start / (size/R)) computed in integers
        owners = [min(R - 1, off * R // size) for off in b.offsets]
        cuts = [0]
        for r in range(1, R):
            first = next((off for off, o in zip(b.offsets, owners) if o >= r), size)
            cuts.append(first)
        cuts.append(size)
        cut_vectors.append(cuts)
    return _finish(ATOMIC_OWNERSHIP, layout, cut_vectors, cost, None)


def compute_deficits(loads: Sequence[float], mu: float) -> DeficitState:
    return DeficitState(tuple(loads), mu)


def _nearest_cut(phi: Sequence, target: float, lo: int) -> int:
    """Index u >= lo minimising |phi[u] - target|; ties go to the smaller u."""
    pos = bisect.bisect_left(phi, target, lo)
    if pos >= len(phi):
        return len(phi) - 1
    if pos == lo:
        return pos
    if target - phi[pos - 1] <= phi[pos] - target:
        return pos - 1
    return pos


def alpha_balanced_partition(layout: BufferLayout, R: int | None = None, alpha: float = 1.0,
                             cost: CostModel = NUMEL) -> DpPartitionPlan:
    R = layout.R if R is None else R
    _check_R(layout, R)
    if not 0.0 <= alpha <= 1.0:
        raise PlanError(f"alpha must lie in [0, 1], got {alpha}")
    phis = [_cumulative(b, cost) for b in layout.buckets]
    totals = [phi[-1] for phi in phis]
    mu = sum(totals) / R
    order = sorted(range(len(layout.buckets)), key=lambda i: (-totals[i], i))
    loads = [0] * R
    cut_vectors: list[list[int]] = [[] for _ in layout.buckets]
    even = 1.0 / R
    for k in order:
        bucket, phi = layout.buckets[k], phis[k]
        if not bucket.params:
            cut_vectors[k] = [0] * (R + 1)
            continue
        fill = compute_deficits(loads, mu).fill_vector()
        target = [totals[k] * ((1.0 - alpha) * even + alpha * f) for f in fill]
        boundaries = bucket.boundaries
        cut_idx = [0]
        running = 0.0
        for r in range(R - 1):
            running += target[r]
            u = _nearest_cut(phi, running, cut_idx[-1])
            loads[r] += phi[u] - phi[cut_idx[-1]]
            cut_idx.append(u)
        loads[R - 1] += phi[-1] - phi[cut_idx[-1]]
        cut_idx.append(len(phi) - 1)
        cut_vectors[k] = [boundaries[u] for u in cut_idx]
    return _finish(ALPHA_BALANCED, layout, cut_vectors, cost, alpha, loads)


def _check_R(layout: BufferLayout, R: int):
    if R < 1:
        raise PlanError(f"R must be >= 1, got {R}")
    if R != layout.R:
        raise PlanError(f"plan R={R} does not match layout R={layout.R}")


@dataclass(frozen=True)
class Violation:
    kind: str
    bucket: int
    detail: str

    def __str__(self) -> str:
        return f"bucket {self.bucket}: {self.kind}: {self.detail}"


def ownership_violations(owners: Mapping[int, int], layout: BufferLayout) -> list[Violation]:
    """Data-task mismatch check: owners along each bucket must never step backwards."""
    out = []
    for b in layout.buckets:
        seq = [owners[p.id] for p in b.params]
        for j in range(1, len(seq)):
            if seq[j] < seq[j - 1]:
                out.append(Violation(
                    "data-task-mismatch", b.index,
                    f"{b.params[j].name} on rank {seq[j]} follows rank {seq[j - 1]}"))
                break
    return out


def validate_plan(plan: DpPartitionPlan, layout: BufferLayout) -> list[Violation]:
    out: list[Violation] = []
    if plan.R != layout.R:
        out.append(Violation("rank-count", -1, f"plan R={plan.R}, layout R={layout.R}"))
    if len(plan.cut_vectors) != len(layout.buckets):
        out.append(Violation("bucket-count", -1,
                             f"{len(plan.cut_vectors)} cut vectors for {len(layout.buckets)} buckets"))
        return out
    geometric_ok = True
    for b, cuts, sizes in zip(layout.buckets, plan.cut_vectors, plan.rank_sizes):
        if len(cuts) != plan.R + 1:
            out.append(Violation("shape", b.index, f"{len(cuts)} cuts for R={plan.R}"))
            geometric_ok = False
            continue
        if cuts[0] != 0 or cuts[-1] != b.size:
            out.append(Violation("coverage", b.index, f"cuts span [{cuts[0]}, {cuts[-1]}], bucket size {b.size}"))
            geometric_ok = False
        for r in range(plan.R):
            if cuts[r + 1] < cuts[r]:
                out.append(Violation("monotonicity", b.index,
                                     f"cut {r + 1} = {cuts[r + 1]} < cut {r} = {cuts[r]}"))
                geometric_ok = False
        if len(sizes) != plan.R or sum(sizes) != b.size or any(
                s != cuts[r + 1] - cuts[r] for r, s in enumerate(sizes[:len(cuts) - 1])):
            out.append(Violation("coverage", b.index, f"slice sizes {list(sizes)} inconsistent with cuts"))
        boundaries = set(b.boundaries)
        for c in cuts:
            if c not in boundaries:
                out.append(Violation("atomicity", b.index, f"cut at offset {c} splits a parameter"))
    if geometric_ok and not any(v.kind == "atomicity" for v in out):
        out.extend(ownership_violations(_owners_from_cuts(plan, layout), layout))
    return out


def _owners_from_cuts(plan: DpPartitionPlan, layout: BufferLayout) -> dict[int, int]:
    owners = {}
    for b, cuts in zip(layout.buckets, plan.cut_vectors):
        for p, off in zip(b.params, b.offsets):
            # owner r satisfies cuts[r] <= off < cuts[r+1]
            owners[p.id] = bisect.bisect_right(cuts, off) - 1
    return owners


def layerwise_assignment(layout: BufferLayout, cost: CostModel = NUMEL) -> dict[int, int]:
    """Global LPT over whole layers, ignoring buffer position.

    Parameters without a layer index form singleton units. Returns param id ->
    rank. This is the ownership used by layer-wise optimizers; it generally
    produces a data-task mismatch against the bucket geometry.
    """
    units: dict[object, list[ParamSpec]] = {}
    for p in layout.params:
        key = ("layer", p.layer) if p.layer is not None else ("param", p.id)
        units.setdefault(key, []).append(p)
    weighted = sorted(
        ((sum(cost(p) for p in ps), min(p.id for p in ps), ps) for ps in units.values()),
        key=lambda t: (-t[0], t[1]))
    heap = [(0, r) for r in range(layout.R)]
    owners = {}
    for w, _, ps in weighted:
        load, r = heapq.heappop(heap)
        for p in ps:
            owners[p.id] = r
        heapq.heappush(heap, (load + w, r))
    return owners


def rank_loads_from_owners(owners: Mapping[int, int], params: Sequence[ParamSpec], R: int,
                           cost: CostModel = NUMEL) -> list:
    loads = [0] * R
    for p in params:
        loads[owners[p.id]] += cost(p)
    return loads

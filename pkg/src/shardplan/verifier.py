"""Exact-equivalence check of partitioned optimizer execution on a toy model.

A Muon-style optimizer runs twice over the same synthetic gradients: once on
a single logical rank, once on a DP x TP grid of simulated ranks that only
hold the optimizer state the plans assign to them. Every reduction sums
contributions in ascending rank order, so both runs perform the same float
operations and must agree bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from shardplan.dp_partition import DpPartitionPlan
from shardplan.tp_schedule import MicroGroupPlan
from shardplan.workload import ParamSpec, TpSplit, Workload

MUON_COEFFS = (3.4445, -4.7750, 2.0315)
# classic quintic with p(1) = 1, p'(1) = 0: converges to exact orthogonality
CONVERGENT_COEFFS = (15 / 8, -10 / 8, 3 / 8)
REDUCTION_ORDER = "ascending-rank"
TRACE_FORMAT = "shardplan.step-trace"
TRACE_VERSION = 1


class VerifierError(ValueError):
    pass


def newton_schulz_orthogonalize(M, steps: int = 5, coeffs: Sequence[float] = MUON_COEFFS) -> np.ndarray:
    """Push the singular values of ``M`` toward 1 with a quintic polynomial iteration.

    The input is scaled to unit Frobenius norm first. Tall inputs are processed
    in their wide orientation so ``X @ X.T`` is the smaller Gram matrix.
    """
    X = np.asarray(M, dtype=np.float64)
    if X.ndim != 2:
        raise VerifierError(f"expected a matrix, got shape {X.shape}")
    if steps < 1:
        raise VerifierError("steps must be >= 1")
    norm = np.linalg.norm(X)
    if norm == 0:
        raise VerifierError("cannot orthogonalize a zero matrix")
    a, b, c = coeffs
    X = X / norm
    tall = X.shape[0] > X.shape[1]
    if tall:
        X = X.T
    for _ in range(steps):
        A = X @ X.T
        X = a * X + (b * A + c * (A @ A)) @ X
    return X.T if tall else X


def muon_step(grad, momentum, beta: float, lr: float, ns_steps: int = 5,
              coeffs: Sequence[float] = MUON_COEFFS):
    """Return ``(update, new_momentum)`` for one matrix parameter."""
    grad = np.asarray(grad, dtype=np.float64)
    momentum = np.asarray(momentum, dtype=np.float64)
    if grad.shape != momentum.shape:
        raise VerifierError(f"grad shape {grad.shape} != momentum shape {momentum.shape}")
    if grad.ndim != 2:
        raise VerifierError("muon_step takes matrices; use sgd_step for vectors")
    new_m = beta * momentum + grad
    if not new_m.any():
        return np.zeros_like(new_m), new_m
    return -lr * newton_schulz_orthogonalize(new_m, ns_steps, coeffs), new_m


def sgd_step(grad, momentum, beta: float, lr: float):
    new_m = beta * np.asarray(momentum, dtype=np.float64) + np.asarray(grad, dtype=np.float64)
    return -lr * new_m, new_m


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 0.02
    beta: float = 0.95
    ns_steps: int = 5
    coeffs: tuple[float, float, float] = MUON_COEFFS
    # gradient = noise + weight_coupling * W, so stale replicas show up in the trajectory
    weight_coupling: float = 0.01
    matrix_embeddings: bool = False


def uses_matrix_update(p: ParamSpec, cfg: OptimizerConfig) -> bool:
    return p.is_matrix and (cfg.matrix_embeddings or p.layer is not None)


@dataclass
class StepTrace:
    update_norms: list[dict[int, float]]
    final_weights: dict[int, np.ndarray]
    reduction_order: str = REDUCTION_ORDER
    locality_violations: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "format": TRACE_FORMAT,
            "version": TRACE_VERSION,
            "reduction_order": self.reduction_order,
            "update_norms": [{str(k): v for k, v in sorted(step.items())} for step in self.update_norms],
            "final_weights": {str(k): {"shape": list(w.shape), "data": w.ravel().tolist()}
                              for k, w in sorted(self.final_weights.items())},
            "locality_violations": self.locality_violations,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "StepTrace":
        data = json.loads(text)
        if data.get("format") != TRACE_FORMAT or data.get("version") != TRACE_VERSION:
            raise VerifierError(f"not a v{TRACE_VERSION} step trace")
        weights = {int(k): np.array(v["data"], dtype=np.float64).reshape(v["shape"])
                   for k, v in data["final_weights"].items()}
        norms = [{int(k): v for k, v in step.items()} for step in data["update_norms"]]
        return cls(norms, weights, data["reduction_order"], data["locality_violations"])


def max_abs_diff(a: StepTrace, b: StepTrace) -> float:
    if a.final_weights.keys() != b.final_weights.keys():
        raise VerifierError("traces cover different parameters")
    return max((float(np.max(np.abs(a.final_weights[k] - b.final_weights[k])))
                for k in a.final_weights), default=0.0)


def _fan_in(p: ParamSpec) -> int:
    return p.shape[0]


def initial_weight(p: ParamSpec, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0x5EED, p.id])
    return rng.standard_normal(p.shape) / np.sqrt(_fan_in(p))


def gradient_noise(p: ParamSpec, seed: int, step: int, dp_rank: int) -> np.ndarray:
    """Seeded per (step, param, dp rank) so generation order never matters."""
    rng = np.random.default_rng([seed, step, p.id, dp_rank])
    return rng.standard_normal(p.shape) / np.sqrt(_fan_in(p))


def ordered_sum(parts: Sequence[np.ndarray]) -> np.ndarray:
    total = parts[0].copy()
    for x in parts[1:]:
        total = total + x
    return total


def _update(p: ParamSpec, grad, momentum, cfg: OptimizerConfig):
    if uses_matrix_update(p, cfg):
        return muon_step(grad, momentum, cfg.beta, cfg.lr, cfg.ns_steps, cfg.coeffs)
    return sgd_step(grad, momentum, cfg.beta, cfg.lr)


def run_replicated(workload: Workload, cfg: OptimizerConfig = OptimizerConfig(),
                   steps: int = 20, seed: int = 0) -> StepTrace:
    """Reference run: one logical rank holds every weight and momentum."""
    R = workload.dp_degree
    W = {p.id: initial_weight(p, seed) for p in workload.params}
    M = {p.id: np.zeros(p.shape) for p in workload.params}
    norms = []
    for step in range(steps):
        step_norms = {}
        for p in workload.params:
            g = ordered_sum([gradient_noise(p, seed, step, d) + cfg.weight_coupling * W[p.id]
                             for d in range(R)])
            upd, M[p.id] = _update(p, g, M[p.id], cfg)
            W[p.id] = W[p.id] + upd
            step_norms[p.id] = float(np.linalg.norm(upd))
        norms.append(step_norms)
    return StepTrace(norms, W)


def _shard_slices(p: ParamSpec, T: int) -> list[tuple[slice, ...]]:
    if T == 1 or p.tp_splittable is TpSplit.NONE:
        return [tuple(slice(None) for _ in p.shape)] * T
    dim = 1 if p.tp_splittable is TpSplit.COLUMN else 0
    width = p.shape[dim] // T
    out = []
    for t in range(T):
        sl = [slice(None)] * len(p.shape)
        sl[dim] = slice(t * width, (t + 1) * width)
        out.append(tuple(sl))
    return out


class _Rank:
    """One simulated (dp, tp) rank: full local weight shards, only owned momenta."""

    def __init__(self, dp: int, tp: int, log: list):
        self.key = (dp, tp)
        self.weights: dict[int, np.ndarray] = {}
        self._momenta: dict[int, np.ndarray] = {}
        self._log = log

    def read_momentum(self, pid: int, shape) -> np.ndarray:
        self._log.append((self.key, pid, "read"))
        return self._momenta.get(pid, np.zeros(shape))

    def write_momentum(self, pid: int, value: np.ndarray):
        self._log.append((self.key, pid, "write"))
        self._momenta[pid] = value


def run_partitioned(workload: Workload, dp_plan: DpPartitionPlan, tp_plan: MicroGroupPlan | None,
                    cfg: OptimizerConfig = OptimizerConfig(), steps: int = 20, seed: int = 0,
                    inject_fault: bool = False) -> StepTrace:
    """Run the optimizer on a DP x TP grid under the given plans.

    Per step: each rank computes gradients for its local shards from its own
    weight replica; the DP owner of each parameter (from ``dp_plan``) receives
    the rank-ordered sum; TP tasks are gathered to their host rank within the
    owner's TP group, updated there and scattered back; finally updated shards
    are all-gathered across DP.

    ``inject_fault`` moves one host (or owner) assignment halfway through the
    run without migrating its momentum, which must break equivalence.
    """
    R, T = workload.dp_degree, workload.tp_degree
    layout = workload.layout
    if dp_plan.R != R or len(dp_plan.cut_vectors) != len(layout.buckets):
        raise VerifierError("DP plan does not match the workload layout")
    if not dp_plan.atomic:
        raise VerifierError(f"{dp_plan.kind} plan splits parameters; matrix updates need whole tensors")
    owner = dp_plan.owner_map(layout)
    if set(owner) != {p.id for p in workload.params}:
        raise VerifierError("DP plan does not cover the workload's parameters")
    tp_ids = {p.id for p in workload.tp_params if uses_matrix_update(p, cfg)} if T > 1 else set()
    host: dict[int, int] = {}
    if tp_ids:
        if tp_plan is None or tp_plan.R != T:
            raise VerifierError("a TP plan over the tensor-parallel degree is required")
        host = tp_plan.host_map()
        if set(host) != tp_ids:
            raise VerifierError("TP plan does not cover exactly the tensor-parallel matrix tasks")
    elif tp_plan is not None and tp_plan.param_ids:
        raise VerifierError("TP plan given but the workload has no TP matrix tasks")

    slices = {p.id: _shard_slices(p, T) for p in workload.params}
    log: list = []
    ranks = [[_Rank(d, t, log) for t in range(T)] for d in range(R)]
    for p in workload.params:
        w0 = initial_weight(p, seed)
        for d in range(R):
            for t in range(T):
                ranks[d][t].weights[p.id] = w0[slices[p.id][t]].copy()

    fault_step = steps // 2
    fault_pid = None
    if inject_fault:
        fault_pid = min(tp_ids) if tp_ids else workload.params[0].id
    allowed = momentum_holders(workload, dp_plan, tp_plan if tp_ids else None, cfg)
    norms = []
    for step in range(steps):
        if inject_fault and step == fault_step:
            if fault_pid in host:
                host[fault_pid] = (host[fault_pid] + 1) % T
            else:
                owner[fault_pid] = (owner[fault_pid] + 1) % R
        step_norms = {}
        for p in workload.params:
            sl = slices[p.id]
            # local gradients, then reduce-scatter to the DP owner in ascending rank order
            reduced = []
            for t in range(T):
                noise = [gradient_noise(p, seed, step, d)[sl[t]] for d in range(R)]
                reduced.append(ordered_sum([noise[d] + cfg.weight_coupling * ranks[d][t].weights[p.id]
                                            for d in range(R)]))
            o = owner[p.id]
            if p.id in tp_ids:
                h = host[p.id]
                hr = ranks[o][h]
                # all-to-all gather: shards concatenate along the split dim on the host
                dim = 1 if p.tp_splittable is TpSplit.COLUMN else 0
                full_g = np.concatenate(reduced, axis=dim)
                full_w = np.concatenate([ranks[o][t].weights[p.id] for t in range(T)], axis=dim)
                upd, m = _update(p, full_g, hr.read_momentum(p.id, p.shape), cfg)
                hr.write_momentum(p.id, m)
                new_full = full_w + upd
                new_shards = [new_full[sl[t]] for t in range(T)]
                step_norms[p.id] = float(np.linalg.norm(upd))
            else:
                new_shards = []
                sq = 0.0
                for t in range(T):
                    r = ranks[o][t]
                    upd, m = _update(p, reduced[t], r.read_momentum(p.id, reduced[t].shape), cfg)
                    r.write_momentum(p.id, m)
                    new_shards.append(r.weights[p.id] + upd)
                    sq += float(np.sum(upd * upd))
                # replicated shards: every TP rank computed the same update
                if p.tp_splittable is TpSplit.NONE or T == 1:
                    step_norms[p.id] = float(np.linalg.norm(upd))
                else:
                    step_norms[p.id] = float(np.sqrt(sq))
            # all-gather updated shards across DP
            for d in range(R):
                for t in range(T):
                    ranks[d][t].weights[p.id] = new_shards[t].copy()
        norms.append(step_norms)

    violations = []
    if not inject_fault:
        for key, pid, op in log:
            if key not in allowed.get(pid, ()):
                violations.append(f"rank {key} {op} momentum of param {pid}")
    final = {}
    for p in workload.params:
        if p.tp_splittable is TpSplit.NONE or T == 1:
            final[p.id] = ranks[0][0].weights[p.id]
        else:
            dim = 1 if p.tp_splittable is TpSplit.COLUMN else 0
            final[p.id] = np.concatenate([ranks[0][t].weights[p.id] for t in range(T)], axis=dim)
    return StepTrace(norms, final, REDUCTION_ORDER, violations)


def momentum_holders(workload: Workload, dp_plan: DpPartitionPlan, tp_plan: MicroGroupPlan | None,
                     cfg: OptimizerConfig = OptimizerConfig()) -> dict[int, set]:
    """Ranks expected to hold each parameter's momentum under the plans."""
    owner = dp_plan.owner_map(workload.layout)
    host = tp_plan.host_map() if tp_plan is not None else {}
    out = {}
    for p in workload.params:
        o = owner[p.id]
        if p.id in host:
            out[p.id] = {(o, host[p.id])}
        else:
            out[p.id] = {(o, t) for t in range(workload.tp_degree)}
    return out

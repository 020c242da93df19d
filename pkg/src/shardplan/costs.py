"""Per-parameter cost functions: load, size and communication."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import Sequence

from shardplan.workload import ParamSpec

log = logging.getLogger(__name__)

DEFAULT_NS_STEPS = 5
# preconditioner constants: inverse-root / eigendecomposition cost per n^3
DEFAULT_SHAMPOO_C = 10
DEFAULT_SOAP_C = 12


class CostError(ValueError):
    pass


class CostKind(str, enum.Enum):
    NUMEL = "numel"
    FLOPS_MUON = "flops-muon"
    FLOPS_SHAMPOO = "flops-shampoo"
    FLOPS_SOAP = "flops-soap"
    BYTES = "bytes"


def _dims(shape: Sequence[int]) -> tuple[int, ...]:
    if any(d <= 0 for d in shape):
        raise CostError(f"non-positive dimension in shape {tuple(shape)}")
    return tuple(shape)


def numel_cost(p: ParamSpec) -> int:
    return p.numel


def comm_cost(p: ParamSpec, dtype_bytes: int | None = None) -> int:
    n = p.numel
    if n == 0:
        raise CostError(f"parameter {p.name!r} is empty")
    return n * (p.dtype_bytes if dtype_bytes is None else dtype_bytes)


def muon_flops(m: int, n: int, ns_steps: int = DEFAULT_NS_STEPS) -> int:
    # per step: A = X X^T (2 m^2 n), A @ A (2 m^3), (bA + cA^2) @ X (m^2 n),
    # with m <= n after the transpose convention
    m, n = sorted((m, n))
    return ns_steps * (2 * m * m * n + 2 * m ** 3 + m * m * n)


def preconditioner_flops(m: int, n: int, c: float) -> float:
    return c * (m ** 3 + n ** 3) + 2 * m * n * (m + n)


def flops_cost(p: ParamSpec, kind: CostKind | str, ns_steps: int = DEFAULT_NS_STEPS,
               c: float | None = None):
    """FLOPs of one optimizer update for ``p``; vectors cost their numel."""
    kind = CostKind(kind)
    shape = _dims(p.shape)
    if len(shape) != 2:
        return p.numel
    m, n = shape
    if kind is CostKind.FLOPS_MUON:
        cost = muon_flops(m, n, ns_steps)
    elif kind is CostKind.FLOPS_SHAMPOO:
        cost = preconditioner_flops(m, n, DEFAULT_SHAMPOO_C if c is None else c)
    elif kind is CostKind.FLOPS_SOAP:
        cost = preconditioner_flops(m, n, DEFAULT_SOAP_C if c is None else c)
    else:
        raise CostError(f"{kind.value} is not a FLOPs cost kind")
    if not cost > 0:
        raise CostError(f"non-positive FLOPs cost {cost} for {p.name!r}")
    return cost


@dataclass(frozen=True)
class CostModel:
    """A cost function W(p) selected by kind.

    Calling the model never raises for a non-empty parameter: a FLOPs kind that
    yields a non-positive cost (e.g. ``ns_steps=0``) falls back to numel.
    """

    kind: CostKind = CostKind.NUMEL
    ns_steps: int = DEFAULT_NS_STEPS
    c: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", CostKind(self.kind))

    def __call__(self, p: ParamSpec):
        if self.kind is CostKind.NUMEL:
            return numel_cost(p)
        if self.kind is CostKind.BYTES:
            return comm_cost(p)
        try:
            return flops_cost(p, self.kind, self.ns_steps, self.c)
        except CostError:
            log.warning("cost model %s degenerate for %s; using numel", self.kind.value, p.name)
            return numel_cost(p)

    def cost_of_shape(self, shape: Sequence[int], dtype_bytes: int = 2):
        return self(ParamSpec(0, "shape", tuple(shape), dtype_bytes))

    @classmethod
    def parse(cls, text: str | "CostModel", ns_steps: int = DEFAULT_NS_STEPS) -> "CostModel":
        if isinstance(text, CostModel):
            return text
        return cls(CostKind(text.replace("_", "-")), ns_steps)


NUMEL = CostModel(CostKind.NUMEL)
FLOPS_MUON = CostModel(CostKind.FLOPS_MUON)
BYTES = CostModel(CostKind.BYTES)

"""Command-line entry point: ``shardplan {plan-dp,plan-tp,simulate,verify}``.

Exit codes: 0 success, 1 runtime or I/O failure (including plan violations
and verification divergence), 2 usage or config error.
"""

from __future__ import annotations

import argparse
import logging
import os
import re
import sys
from dataclasses import dataclass
from pathlib import Path

from shardplan.costs import BYTES, CostError, CostModel
from shardplan.dp_partition import (
    PlanError,
    alpha_balanced_partition,
    atomic_ownership_partition,
    validate_plan,
)
from shardplan.metrics import (
    compare_plans,
    load_balance_ratio,
    memory_per_rank,
    plan_rank_metric,
    rows_to_csv,
    tp_group_report,
)
from shardplan.simulator import (
    FwdBwdProfile,
    NetModel,
    SimulationError,
    StrategyKind,
    simulate_dp_step,
    simulate_tp_step,
    summary_csv,
)
from shardplan.tp_schedule import (
    UnschedulableError,
    build_micro_groups,
    single_item_groups,
    validate_micro_groups,
)
from shardplan.verifier import (
    OptimizerConfig,
    VerifierError,
    max_abs_diff,
    run_partitioned,
    run_replicated,
    uses_matrix_update,
)
from shardplan.workload import (
    ConfigError,
    LayoutError,
    ShardingError,
    build_workload,
    load_model_config,
)

OUT_ENV = "SHARDPLAN_OUT"
DEFAULT_OUT = "shardplan-out"
DEFAULT_CMAX = 512 * 2**20
EQUIVALENCE_TOL = 1e-12
FORMAT_VERSION = 1

log = logging.getLogger("shardplan")

_UNITS = {"": 1, "b": 1, "kib": 2**10, "mib": 2**20, "gib": 2**30, "kb": 10**3, "mb": 10**6, "gb": 10**9}


class UsageError(ValueError):
    pass


def parse_size(text: str) -> int:
    """``"512MiB"`` -> bytes. Plain numbers are bytes."""
    m = re.fullmatch(r"\s*([0-9]*\.?[0-9]+)\s*([a-zA-Z]*)\s*", text)
    if not m or m.group(2).lower() not in _UNITS:
        raise argparse.ArgumentTypeError(f"bad size {text!r} (try 512MiB, 2GiB)")
    return int(float(m.group(1)) * _UNITS[m.group(2).lower()])


def parse_alpha(text: str) -> float:
    try:
        a = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"alpha must be a number, got {text!r}") from None
    if not 0.0 <= a <= 1.0:
        raise argparse.ArgumentTypeError(f"alpha must be in [0, 1], got {a}")
    return a


def parse_cost(text: str) -> CostModel:
    try:
        return CostModel.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


@dataclass(frozen=True)
class RunConfig:
    model: str
    dp_degree: int | None
    tp_degree: int | None
    alpha: float
    c_max: int
    cost: CostModel
    sim_cost: CostModel
    strategies: tuple[StrategyKind, ...]
    net: NetModel
    out: Path
    seed: int

    def workload(self):
        cfg = load_model_config(self.model)
        return build_workload(cfg, self.dp_degree, self.tp_degree)


def _header(kind: str) -> str:
    return f"# format={kind} version={FORMAT_VERSION}\n"


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def cmd_plan_dp(rc: RunConfig) -> int:
    w = rc.workload()
    layout = w.layout
    plan = alpha_balanced_partition(layout, alpha=rc.alpha, cost=rc.cost)
    naive = atomic_ownership_partition(layout, cost=rc.cost)
    _write(rc.out / "dp_plan.json", plan.dumps())
    rows = compare_plans([("atomic_ownership", naive), (f"alpha={rc.alpha:g}", plan)], layout,
                         flops=rc.sim_cost)
    _write(rc.out / "dp_report.csv", rows_to_csv(rows))
    loads = []
    for name, p in (("atomic_ownership", naive), ("alpha_balanced", plan)):
        flops = plan_rank_metric(p, layout, rc.sim_cost)
        for r, (f, m) in enumerate(zip(flops, memory_per_rank(p))):
            loads.append(f"{name},{r},{f:.10g},{m}")
    _write(rc.out / "dp_loads.csv", _header("dp-rank-loads") + "plan,rank,flops,memory_elements\n"
           + "\n".join(loads) + "\n")
    violations = validate_plan(plan, layout)
    _write(rc.out / "dp_validation.txt", _header("dp-validation")
           + ("OK\n" if not violations else "".join(f"{v}\n" for v in violations)))
    for row in rows:
        print(f"{row.name:>20}  R_LB(flops)={row.r_lb_flops:.3f}  R_LB(memory)={row.r_lb_memory:.3f}")
    if violations:
        print(f"{len(violations)} plan violations, see dp_validation.txt", file=sys.stderr)
        return 1
    return 0


def cmd_plan_tp(rc: RunConfig) -> int:
    w = rc.workload()
    T = w.tp_degree
    tasks = w.tp_task_params() if T > 1 else [p for p in w.params if p.is_matrix and p.layer is not None]
    plan = build_micro_groups(tasks, BYTES, T, rc.c_max)
    _write(rc.out / "tp_plan.json", plan.dumps())
    report = tp_group_report(plan)
    lines = ["group,items,l_max_bytes,phi1_bytes,phi2_bytes"]
    lines += [f"{g['group']},{g['items']},{g['l_max']},{g['phi1']},{g['phi2']}" for g in report]
    _write(rc.out / "tp_groups.csv", _header("tp-groups") + "\n".join(lines) + "\n")
    violations = validate_micro_groups(plan, tasks, BYTES)
    _write(rc.out / "tp_validation.txt", _header("tp-validation")
           + ("OK\n" if not violations else "".join(f"{v}\n" for v in violations)))
    print(f"{len(plan.groups)} micro groups over {len(tasks)} tasks, tp={T}, c_max={rc.c_max} bytes")
    return 1 if violations else 0


def _dp_plan_for(strategy: StrategyKind, layout, rc: RunConfig, alpha: float):
    if strategy is StrategyKind.ASC:
        return atomic_ownership_partition(layout, cost=rc.cost)
    if strategy is StrategyKind.LB_ASC:
        return alpha_balanced_partition(layout, alpha=alpha, cost=rc.cost)
    return None


def cmd_simulate(rc: RunConfig, alpha_sweep=None, cmax_sweep=None) -> int:
    if not rc.strategies:
        raise UsageError("at least one strategy is required")
    w = rc.workload()
    layout = w.layout
    profile = FwdBwdProfile.from_tokens(layout, throughput=rc.net.compute_throughput)
    rows = []
    for s in rc.strategies:
        tl = simulate_dp_step(layout, _dp_plan_for(s, layout, rc, rc.alpha), s, rc.sim_cost, rc.net, profile)
        tl.dump_chrome_trace(_mkdir(rc.out / "timelines") / f"{s.value}.trace.json")
        rows.append((s.value, tl))
    _write(rc.out / "summary.csv", summary_csv(rows))
    for label, tl in rows:
        print(f"{label:>14}  fwd_bwd={tl.fwd_bwd_time:.4f}s  optimizer={tl.optimizer_time:.4f}s  "
              f"iteration={tl.iteration_time:.4f}s")

    if alpha_sweep:
        sweep_rows, lines = [], ["alpha optimizer_time fwd_bwd_time r_lb_flops"]
        for a in alpha_sweep:
            plan = alpha_balanced_partition(layout, alpha=a, cost=rc.cost)
            tl = simulate_dp_step(layout, plan, StrategyKind.LB_ASC, rc.sim_cost, rc.net, profile)
            tl.dump_chrome_trace(_mkdir(rc.out / f"alpha-{a:g}") / "LB_ASC.trace.json")
            r_lb = load_balance_ratio(plan_rank_metric(plan, layout, rc.sim_cost)).r_lb
            sweep_rows.append((f"alpha={a:g}", tl))
            lines.append(f"{a:g} {tl.optimizer_time:.9g} {tl.fwd_bwd_time:.9g} {r_lb:.6f}")
        _write(rc.out / "alpha_sweep.csv", summary_csv(sweep_rows))
        _write(rc.out / "alpha_sweep.dat", _header("alpha-sweep") + "\n".join(lines) + "\n")
        print("\n".join(lines))

    if cmax_sweep:
        T = w.tp_degree
        tasks = w.tp_task_params()
        if T < 2 or not tasks:
            raise UsageError("c_max sweep needs tp_degree >= 2")
        lines = ["c_max_bytes groups optimizer_time"]
        for cap in cmax_sweep:
            if cap is None:
                plan, label = single_item_groups(tasks, BYTES, T), "nofuse"
            else:
                try:
                    plan, label = build_micro_groups(tasks, BYTES, T, cap), str(cap)
                except UnschedulableError as exc:
                    lines.append(f"{cap} NA NA  # {exc}")
                    continue
            tl = simulate_tp_step(plan, T, rc.net, rc.sim_cost)
            tl.dump_chrome_trace(_mkdir(rc.out / f"cmax-{label}") / "TP.trace.json")
            lines.append(f"{label} {len(plan.groups)} {tl.optimizer_time:.9g}")
        _write(rc.out / "cmax_sweep.dat", _header("cmax-sweep") + "\n".join(lines) + "\n")
        print("\n".join(lines))
    return 0


def _mkdir(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_verify(rc: RunConfig, steps: int, inject_fault: bool) -> int:
    w = rc.workload()
    ocfg = OptimizerConfig()
    dp_plan = alpha_balanced_partition(w.layout, alpha=rc.alpha, cost=rc.cost)
    tp_plan = None
    if w.tp_degree > 1:
        tasks = [p for p in w.tp_params if uses_matrix_update(p, ocfg)]
        tp_plan = build_micro_groups(tasks, BYTES, w.tp_degree, rc.c_max)
    ref = run_replicated(w, ocfg, steps, rc.seed)
    part = run_partitioned(w, dp_plan, tp_plan, ocfg, steps, rc.seed, inject_fault=inject_fault)
    diff = max_abs_diff(ref, part) if steps else 0.0
    ok = diff <= EQUIVALENCE_TOL and not part.locality_violations
    _write(rc.out / "verify_trace.json", part.dumps())
    _write(rc.out / "verify_report.txt", _header("verify-report")
           + f"steps={steps}\nseed={rc.seed}\ninject_fault={inject_fault}\nmax_abs_diff={diff:.3e}\n"
           + f"locality_violations={len(part.locality_violations)}\nresult={'PASS' if ok else 'FAIL'}\n")
    print(f"max_abs_diff={diff:.3e} {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def _strategies(text: str) -> tuple[StrategyKind, ...]:
    out = []
    for s in filter(None, (t.strip() for t in text.split(","))):
        try:
            out.append(StrategyKind(s.upper().replace("-", "_")))
        except ValueError:
            raise argparse.ArgumentTypeError(f"unknown strategy {s!r}") from None
    return tuple(out)


def _alphas(text: str) -> list[float]:
    return [parse_alpha(t) for t in text.split(",") if t.strip()]


def _cmaxes(text: str) -> list[int | None]:
    return [None if t.strip().lower() in ("nofuse", "no-fuse") else parse_size(t)
            for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--model", default="qwen3-32b", help="TOML path or bundled config name")
    common.add_argument("--dp", type=_positive, default=None, help="override DP degree")
    common.add_argument("--tp", type=_positive, default=None, help="override TP degree")
    common.add_argument("--alpha", type=parse_alpha, default=1.0)
    common.add_argument("--cmax", type=parse_size, default=DEFAULT_CMAX,
                        help="micro-group cap in gradient bytes (e.g. 512MiB)")
    common.add_argument("--cost", type=parse_cost, default=CostModel.parse("numel"),
                        help="DP planning cost: numel|flops-muon|flops-shampoo|flops-soap|bytes")
    common.add_argument("--sim-cost", type=parse_cost, default=CostModel.parse("flops-muon"),
                        help="cost used for simulated optimizer compute and FLOPs balance")
    common.add_argument("--strategy", type=_strategies, default=tuple(StrategyKind),
                        help="comma-separated subset of SC,NV_LAYERWISE,ASC,LB_ASC")
    common.add_argument("--net", default=None, help="TOML file with NetModel fields")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default=None, help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="shardplan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("plan-dp", parents=[common], help="build and validate a DP partition plan")
    sub.add_parser("plan-tp", parents=[common], help="build and validate a TP micro-group plan")
    sim = sub.add_parser("simulate", parents=[common], help="simulate one iteration per strategy")
    sim.add_argument("--alpha-sweep", type=_alphas, default=None, metavar="A,B,...")
    sim.add_argument("--cmax-sweep", type=_cmaxes, default=None, metavar="nofuse,64MiB,...")
    ver = sub.add_parser("verify", parents=[common], help="check partitioned vs replicated optimizer runs")
    ver.add_argument("--steps", type=int, default=20)
    ver.add_argument("--inject-fault", action="store_true")
    ver.set_defaults(model="toy")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out or os.environ.get(OUT_ENV) or DEFAULT_OUT)
    try:
        try:
            net = NetModel.load(args.net) if args.net else NetModel()
        except SimulationError as exc:
            raise UsageError(f"{args.net}: {exc}") from None
        rc = RunConfig(args.model, args.dp, args.tp, args.alpha, args.cmax, args.cost, args.sim_cost,
                       args.strategy, net, out / args.command, args.seed)
        if args.command == "plan-dp":
            return cmd_plan_dp(rc)
        if args.command == "plan-tp":
            return cmd_plan_tp(rc)
        if args.command == "simulate":
            return cmd_simulate(rc, args.alpha_sweep, args.cmax_sweep)
        if args.steps < 0:
            raise UsageError("--steps must be >= 0")
        return cmd_verify(rc, args.steps, args.inject_fault)
    except (UsageError, ConfigError, CostError) as exc:
        print(f"shardplan: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"shardplan: I/O error: {exc}", file=sys.stderr)
        return 1
    except (PlanError, UnschedulableError, SimulationError, VerifierError, LayoutError,
            ShardingError) as exc:
        print(f"shardplan: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Plan with each cost model, then score every plan against the FLOPs-based makespan."""

import argparse

from shardplan.costs import FLOPS_MUON, CostModel
from shardplan.dp_partition import alpha_balanced_partition
from shardplan.simulator import NetModel, StrategyKind, simulate_dp_step
from shardplan.workload import build_workload, load_model_config


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--model", default="qwen3-32b")
    ap.add_argument("--costs", default="numel,flops-muon,flops-shampoo,flops-soap,bytes")
    args = ap.parse_args()

    layout = build_workload(load_model_config(args.model)).layout
    net = NetModel()
    results = {}
    for name in args.costs.split(","):
        plan = alpha_balanced_partition(layout, alpha=1.0, cost=CostModel.parse(name))
        tl = simulate_dp_step(layout, plan, StrategyKind.LB_ASC, FLOPS_MUON, net, record_events=False)
        results[name] = tl.optimizer_time
    ref = results.get("flops-muon", min(results.values()))
    print(f"# {args.model}, R={layout.R}, makespan scored with Muon FLOPs")
    print(f"{'planning_cost':>14} {'optimizer_ms':>13} {'vs_flops':>9}")
    for name, t in results.items():
        print(f"{name:>14} {t * 1e3:13.2f} {100 * (t - ref) / ref:8.2f}%")


if __name__ == "__main__":
    main()

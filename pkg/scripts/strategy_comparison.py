"""Iteration breakdown of the four DP optimizer strategies for one or more models."""

import argparse

from shardplan.costs import FLOPS_MUON, NUMEL
from shardplan.dp_partition import alpha_balanced_partition, atomic_ownership_partition
from shardplan.simulator import NetModel, StrategyKind, simulate_dp_step, summary_csv
from shardplan.workload import build_workload, load_model_config


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--models", default="qwen3-1.7b,qwen3-14b,qwen3-32b")
    ap.add_argument("--csv", action="store_true", help="emit the summary CSV instead of a table")
    args = ap.parse_args()

    net = NetModel()
    rows = []
    for model in args.models.split(","):
        layout = build_workload(load_model_config(model)).layout
        plans = {
            StrategyKind.SC: None,
            StrategyKind.NV_LAYERWISE: None,
            StrategyKind.ASC: atomic_ownership_partition(layout),
            StrategyKind.LB_ASC: alpha_balanced_partition(layout, cost=NUMEL),
        }
        for strategy, plan in plans.items():
            tl = simulate_dp_step(layout, plan, strategy, FLOPS_MUON, net, record_events=False)
            rows.append((f"{model}/{strategy.value}", tl))
    if args.csv:
        print(summary_csv(rows), end="")
        return
    print(f"{'run':>24} {'fwd_bwd_s':>10} {'optimizer_s':>12} {'iteration_s':>12}")
    for label, tl in rows:
        print(f"{label:>24} {tl.fwd_bwd_time:10.4f} {tl.optimizer_time:12.4f} {tl.iteration_time:12.4f}")


if __name__ == "__main__":
    main()

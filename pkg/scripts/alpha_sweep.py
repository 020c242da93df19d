"""Simulated LB_ASC optimizer time across the balance factor alpha."""

import argparse

import numpy as np

from shardplan.costs import FLOPS_MUON, NUMEL
from shardplan.dp_partition import alpha_balanced_partition
from shardplan.metrics import compare_plans
from shardplan.simulator import NetModel, StrategyKind, simulate_dp_step
from shardplan.workload import build_workload, load_model_config


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--model", default="qwen3-32b")
    ap.add_argument("--alphas", default="0,0.25,0.5,0.75,1")
    args = ap.parse_args()

    layout = build_workload(load_model_config(args.model)).layout
    alphas = [float(a) for a in args.alphas.split(",")]
    net = NetModel()
    print(f"# {args.model}, R={layout.R}")
    print(f"{'alpha':>6} {'optimizer_s':>12} {'r_lb_flops':>11} {'r_lb_mem':>9}")
    times = []
    for a in alphas:
        plan = alpha_balanced_partition(layout, alpha=a, cost=NUMEL)
        tl = simulate_dp_step(layout, plan, StrategyKind.LB_ASC, FLOPS_MUON, net, record_events=False)
        row = compare_plans([("p", plan)], layout, flops=FLOPS_MUON)[0]
        times.append(tl.optimizer_time)
        print(f"{a:6.2f} {tl.optimizer_time:12.4f} {row.r_lb_flops:11.3f} {row.r_lb_memory:9.3f}")
    if len(alphas) > 1:
        print(f"# linear-fit slope {np.polyfit(alphas, times, 1)[0]:.4f} s per unit alpha")


if __name__ == "__main__":
    main()

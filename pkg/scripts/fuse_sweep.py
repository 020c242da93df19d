"""TP micro-group latency as the per-rank capacity cap c_max grows."""

import argparse

from shardplan.cli import parse_size
from shardplan.costs import BYTES, FLOPS_MUON
from shardplan.simulator import NetModel, simulate_tp_step
from shardplan.tp_schedule import build_micro_groups, single_item_groups
from shardplan.workload import build_workload, load_model_config


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--model", default="qwen3-14b")
    ap.add_argument("--caps", default="64MiB,128MiB,256MiB,512MiB,1GiB,2GiB,4GiB")
    args = ap.parse_args()

    w = build_workload(load_model_config(args.model))
    tasks, T = w.tp_task_params(), w.tp_degree
    net = NetModel()
    largest = max(p.nbytes for p in tasks)
    print(f"# {args.model}, T={T}, {len(tasks)} TP tasks, largest {largest / 2**20:.0f} MiB")
    print(f"{'c_max':>8} {'groups':>6} {'optimizer_s':>12}")
    nofuse = single_item_groups(tasks, BYTES, T)
    t = simulate_tp_step(nofuse, T, net, FLOPS_MUON, record_events=False).optimizer_time
    print(f"{'nofuse':>8} {len(nofuse.groups):6d} {t:12.4f}")
    for label in args.caps.split(","):
        cap = parse_size(label)
        if cap < largest:
            print(f"{label:>8} {'-':>6} {'NA':>12}")
            continue
        plan = build_micro_groups(tasks, BYTES, T, cap)
        t = simulate_tp_step(plan, T, net, FLOPS_MUON, record_events=False).optimizer_time
        print(f"{label:>8} {len(plan.groups):6d} {t:12.4f}")


if __name__ == "__main__":
    main()

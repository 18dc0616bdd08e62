"""Run one search locally and on simulated clusters, with and without faults.

    python scripts/distributed_demo.py --out runs/distributed_demo

For every setting, prints the selected members, the largest weight
difference from the local run, and how many preemptions were survived.
"""

import argparse
from pathlib import Path

import numpy as np

from autoensemble.cluster import ClusterConfig, FaultSpec, committed_transitions, run_cluster
from autoensemble.data import two_gaussians
from autoensemble.search import AutoEnsembleSearch, SearchConfig
from autoensemble.subnetworks import GeneratorConfig


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/distributed_demo")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    out = Path(args.out)

    cfg = SearchConfig(generator=GeneratorConfig(width=6), iterations=3, steps_per_iteration=100,
                       checkpoint_every=25, seed=args.seed)
    train = two_gaussians(800, seed=args.seed)
    S = cfg.steps_per_iteration
    local = AutoEnsembleSearch(cfg, out / "local").run(train).best
    print(f"local: {local.ids}")

    settings = {
        "round_robin x3": ClusterConfig(3, "round_robin"),
        "replication x2": ClusterConfig(2, "replication"),
        "round_robin x3 + faults": ClusterConfig(3, "round_robin", fault_plan=(
            FaultSpec(1, 30), FaultSpec(2, S, "ensemble"), FaultSpec(0, 2 * S, "bookkeeping"))),
        "replication x2 + faults": ClusterConfig(2, "replication", fault_plan=(
            FaultSpec(1, S + 40), FaultSpec(0, S, "bookkeeping"))),
    }
    for name, ccfg in settings.items():
        run_dir = out / name.replace(" ", "_").replace("+", "").replace("__", "_")
        res = run_cluster(ccfg, cfg, train, None, run_dir)
        diff = float(np.max(np.abs(res.best.weights - local.weights))) if res.best.ids == local.ids else float("nan")
        print(f"{name:<26} same members: {res.best.ids == local.ids}  max |dw|: {diff:.2e}  "
              f"preemptions: {len(res.run_log.events('preempted'))}  "
              f"transitions: {committed_transitions(run_dir / 'checkpoints')}")


if __name__ == "__main__":
    main()

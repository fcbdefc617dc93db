"""Compare reduction strategies (null only, clip, embedding noise, importance
padding) on the same shadow and target models."""

import argparse
import copy
import csv
from pathlib import Path

from clid_audit.config import ExperimentConfig, load_config
from clid_audit.experiments import audit, build_world, calibrate, train_role
from clid_audit.reduction import STRATEGIES


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--strategies", nargs="+", default=list(STRATEGIES))
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", default="runs/reduction_comparison")
    args = ap.parse_args()
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    cfg.attacks.names = ["clid_th", "clid_vec"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in args.seeds:
        bundle = build_world(cfg, seed)
        shadow = train_role(bundle, cfg, "shadow")[-1].model()
        target = train_role(bundle, cfg, "target")[-1].model()
        cal = calibrate(shadow, bundle, cfg)
        for strategy in args.strategies:
            c = copy.deepcopy(cfg)
            c.reduction.strategy = strategy
            res = audit(shadow, target, bundle, c, args.jobs, calibration=cal)
            for name, r in res.reports.items():
                rows.append((seed, strategy, name, r.auc, r.tpr_at_1pct_fpr, r.query_count))
            print(f"seed {seed} {strategy:12s} " + " ".join(f"{k}={r.auc:.3f}" for k, r in res.reports.items()))
    with (out / "reduction_comparison.csv").open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["seed", "strategy", "attack", "auc", "tpr_at_1pct_fpr", "queries"])
        w.writerows(rows)


if __name__ == "__main__":
    main()

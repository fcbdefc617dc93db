"""AUC of every attack as the Monte Carlo draw count M = N grows."""

import argparse
import csv
from pathlib import Path

from clid_audit.config import ExperimentConfig, load_config
from clid_audit.experiments import build_world, mc_ablation, train_role
from clid_audit.svg import line_chart


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--sizes", type=int, nargs="+", default=[1, 2, 3, 4, 5])
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", default="runs/mc_ablation")
    args = ap.parse_args()
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in args.seeds:
        bundle = build_world(cfg, seed)
        shadow = train_role(bundle, cfg, "shadow")[-1].model()
        target = train_role(bundle, cfg, "target")[-1].model()
        res = mc_ablation(shadow, target, bundle, cfg, args.sizes, args.jobs)
        for n, reports in res.items():
            for name, r in reports.items():
                rows.append((seed, n, name, r.auc, r.query_count))
            print(f"seed {seed} M=N={n}: " + " ".join(f"{k}={r.auc:.3f}" for k, r in reports.items()))
    with (out / "mc_ablation.csv").open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["seed", "mn", "attack", "auc", "queries"])
        w.writerows(rows)
    names = sorted({r[2] for r in rows})
    series = {
        name: [(n, sum(r[3] for r in rows if r[1] == n and r[2] == name) / len(args.seeds)) for n in args.sizes]
        for name in names
    }
    line_chart(series, out / "mc_ablation.svg", "AUC vs Monte Carlo draws", "M = N", "mean AUC", (0.4, 1.0))


if __name__ == "__main__":
    main()

"""Single-draw discrepancy AUC per timestep on the shadow split, plus the
calibrated window. Writes a CSV and an SVG chart."""

import argparse
import csv
from pathlib import Path

from clid_audit.config import ExperimentConfig, load_config
from clid_audit.experiments import build_world, calibrate, train_role
from clid_audit.svg import line_chart


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", help="experiment config (defaults to built-in)")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--stride", type=int, default=2)
    ap.add_argument("--out", default="runs/timestep_sweep")
    args = ap.parse_args()
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    cfg.plan.candidate_stride = args.stride
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    series = {}
    with (out / "timestep_sweep.csv").open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["seed", "timestep", "auc", "window"])
        for seed in args.seeds:
            bundle = build_world(cfg, seed)
            shadow = train_role(bundle, cfg, "shadow")[-1].model()
            cal = calibrate(shadow, bundle, cfg)
            for t, auc in sorted(cal.aucs.items()):
                w.writerow([seed, t, repr(auc), " ".join(map(str, cal.window))])
            series[f"seed {seed}"] = sorted(cal.aucs.items())
            print(f"seed {seed}: window {cal.window} fallback={cal.fallback} best AUC {max(cal.aucs.values()):.3f}")
    line_chart(series, out / "timestep_sweep.svg", "Single-draw discrepancy AUC", "timestep", "AUC", (0.4, 1.0))


if __name__ == "__main__":
    main()

"""``clid-audit`` command line: staged runs sharing one output directory and
a hash-checked manifest."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import BASELINES
from .config import ConfigError, ExperimentConfig, load_config
from .diffusion import ConditionEmbedder, DivergenceError, load_checkpoint, save_checkpoint
from .experiments import (
    ROLES,
    WorldBundle,
    audit,
    build_world,
    run_defenses,
    train_role,
    trajectory,
    validate_assumption,
)
from .indicator import write_indicator_dump
from .svg import line_chart
from .worlds import GaussianMixtureWorld, SplitSpec, ToyDataset

log = logging.getLogger("clid_audit")

MANIFEST = "manifest.json"
TIMINGS = "timings.json"
EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class ValidationFailure(Exception):
    """Bad input: config, missing or tampered artifacts, unusable splits."""


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _dump_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


class Run:
    """An output directory: manifest bookkeeping plus artifact loaders."""

    def __init__(self, out: Path, cfg: ExperimentConfig):
        self.out = out
        self.cfg = cfg
        self.config_hash = cfg.content_hash()
        self.manifest = self._read_manifest()

    def _read_manifest(self) -> dict:
        p = self.out / MANIFEST
        if not p.exists():
            return {
                "format": "clid-audit-manifest",
                "tool_version": __version__,
                "config_hash": self.config_hash,
                "seed": self.cfg.seed,
                "stages": {},
            }
        m = json.loads(p.read_text())
        if m.get("config_hash") != self.config_hash:
            raise ValidationFailure(
                f"{p}: recorded config hash {m.get('config_hash', '?')[:12]} does not match the "
                f"current config {self.config_hash[:12]}; use a fresh --out directory"
            )
        return m

    def rel(self, path: Path) -> str:
        return path.relative_to(self.out).as_posix()

    def require(self, *stages: str) -> None:
        """Check that the stages ran and that their artifacts are untouched."""
        for stage in stages:
            rec = self.manifest["stages"].get(stage)
            if rec is None:
                raise ValidationFailure(f"stage {stage!r} has not been run in {self.out}")
            for rel, digest in rec["artifacts"].items():
                p = self.out / rel
                if not p.exists():
                    raise ValidationFailure(f"missing artifact {p}")
                if sha256_file(p) != digest:
                    raise ValidationFailure(f"artifact {p} does not match its manifest hash")

    def record(self, stage: str, paths, seconds: float, **extra) -> None:
        self.manifest["stages"][stage] = {
            "artifacts": {self.rel(p): sha256_file(p) for p in sorted(paths)},
            **extra,
        }
        _dump_json(self.out / MANIFEST, self.manifest)
        tp = self.out / TIMINGS
        timings = json.loads(tp.read_text()) if tp.exists() else {}
        timings[stage] = round(seconds, 3)
        _dump_json(tp, timings)

    # artifact loaders

    def bundle(self) -> WorldBundle:
        self.require("world")
        w = json.loads((self.out / "world" / "world.json").read_text())
        world = GaussianMixtureWorld.from_dict(w["world"])
        return WorldBundle(
            embedder=ConditionEmbedder.from_dict(w["embedder"]),
            world=world,
            dataset=ToyDataset.from_jsonl(self.out / "world" / "dataset.jsonl", world),
            split=SplitSpec.from_json(self.out / "world" / "split.json"),
            schedule=self.cfg.training.schedule(),
            seed=int(w["seed"]),
        )

    def checkpoint_paths(self, role: str) -> list[Path]:
        return sorted((self.out / "checkpoints" / role).glob("step_*.json"))

    def checkpoints(self, role: str):
        self.require(f"train_{role}")
        paths = self.checkpoint_paths(role)
        if not paths:
            raise ValidationFailure(f"no {role} checkpoints in {self.out}")
        return [load_checkpoint(p) for p in paths]


# --------------------------------------------------------------------------
# stages


def cmd_world(run: Run, args) -> dict:
    bundle = build_world(run.cfg)
    d = run.out / "world"
    d.mkdir(parents=True, exist_ok=True)
    paths = [
        bundle.dataset.to_jsonl(d / "dataset.jsonl"),
        bundle.split.to_json(d / "split.json"),
        _dump_json(d / "world.json", {
            "seed": bundle.seed,
            "world": bundle.world.to_dict(),
            "embedder": bundle.embedder.to_dict(),
        }),
    ]
    s = bundle.split
    return {
        "paths": paths,
        "summary": {
            "seed": bundle.seed,
            "points": len(bundle.dataset),
            "member": len(s.member_indices),
            "holdout": len(s.holdout_indices),
            "aux_member": len(s.aux_member_indices),
            "aux_holdout": len(s.aux_holdout_indices),
        },
    }


def _train_one(run: Run, bundle: WorldBundle, role: str, resume: bool) -> dict:
    d = run.out / "checkpoints" / role
    d.mkdir(parents=True, exist_ok=True)
    existing = run.checkpoint_paths(role)
    resume_from = None
    if existing and resume:
        resume_from = load_checkpoint(existing[-1])
        log.info("resuming %s from step %d", role, resume_from.step)
    elif existing:
        for p in existing:
            p.unlink()
    loader_log: list = []
    t0 = time.perf_counter()
    train_role(
        bundle, run.cfg, role,
        resume_from=resume_from,
        loader_log=loader_log,
        on_checkpoint=lambda ck: save_checkpoint(d / f"step_{ck.step:07d}.json", ck),
    )
    seen = sorted({int(i) for b in loader_log for i in b})
    prev = d / "loader_log.json"
    if resume_from is not None and prev.exists():
        old = json.loads(prev.read_text())
        seen = sorted(set(seen) | set(old["indices_seen"]))
        n_batches = old["batches"] + len(loader_log)
    else:
        n_batches = len(loader_log)
    _dump_json(prev, {"role": role, "batches": n_batches, "indices_seen": seen})
    paths = [*run.checkpoint_paths(role), prev]
    final = load_checkpoint(run.checkpoint_paths(role)[-1])
    run.record(
        f"train_{role}", paths, time.perf_counter() - t0,
        final_step=final.step, final_loss=final.train_loss,
    )
    return {"role": role, "checkpoints": len(paths) - 1, "final_step": final.step, "final_loss": final.train_loss}


def cmd_train(run: Run, args) -> dict:
    bundle = run.bundle()
    roles = ROLES if args.role == "both" else (args.role,)
    return {"summary": [_train_one(run, bundle, r, args.resume) for r in roles], "recorded": True}


def _write_roc(path: Path, roc) -> Path:
    roc.to_csv(path)
    return path


def cmd_attack(run: Run, args) -> dict:
    bundle = run.bundle()
    shadow = run.checkpoints("shadow")[-1].model()
    target = run.checkpoints("target")[-1].model()
    res = audit(shadow, target, bundle, run.cfg, args.jobs)
    d = run.out / "attack"
    d.mkdir(parents=True, exist_ok=True)
    out = run.cfg.output
    paths = [
        _dump_json(d / "report.json", {
            "reports": res.summary(),
            "window": list(res.calibration.window),
            "taus": res.taus,
        }),
        _dump_json(d / "calibration.json", {
            "window": list(res.calibration.window),
            "center": res.calibration.center,
            "fallback": res.calibration.fallback,
            "aucs": {str(k): v for k, v in res.calibration.aucs.items()},
        }),
    ]
    if res.threshold_model is not None:
        paths.append(_dump_json(d / "attack_clid_th.json", res.threshold_model.to_dict()))
    if res.vector_model is not None:
        paths.append(_dump_json(d / "attack_clid_vec.json", res.vector_model.to_dict()))
    if out.write_indicator_dumps:
        for role, split in (("shadow", res.shadow), ("target", res.target)):
            paths.append(write_indicator_dump(d / f"indicator_{role}.jsonl", split.estimates, split.labels))
    if out.write_roc_csv:
        for name, roc in res.rocs.items():
            paths.append(_write_roc(d / f"roc_{name}.csv", roc))
    return {
        "paths": paths,
        "summary": {name: {"auc": r.auc, "asr": r.asr, "tpr@1%fpr": r.tpr_at_1pct_fpr, "queries": r.query_count}
                    for name, r in res.reports.items()},
    }


def cmd_trajectory(run: Run, args) -> dict:
    bundle = run.bundle()
    traj = trajectory(run.checkpoints("shadow"), run.checkpoints("target"), bundle, run.cfg, args.jobs)
    d = run.out / "trajectory"
    d.mkdir(parents=True, exist_ok=True)
    csv_path = d / "trajectory.csv"
    with csv_path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "attack", "auc", "asr", "tpr_at_1pct_fpr"])
        for step, reports in traj:
            for name, r in reports.items():
                w.writerow([step, name, repr(r.auc), repr(r.asr), repr(r.tpr_at_1pct_fpr)])
    paths = [csv_path, _dump_json(d / "trajectory.json", [
        {"step": step, "reports": {k: r.to_dict() for k, r in reports.items()}} for step, reports in traj
    ])]
    if run.cfg.output.write_svg:
        series = {name: [(step, reports[name].auc) for step, reports in traj] for name in traj[0][1]}
        paths.append(line_chart(series, d / "trajectory.svg", "Attack AUC over training", "training step", "AUC", (0.0, 1.0)))
    return {"paths": paths, "summary": [{"step": s, **{k: r.auc for k, r in rep.items()}} for s, rep in traj]}


def cmd_validate_assumption(run: Run, args) -> dict:
    bundle = run.bundle()
    target = run.checkpoints("target")[-1].model()
    ev = run.cfg.evaluation
    rep = validate_assumption(
        target, bundle, bundle.split.member_indices, bundle.split.holdout_indices,
        ev.truncation_levels, ev.assumption_metrics, ev.samples_per_condition, bundle.seed,
    )
    d = run.out / "assumption"
    d.mkdir(parents=True, exist_ok=True)
    csv_path = d / "assumption.csv"
    with csv_path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "level", "member", "holdout", "holdout_minus_member"])
        for m in rep.metrics:
            for lv, a, b, diff in zip(rep.levels, rep.member[m], rep.holdout[m], rep.differences(m)):
                w.writerow([m, repr(lv), repr(a), repr(b), repr(diff)])
    paths = [csv_path, _dump_json(d / "assumption.json", rep.to_dict())]
    return {"paths": paths, "summary": {m: {"differences": rep.differences(m), "full_minus_null": rep.full_minus_null(m)}
                                        for m in rep.metrics}}


def cmd_defense(run: Run, args) -> dict:
    bundle = run.bundle()
    outcomes = run_defenses(run.cfg, jobs=args.jobs, bundle=bundle)
    d = run.out / "defense"
    paths = [_dump_json(d / "defense.json", [o.to_dict() for o in outcomes])]
    return {
        "paths": paths,
        "summary": {o.label: {"auc": {k: r.auc for k, r in o.reports.items()}, "auc_delta": o.auc_delta,
                              "utility_fid": o.utility_fid, "utility_delta": o.utility_delta} for o in outcomes},
    }


COMMANDS = {
    "world": (cmd_world, ()),
    "train": (cmd_train, ("world",)),
    "attack": (cmd_attack, ("world", "train_shadow", "train_target")),
    "trajectory": (cmd_trajectory, ("world", "train_shadow", "train_target")),
    "validate-assumption": (cmd_validate_assumption, ("world", "train_target")),
    "defense": (cmd_defense, ("world",)),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clid-audit", description="Membership audits of toy conditional diffusion models.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="experiment config (JSON)")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--jobs", type=int, default=1, help="worker threads for scoring")
        sp.add_argument("--out", default=None, help="output directory (default: config out_dir)")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "train":
            sp.add_argument("--role", choices=("shadow", "target", "both"), default="both")
            sp.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
    return p


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(type(o).__name__)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        if args.jobs < 1:
            raise ValidationFailure("--jobs must be >= 1")
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        out = Path(args.out if args.out is not None else cfg.out_dir)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise ValidationFailure(f"cannot create output directory {out}: {e}") from None
        run = Run(out, cfg)
        fn, needs = COMMANDS[args.command]
        run.require(*needs)
        t0 = time.perf_counter()
        result = fn(run, args)
        if not result.get("recorded"):
            stage = args.command.replace("-", "_")
            run.record(stage, result["paths"], time.perf_counter() - t0)
    except (ConfigError, ValidationFailure) as e:
        print(f"clid-audit: error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except ValueError as e:
        # metric and protocol preconditions on the data (e.g. a single-label split)
        print(f"clid-audit: error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (DivergenceError, OSError, RuntimeError) as e:
        print(f"clid-audit: runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps({"command": args.command, "summary": result["summary"]}, indent=2, default=_jsonable))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

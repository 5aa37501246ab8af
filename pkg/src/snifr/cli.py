"""Command line entry point: synth, train, compare, gradcheck, export.

Every command writes a run manifest (resolved configuration, seed, tool
version) before any computation, so an interrupted run still leaves a
machine-readable record. All randomness flows from --seed; when omitted,
a seed is drawn from OS entropy and recorded in the manifest.

Exit codes: 0 success, 1 computational failure, 2 usage error.
Fold/model work fans out to a process pool; --jobs (or the SNIFR_THREADS
environment variable) bounds it.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, asdict

import numpy as np

from . import __version__
from . import autodiff as ad
from . import evaluation as ev
from . import models as sm
from . import report as rp
from . import training as tr
from .data import (Dataset, FoldPlan, random_kfold, read_dataset,
                   stratified_kfold, synth_complementary, write_dataset)
from .models import FusionKind, ModelConfig
from .training import TrainConfig

MODEL_CHOICES = [kind.value for kind in FusionKind]


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    tool_version: str
    out_dir: str | None

    def write(self, path: str | None) -> None:
        payload = json.dumps(asdict(self), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as f:
                f.write(payload + "\n")
        else:
            print(payload)


def _resolve_seed(seed: int | None) -> int:
    if seed is not None:
        return seed
    return int(np.random.SeedSequence().entropy) % 2**64


def _resolve_jobs(requested: int | None, cap: int) -> int:
    env = os.environ.get("SNIFR_THREADS")
    if env is not None:
        return max(1, int(env))
    if requested is not None:
        return max(1, requested)
    return max(1, min(os.cpu_count() or 1, cap))


def _model_config(args, kind: str, seed: int) -> ModelConfig:
    return ModelConfig(
        fusion_kind=FusionKind(kind),
        d_model=args.dmodel,
        d_ff=args.dff,
        n_heads=args.heads,
        n_encoder_layers=args.layers,
        dropout_p=args.dropout,
        seed=seed,
    )


def _train_config(args, seed: int) -> TrainConfig:
    return TrainConfig(
        lr=args.lr,
        weight_decay=args.wd,
        epochs=args.epochs,
        batch_size=args.batch,
        early_stop_patience=args.patience if args.patience > 0 else None,
        val_fraction=args.val_fraction,
        seed=seed,
    )


def _plan_hash(plan: FoldPlan) -> str:
    canonical = json.dumps(sorted(plan.assignment.items())).encode()
    return hashlib.sha256(canonical).hexdigest()


# ---------------------------------------------------------------------------
# Fold execution (process-pool friendly)
# ---------------------------------------------------------------------------

def _fold_worker(payload: dict):
    dataset = read_dataset(payload["data"])
    plan = FoldPlan(k=payload["k"],
                    assignment={int(c): f for c, f in payload["assignment"]})
    model_cfg = ModelConfig.from_dict(payload["model_cfg"])
    train_cfg = TrainConfig(**payload["train_cfg"])
    result = tr.train_eval_fold(dataset, plan, payload["fold"], model_cfg, train_cfg)
    if payload.get("ckpt_path"):
        sm.save_checkpoint(result.model, payload["ckpt_path"])
    return payload["tag"], payload["fold"], result.run, result.report.to_dict()


def _run_fold_tasks(tasks: list[dict], jobs: int):
    if jobs <= 1 or len(tasks) <= 1:
        return [_fold_worker(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_fold_worker, tasks))


def _make_plan(dataset: Dataset, folds: int, seed: int, stratify: bool) -> FoldPlan:
    if stratify:
        return stratified_kfold(dataset, folds, seed)
    return random_kfold(dataset, folds, seed)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args, parser) -> int:
    if args.sigma <= 0:
        parser.error("--sigma must be positive")
    if args.n < 40:
        parser.error("--n must be at least 40")
    seed = _resolve_seed(args.seed)
    manifest = RunManifest(command="synth",
                           config={"n": args.n, "sigma": args.sigma, "out": args.out},
                           seed=seed, tool_version=__version__, out_dir=None)
    manifest.write(args.out + ".manifest.json")
    dataset = synth_complementary(args.n, args.sigma, seed)
    write_dataset(dataset, args.out)
    print(f"wrote {len(dataset)} records to {args.out}")
    return 0


def cmd_train(args, parser) -> int:
    seed = _resolve_seed(args.seed)
    model_cfg = _model_config(args, args.model, seed)
    train_cfg = _train_config(args, seed)
    os.makedirs(args.out_dir, exist_ok=True)
    manifest = RunManifest(
        command="train",
        config={"data": args.data, "model": model_cfg.to_dict(),
                "train": train_cfg.to_dict(), "folds": args.folds,
                "stratify": not args.no_stratify, "jobs": args.jobs},
        seed=seed, tool_version=__version__, out_dir=args.out_dir)
    manifest.write(os.path.join(args.out_dir, "manifest.json"))

    dataset = read_dataset(args.data)
    plan = _make_plan(dataset, args.folds, seed, not args.no_stratify)
    jobs = _resolve_jobs(args.jobs, cap=args.folds)
    print(f"training {args.model} on {len(dataset)} records, "
          f"{args.folds} folds, jobs={jobs}")

    tasks = [{
        "tag": args.model, "fold": fold, "data": args.data, "k": plan.k,
        "assignment": sorted(plan.assignment.items()),
        "model_cfg": model_cfg.to_dict(), "train_cfg": train_cfg.to_dict(),
        "ckpt_path": os.path.join(args.out_dir, f"fold_{fold}.ckpt"),
    } for fold in range(plan.k)]
    results = sorted(_run_fold_tasks(tasks, jobs), key=lambda r: r[1])

    reports = []
    fold_runs = []
    for _, fold, run, report_dict in results:
        report = ev.EvalReport.from_dict(report_dict)
        reports.append(report)
        fold_runs.append((fold, run.train_loss, run.val_metric))
        with open(os.path.join(args.out_dir, f"fold_{fold}.json"), "w") as f:
            f.write(report.to_json() + "\n")
        with open(os.path.join(args.out_dir, f"fold_{fold}.run.jsonl"), "w") as f:
            f.write("\n".join(run.to_json_lines(train_cfg.lr)) + "\n")
        print(f"fold {fold}: acc={report.totals['acc']:.4f} "
              f"f1={report.totals['f1']:.4f} auc={report.totals['auc']:.4f} "
              f"stopped at epoch {run.stopped_epoch} (best {run.best_epoch})")

    mean = tr.mean_report(reports)
    with open(os.path.join(args.out_dir, "mean.json"), "w") as f:
        json.dump(mean, f, indent=2)
        f.write("\n")
    rows = [(args.model, mean)]
    table = rp.render_table(rows)
    with open(os.path.join(args.out_dir, "table.txt"), "w") as f:
        f.write(table + "\n")
    rp.write_csv(rows, os.path.join(args.out_dir, "report.csv"))
    rp.confusion_figure(mean["confusion"], os.path.join(args.out_dir, "confusion.png"),
                        title=f"{args.model}: summed confusion over folds")
    rp.curves_figure(fold_runs, os.path.join(args.out_dir, "curves.png"))
    print(table)
    return 0


def cmd_compare(args, parser) -> int:
    models = args.models
    if len(models) < 2:
        parser.error("--models needs at least two entries")
    for name in models:
        if name not in MODEL_CHOICES:
            parser.error(f"unknown model {name!r}; choose from {MODEL_CHOICES}")
    seed = _resolve_seed(args.seed)
    os.makedirs(args.out, exist_ok=True)
    model_cfgs = {name: _model_config(args, name, seed) for name in models}
    train_cfg = _train_config(args, seed)
    manifest = RunManifest(
        command="compare",
        config={"data": args.data, "models": models,
                "model_cfgs": {n: c.to_dict() for n, c in model_cfgs.items()},
                "train": train_cfg.to_dict(), "folds": args.folds,
                "stratify": not args.no_stratify, "jobs": args.jobs},
        seed=seed, tool_version=__version__, out_dir=args.out)
    manifest.write(os.path.join(args.out, "manifest.json"))

    dataset = read_dataset(args.data)
    # One fold plan shared by every model, so splits never confound rows.
    plan = _make_plan(dataset, args.folds, seed, not args.no_stratify)
    plan_hash = _plan_hash(plan)
    jobs = _resolve_jobs(args.jobs, cap=args.folds * len(models))
    print(f"comparing {models} on {len(dataset)} records, "
          f"{args.folds} folds, jobs={jobs}, plan {plan_hash[:12]}")

    assignment = sorted(plan.assignment.items())
    tasks = [{
        "tag": name, "fold": fold, "data": args.data, "k": plan.k,
        "assignment": assignment, "model_cfg": model_cfgs[name].to_dict(),
        "train_cfg": train_cfg.to_dict(),
    } for name in models for fold in range(plan.k)]
    t0 = time.monotonic()
    results = _run_fold_tasks(tasks, jobs)
    print(f"trained {len(tasks)} fold models in {time.monotonic() - t0:.1f}s")

    per_model: dict[str, dict] = {name: {"folds": [None] * plan.k} for name in models}
    for tag, fold, run, report_dict in results:
        per_model[tag]["folds"][fold] = report_dict
        print(f"{tag} fold {fold}: total acc="
              f"{report_dict['totals']['acc']:.4f} "
              f"(stopped epoch {run.stopped_epoch})")
    rows = []
    for name in models:
        reports = [ev.EvalReport.from_dict(d) for d in per_model[name]["folds"]]
        mean = tr.mean_report(reports)
        per_model[name]["mean"] = mean
        per_model[name]["fold_plan_sha256"] = plan_hash
        rows.append((name, mean))

    payload = {"order": models, "folds": plan.k, "fold_plan_sha256": plan_hash,
               "models": per_model}
    with open(os.path.join(args.out, "compare.json"), "w") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")
    table = rp.render_table(rows)
    with open(os.path.join(args.out, "compare.txt"), "w") as f:
        f.write(table + "\n")
    rp.write_csv(rows, os.path.join(args.out, "compare.csv"))
    rp.totals_bar_figure(rows, os.path.join(args.out, "compare.png"))
    print(table)
    return 0


def cmd_gradcheck(args, parser) -> int:
    seed = _resolve_seed(args.seed)
    manifest = RunManifest(
        command="gradcheck",
        config={"model": args.model, "dmodel": args.dmodel,
                "threshold": 1e-4, "h": 1e-5},
        seed=seed, tool_version=__version__, out_dir=args.out_dir)
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        manifest.write(os.path.join(args.out_dir, "manifest.json"))
    else:
        manifest.write(None)

    if args.inject_fault:
        ad._INJECT_MATMUL_FAULT = True
    try:
        report = sm.gradient_check_model(FusionKind(args.model),
                                         d_model=args.dmodel, seed=seed)
    finally:
        ad._INJECT_MATMUL_FAULT = False
    for name, err in report:
        print(f"{err:.3e}  {name}")
    worst = report[0][1]
    ok = worst < 1e-4
    print(f"max relative error: {worst:.3e} -> {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def cmd_export(args, parser) -> int:
    seed = _resolve_seed(args.seed)
    manifest = RunManifest(
        command="export",
        config={"checkpoint": args.checkpoint, "data": args.data, "out": args.out},
        seed=seed, tool_version=__version__, out_dir=None)
    manifest.write(args.out + ".manifest.json")
    model = sm.load_checkpoint(args.checkpoint)
    dataset = read_dataset(args.data)
    ev.export_embeddings(model, dataset, args.out)
    print(f"wrote {len(dataset)} embeddings to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dmodel", type=int, default=256, help="internal width")
    p.add_argument("--dff", type=int, default=None, help="FFN width (default 2*dmodel)")
    p.add_argument("--heads", type=int, default=1, help="attention heads")
    p.add_argument("--layers", type=int, default=1, help="encoder layers per modality")
    p.add_argument("--dropout", type=float, default=0.1)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--epochs", type=int, default=25)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--wd", type=float, default=1e-5)
    p.add_argument("--patience", type=int, default=5,
                   help="early stopping patience; 0 disables")
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--no-stratify", action="store_true",
                   help="plain shuffled folds instead of stratified")
    p.add_argument("--jobs", type=int, default=None,
                   help="parallel fold workers (SNIFR_THREADS overrides)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="snifr",
        description="Audio-visual fusion classifiers on 768-d features")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a complementary-modality dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="k-fold cross-validate one model")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, choices=MODEL_CHOICES)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", required=True)
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("compare", help="cross-validate several models on shared folds")
    p.add_argument("--data", required=True)
    p.add_argument("--models", nargs="+", required=True, metavar="MODEL")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory")
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("gradcheck", help="finite-difference check of one variant")
    p.add_argument("--model", required=True, choices=MODEL_CHOICES)
    p.add_argument("--dmodel", type=int, default=8)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("export", help="export penultimate embeddings to CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_export)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args, parser)
    except (ValueError, OSError, tr.NonFiniteGradError, ad.NonFiniteLossError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

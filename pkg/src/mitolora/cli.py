"""Batch command line: split -> train -> evaluate -> predict -> report.

Commands communicate only through files in the run directory::

    <out>/config.yaml               resolved config echo
    <out>/split_plan.json           fold assignment
    <out>/fold<j>/checkpoint.safetensors, train_log.jsonl
    <out>/evaluation.json, evaluation.txt
    <out>/predictions.csv
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from .config import ConfigError, RunConfig, load_config
from .ensemble import EnsembleError, FoldEnsemble, export_predictions, validate_predictions_file
from .lora import LoraError
from .manifest import CropRecord, Manifest, ManifestError, load_manifest
from .metrics import (
    MetricsInputError,
    MetricsReport,
    SweepMode,
    ThresholdPolicy,
    UndefinedMetricError,
    bac_curve,
    domainwise_report,
    format_table,
    metrics_row,
    optimize_threshold,
    optimize_threshold_per_fold,
)
from .model_zoo import ModelZooError, build_model, get_backbone
from .preprocess import InputPipeline, PreprocessError
from .splitter import SplitError, SplitStrategy, group_kfold, load_plan, random_kfold, save_plan, verify_no_leakage
from .trainer import (
    CropDataset,
    TrainingError,
    fit,
    load_checkpoint,
    make_pipelines,
    model_from_checkpoint,
    predict_probs,
    preprocess_from_checkpoint,
    save_checkpoint,
)

log = logging.getLogger("mitolora")

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".tif", ".tiff")


class InvariantViolation(RuntimeError):
    """A produced artifact failed its own checks (exit code 1)."""


def _config(args) -> RunConfig:
    cfg = load_config(args.config).with_overrides(seed=args.seed, out=args.out)
    cfg.check_paths()
    return cfg


def _plan_path(cfg: RunConfig, args) -> Path:
    return Path(args.plan) if getattr(args, "plan", None) else cfg.output_dir / "split_plan.json"


def _fold_dir(cfg: RunConfig, fold: int) -> Path:
    return cfg.output_dir / f"fold{fold}"


def cmd_split(args) -> int:
    cfg = _config(args)
    m = load_manifest(cfg.manifest)
    s = cfg.split
    if s.strategy is SplitStrategy.GROUP:
        plan = group_kfold(m, s.k, s.seed)
    else:
        plan = random_kfold(m, s.k, s.seed, stratify=s.stratify)
    audit = verify_no_leakage(plan, m)
    cfg.echo()
    path = save_plan(plan, cfg.output_dir / "split_plan.json")

    print(f"{plan.strategy.value} split, k={plan.k}, seed={plan.seed} -> {path}")
    print(f"{'fold':>4}  {'images':>6}  {'crops':>5}  {'AMF':>4}  {'NMF':>4}  domains")
    for j in range(plan.k):
        sub = m.subset(plan.fold_images(j))
        doms = sorted({r.domain_id for r in sub})
        n_amf = sum(sub.labels)
        print(f"{j:>4}  {len(plan.fold_images(j)):>6}  {len(sub):>5}  {n_amf:>4}  {len(sub) - n_amf:>4}  {','.join(doms)}")
    if not audit.ok:
        raise InvariantViolation(f"split plan leaks: {json.dumps(audit.to_dict())}")
    return 0


def _train_fold(cfg: RunConfig, plan, m: Manifest, fold: int) -> None:
    train_ids, val_ids = plan.fold_pairs()[fold]
    train_pipe, val_pipe = make_pipelines(cfg.backbone, cfg.preprocess, cfg.augmentation)
    train_set = CropDataset(m.subset(train_ids), train_pipe)
    val_set = CropDataset(m.subset(val_ids), val_pipe)
    spec = get_backbone(cfg.backbone).with_feature_mode(cfg.feature_mode)
    model = build_model(spec, cfg.lora, weights_path=cfg.weights, seed=cfg.model_seed)
    out = _fold_dir(cfg, fold)
    ckpt = fit(
        model,
        train_set,
        val_set,
        cfg.train,
        log_path=out / "train_log.jsonl",
        fold=fold,
        split_plan_digest=plan.digest(),
        model_seed=cfg.model_seed,
    )
    if not ckpt.consumed_crop_ids.isdisjoint(val_set.crop_ids):
        raise InvariantViolation(f"fold {fold}: validation crops reached the optimizer")
    path = save_checkpoint(ckpt, out / "checkpoint.safetensors")
    bm = ckpt.best_metrics
    print(
        f"fold {fold}: best epoch {ckpt.epoch}, val BAC {bm['balanced_accuracy']:.4f} "
        f"(sens {bm['sensitivity']:.4f}, spec {bm['specificity']:.4f}) -> {path}"
    )


def cmd_train(args) -> int:
    cfg = _config(args)
    m = load_manifest(cfg.manifest)
    m.require_both_labels()
    plan_path = _plan_path(cfg, args)
    if not plan_path.is_file():
        raise ConfigError(f"split plan not found at {plan_path}; run `mitolora split` first")
    plan = load_plan(plan_path)
    audit = verify_no_leakage(plan, m)
    if not audit.ok:
        raise InvariantViolation(f"split plan leaks: {json.dumps(audit.to_dict())}")
    cfg.echo()
    folds = range(plan.k) if args.fold == "all" else [int(args.fold)]
    for fold in folds:
        if not 0 <= fold < plan.k:
            raise ConfigError(f"fold {fold} outside [0, {plan.k})")
        _train_fold(cfg, plan, m, fold)
    return 0


def _default_checkpoints(cfg: RunConfig) -> list[Path]:
    return sorted(cfg.output_dir.glob("fold*/checkpoint.safetensors"))


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    m = load_manifest(cfg.manifest)
    plan = load_plan(_plan_path(cfg, args))
    paths = [Path(p) for p in args.checkpoints] if args.checkpoints else _default_checkpoints(cfg)
    if not paths:
        raise ConfigError(f"no checkpoints found under {cfg.output_dir}; run `mitolora train` first")
    policy = cfg.threshold
    if args.mode:
        policy = ThresholdPolicy(policy.grid_lo, policy.grid_hi, policy.grid_step, args.mode)

    fold_probs, fold_labels, fold_domains, fold_ids = [], [], [], []
    for p in paths:
        ckpt = load_checkpoint(p)
        if ckpt.fold is None:
            raise ConfigError(f"{p} has no fold index; out-of-fold evaluation needs fold checkpoints")
        if ckpt.split_plan_digest and ckpt.split_plan_digest != plan.digest():
            raise ConfigError(f"{p} was trained on a different split plan")
        val = m.subset(plan.fold_images(ckpt.fold))
        spec = get_backbone(ckpt.backbone)
        pipe = InputPipeline(preprocess_from_checkpoint(ckpt), spec.norm_mean, spec.norm_std, None, train=False)
        probs = predict_probs(model_from_checkpoint(ckpt, cfg.weights), CropDataset(val, pipe), cfg.train.eval_batch_size)
        fold_probs.append(probs)
        fold_labels.append(np.asarray(val.labels))
        fold_domains.append([r.domain_id for r in val])
        fold_ids.append(ckpt.fold)

    probs = np.concatenate(fold_probs)
    labels = np.concatenate(fold_labels)
    domains = sum(fold_domains, [])
    grid = policy.grid()
    result: dict = {"policy": policy.to_dict(), "folds": fold_ids, "n_samples": int(labels.size)}
    if policy.mode is SweepMode.PER_FOLD:
        tau, bac, per_fold = optimize_threshold_per_fold(fold_probs, fold_labels, policy)
        result["per_fold"] = [{"fold": f, "threshold": t, "balanced_accuracy": b} for f, (t, b) in zip(fold_ids, per_fold)]
        curve = np.mean([bac_curve(p, y, grid) for p, y in zip(fold_probs, fold_labels)], axis=0)
    else:
        tau, bac = optimize_threshold(probs, labels, policy)
        curve = bac_curve(probs, labels, grid)
    result["selected_threshold"] = tau
    result["selected_balanced_accuracy"] = bac
    result["sweep"] = [{"threshold": float(t), "balanced_accuracy": float(b)} for t, b in zip(grid, curve)]

    thresholds = sorted({round(tau, 10), *(round(t, 10) for t in (args.threshold or []))})
    reports, text = [], []
    for t in thresholds:
        report = domainwise_report(probs, labels, domains, t)
        fold_bac = [metrics_row(str(f), p, y, t).balanced_accuracy for f, p, y in zip(fold_ids, fold_probs, fold_labels)]
        defined = [b for b in fold_bac if b is not None]
        report.extra = {
            "selected": t == round(tau, 10),
            "fold_balanced_accuracy": fold_bac,
            "mean_fold_balanced_accuracy": float(np.mean(defined)) if defined else None,
        }
        for row in report.rows:
            if row.balanced_accuracy is not None and row.balanced_accuracy != (row.sensitivity + row.specificity) / 2:
                raise InvariantViolation(f"row {row.name}: balanced accuracy identity violated")
        reports.append(report.to_dict())
        tag = " (selected)" if report.extra["selected"] else ""
        text.append(format_table(report).replace("\n", f"{tag}\n", 1))
    result["reports"] = reports

    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "evaluation.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "evaluation.txt").write_text("\n".join(text), encoding="utf-8")
    print(f"selected threshold {tau:.2f} ({policy.mode.value} sweep, BAC {bac:.4f})")
    print("\n".join(text))
    return 0


def _unlabeled_manifest(directory: Path) -> Manifest:
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise ConfigError(f"no images ({', '.join(IMAGE_SUFFIXES)}) in {directory}")
    # labels are placeholders; prediction never reads them
    return Manifest(
        tuple(CropRecord(p.stem, p.name, p.stem, 0, "unknown", "") for p in files),
        root=directory,
    )


def cmd_predict(args) -> int:
    images = Path(args.images)
    if images.is_dir():
        m = _unlabeled_manifest(images)
    else:
        m = load_manifest(images)
    checkpoints = [load_checkpoint(p) for p in args.checkpoints]
    if args.threshold is not None:
        tau = args.threshold
    elif args.evaluation:
        tau = json.loads(Path(args.evaluation).read_text(encoding="utf-8"))["selected_threshold"]
    else:
        tau = 0.5
    ens = FoldEnsemble(checkpoints, threshold=tau, aggregation=args.aggregation, weights_path=args.weights)
    records = ens.predict(m)
    out = Path(args.out)
    path = export_predictions(records, out / "predictions.csv" if out.suffix != ".csv" else out)
    problems = validate_predictions_file(path, k=len(checkpoints))
    n_amf = sum(r.label for r in records)
    print(f"{len(records)} predictions from {len(checkpoints)} member(s) at threshold {tau:.2f}: {n_amf} AMF, {len(records) - n_amf} NMF -> {path}")
    if problems:
        raise InvariantViolation("predictions file failed validation: " + "; ".join(problems[:5]))
    return 0


def cmd_report(args) -> int:
    """One summary row per run and reported threshold, optionally with domain tables."""
    header = ["Backbone", "LoRA rank", "Split", "Input", "Threshold", "Avg fold BAC", "Pooled BAC"]
    rows, details = [], []
    for run in args.runs:
        run = Path(run)
        cfg = yaml.safe_load((run / "config.yaml").read_text(encoding="utf-8"))
        ev = json.loads((run / "evaluation.json").read_text(encoding="utf-8"))
        for rep in ev["reports"]:
            overall = rep["rows"][-1]
            mean_fold = rep.get("mean_fold_balanced_accuracy")
            rows.append(
                [
                    cfg["backbone"],
                    str(cfg["lora"]["rank"]),
                    f"{cfg['split']['strategy']} (k={cfg['split']['k']})",
                    f"{cfg['preprocess']['strategy']} to {cfg['preprocess']['target_size']}",
                    f"{rep['threshold']:.2f}",
                    "-" if mean_fold is None else f"{mean_fold:.4f}",
                    "-" if overall["balanced_accuracy"] is None else f"{overall['balanced_accuracy']:.4f}",
                ]
            )
            if args.domains:
                details.append(f"{run}\n" + format_table(MetricsReport.from_dict(rep)))
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)), "  ".join("-" * w for w in widths)]
    lines += ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows]
    text = "\n".join(lines) + "\n"
    if details:
        text += "\n" + "\n".join(details)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def cmd_synth(args) -> int:
    from .synthetic import make_synthetic_dataset

    m = make_synthetic_dataset(args.out, n_crops=args.n, n_domains=args.domains, seed=args.seed if args.seed is not None else 0)
    print(f"wrote {len(m)} synthetic crops over {len(m.image_ids())} source images to {Path(args.out) / 'manifest.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mitolora", description=__doc__.split("\n")[0])
    parser.add_argument("-q", "--quiet", action="store_true", help="only warnings on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="run config (YAML)")
        p.add_argument("--seed", type=int, default=None, help="override split and training seeds")
        p.add_argument("--out", default=None, help="override the output directory")

    p = sub.add_parser("split", help="write a k-fold split plan")
    common(p)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train one fold (or all) from the split plan")
    common(p)
    p.add_argument("--fold", default="all", help="fold index or 'all'")
    p.add_argument("--plan", default=None, help="split plan (default <out>/split_plan.json)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="out-of-fold threshold sweep and domain-wise report")
    common(p)
    p.add_argument("--checkpoints", nargs="+", default=None)
    p.add_argument("--plan", default=None)
    p.add_argument("--threshold", type=float, action="append", help="also report at this threshold (repeatable)")
    p.add_argument("--mode", choices=[m.value for m in SweepMode], default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="fold-ensemble predictions for a manifest or image directory")
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--images", required=True, help="manifest CSV or directory of crops")
    p.add_argument("--threshold", type=float, default=None, help="decision threshold (e.g. 0.6)")
    p.add_argument("--evaluation", default=None, help="take the threshold from an evaluation.json")
    p.add_argument("--aggregation", choices=["mean_prob", "mean_logit"], default="mean_prob")
    p.add_argument("--weights", default=None, help="backbone weights for gated models")
    p.add_argument("--out", required=True, help="output directory or .csv path")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("report", help="summarize evaluated runs as a table")
    p.add_argument("runs", nargs="+", help="run directories containing config.yaml and evaluation.json")
    p.add_argument("--domains", action="store_true", help="append per-domain tables")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("synth", help="generate a synthetic crop dataset")
    p.add_argument("--out", required=True)
    p.add_argument("-n", type=int, default=200)
    p.add_argument("--domains", type=int, default=4)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)
    return parser


_USER_ERRORS = (
    ConfigError,
    ManifestError,
    SplitError,
    ModelZooError,
    LoraError,
    PreprocessError,
    TrainingError,
    EnsembleError,
    MetricsInputError,
    UndefinedMetricError,
    FileNotFoundError,
)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except InvariantViolation as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return 1
    except _USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

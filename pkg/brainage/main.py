"""
Command-line entry point for the brain age pipeline.

Examples:
  python -m brainage synth  --config configs/synthetic.json --out runs/synth
  python -m brainage select --config configs/synthetic.json --out runs/select
  python -m brainage train  --config configs/synthetic.json --out runs/train --seed 7
  python -m brainage eval   --config configs/synthetic.json --out runs/eval
  python -m brainage cv     --config configs/synthetic.json --out runs/cv
  python -m brainage ablate --config configs/synthetic.json --out runs/ablate
  python -m brainage probe  --config configs/synthetic.json --out runs/probe

Input locations live in the config's ``paths`` block; every command writes
``resolved_config.json`` and ``manifest.json`` under ``--out``.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
import pandas as pd
from pydantic import ValidationError

from .config import create_output_directory, get_settings, load_run_config
from .exceptions import ConfigError, LoadError, NumericError
from .schemas import RunConfig, config_hash
from .services.checkpoint import load_checkpoint, save_checkpoint
from .services.data import (
    kfold_plan,
    load_factors,
    load_fold_plan,
    load_table,
    save_fold_plan,
    synth_generate,
    write_factors,
    write_table,
)
from .services.evaluation import (
    ablation_frame,
    bins_frame,
    compute_metrics,
    cv_frame,
    disentanglement_probe,
    export_scatter,
    export_workbook,
    reconstruction_report,
    run_ablation,
    run_baseline_cv,
    run_cv,
)
from .services.featsel import load_selection, run_selection, save_selection, write_importance_csv
from .services.helpers import metadata_header, write_csv, write_json, write_manifest
from .services.train import fit, predict, split_validation

logger = logging.getLogger("brainage")
settings = get_settings()

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4


def die(message: str, code: int = EXIT_CONFIG) -> None:
    print(message, file=sys.stderr)
    raise SystemExit(code)


def _required(value: Optional[str], name: str) -> Path:
    if not value:
        raise ConfigError(f"paths.{name} must be set for this command")
    return Path(value)


def _metadata(cfg: RunConfig, command: str) -> Dict[str, str]:
    return metadata_header(seed=cfg.seed, config_hash=config_hash(cfg), command=command)


def _fold_plan(cfg: RunConfig, ds, out: Path) -> tuple:
    if cfg.paths.fold_plan:
        plan = load_fold_plan(cfg.paths.fold_plan)
    else:
        plan = kfold_plan(ds.n, cfg.cv.folds, cfg.seed, cfg.cv.stratify, ds.age)
    return plan, save_fold_plan(plan, out / "fold_plan.json")


def cmd_synth(cfg: RunConfig, out: Path) -> List[Path]:
    ds, factors = synth_generate(cfg.synth)
    dataset = write_table(ds, out / "dataset.csv", cfg.table)
    sidecar = write_factors(factors, out / "factors.json")
    print(f"n={ds.n} m1={ds.m1} m2={ds.m2} shared_dim={cfg.synth.shared_dim} seed={cfg.synth.seed}")
    return [dataset, sidecar]


def cmd_select(cfg: RunConfig, out: Path) -> List[Path]:
    ds = load_table(_required(cfg.paths.dataset, "dataset"), cfg.table)
    train, _ = split_validation(np.arange(ds.n), cfg.train.validation_fraction, cfg.train.seed)
    selection = run_selection(ds, train, cfg.selection, n_jobs=settings.n_jobs)
    artifacts = [save_selection(selection, out / "selection.json")]
    metadata = _metadata(cfg, "select")
    for m, report in sorted(selection.reports.items()):
        artifacts.append(write_importance_csv(report, out / f"importance_modality{m}.csv", metadata))
    print(f"kept {len(selection.columns1)} + {len(selection.columns2)} columns (target={selection.target})")
    return artifacts


def cmd_train(cfg: RunConfig, out: Path) -> List[Path]:
    ds = load_table(_required(cfg.paths.dataset, "dataset"), cfg.table)
    train, val = split_validation(np.arange(ds.n), cfg.train.validation_fraction, cfg.train.seed)
    if cfg.paths.selection:
        selection = load_selection(cfg.paths.selection)
        leaked = set(selection.row_ids) & {str(i) for i in ds.ids[val]}
        if leaked:
            raise ConfigError(
                f"Selection at {cfg.paths.selection} was ranked on {len(leaked)} validation rows; "
                "rerun select with the same train.seed and train.validation_fraction"
            )
    else:
        selection = run_selection(ds, train, cfg.selection, n_jobs=settings.n_jobs)
    checkpoint, log = fit(ds, (train, val), cfg.train, selection)
    artifacts = [
        save_checkpoint(checkpoint, out / "checkpoint.npz"),
        log.to_csv(out / "train_log.csv", _metadata(cfg, "train")),
        save_selection(selection, out / "selection.json"),
    ]
    print(f"best epoch {checkpoint.epoch} of {len(log.rows)}, validation MAE {checkpoint.val_mae:.4f} years")
    return artifacts


def cmd_eval(cfg: RunConfig, out: Path) -> List[Path]:
    checkpoint = load_checkpoint(_required(cfg.paths.checkpoint, "checkpoint"))
    ds = load_table(_required(cfg.paths.dataset, "dataset"), cfg.table)
    preds = predict(checkpoint, ds)
    if cfg.evaluation.subset == "validation":
        preds = preds.subset(checkpoint.validation_ids)
    multitask = checkpoint.config.mode == "multitask"
    metrics = compute_metrics(
        preds.age_true, preds.age_pred, preds.sex_true if multitask else None, preds.sex_prob if multitask else None
    )
    metadata = _metadata(cfg, "eval")
    artifacts = [
        write_json(out / "metrics.json", metrics.model_dump(mode="json")),
        write_csv(bins_frame(metrics), out / "bins.csv", metadata),
        write_csv(preds.to_frame(), out / "predictions.csv", metadata),
    ]
    if cfg.evaluation.scatter:
        artifacts += export_scatter(preds.age_true, preds.age_pred, out / "scatter.csv", metadata)
    if len(checkpoint.params.spec.modalities) == 2:
        rows = ds.index_of(checkpoint.validation_ids) if cfg.evaluation.subset == "validation" else None
        try:
            recon = reconstruction_report(checkpoint, ds, rows)
        except ConfigError as exc:
            logger.warning("Skipping reconstruction report: %s", exc)
        else:
            artifacts.append(write_json(out / "reconstruction.json", recon.model_dump(mode="json")))
    print(
        f"n={metrics.n} MAE={metrics.mae:.4f} RMSE={metrics.rmse:.4f} PCC={metrics.pcc:.4f} "
        f"(checkpoint validation MAE {checkpoint.val_mae:.4f})"
    )
    return artifacts


def cmd_cv(cfg: RunConfig, out: Path) -> List[Path]:
    ds = load_table(_required(cfg.paths.dataset, "dataset"), cfg.table)
    plan, plan_path = _fold_plan(cfg, ds, out)
    report, preds = run_cv(ds, plan, cfg)
    metadata = _metadata(cfg, "cv")
    metadata["plan_hash"] = report.plan_hash
    artifacts = [
        plan_path,
        write_csv(cv_frame(report), out / "cv_folds.csv", metadata),
        write_csv(bins_frame(report.pooled), out / "cv_bins.csv", metadata),
        write_csv(preds.to_frame(), out / "cv_predictions.csv", metadata),
        write_json(out / "cv_report.json", report.model_dump(mode="json")),
    ]
    artifacts += export_scatter(preds.age_true, preds.age_pred, out / "cv_scatter.csv", metadata)
    workbook = export_workbook(report, out / "cv_report.xlsx")
    if workbook is not None:
        artifacts.append(workbook)
    if cfg.cv.baseline:
        baseline, _ = run_baseline_cv(ds, plan, cfg.cv.baseline_alpha)
        artifacts.append(write_csv(cv_frame(baseline), out / "baseline_folds.csv", metadata))
        artifacts.append(write_json(out / "baseline_report.json", baseline.model_dump(mode="json")))
        print(f"ridge baseline pooled MAE={baseline.pooled.mae:.4f}")
    pooled = report.pooled
    print(f"{plan.k} folds, pooled MAE={pooled.mae:.4f} RMSE={pooled.rmse:.4f} PCC={pooled.pcc:.4f}")
    return artifacts


def cmd_ablate(cfg: RunConfig, out: Path) -> List[Path]:
    ds = load_table(_required(cfg.paths.dataset, "dataset"), cfg.table)
    plan, plan_path = _fold_plan(cfg, ds, out)
    report = run_ablation(ds, plan, cfg, include_aae=cfg.cv.include_aae)
    frame = ablation_frame(report)
    metadata = _metadata(cfg, "ablate")
    metadata["plan_hash"] = plan.plan_hash()
    artifacts = [
        plan_path,
        write_csv(frame, out / "ablation.csv", metadata),
        write_json(out / "ablation.json", report.model_dump(mode="json")),
    ]
    workbook = export_workbook(report, out / "ablation.xlsx")
    if workbook is not None:
        artifacts.append(workbook)
    print(frame[["variant", "mae", "rmse", "pcc"]].to_string(index=False))
    return artifacts


def cmd_probe(cfg: RunConfig, out: Path) -> List[Path]:
    checkpoint = load_checkpoint(_required(cfg.paths.checkpoint, "checkpoint"))
    ds = load_table(_required(cfg.paths.dataset, "dataset"), cfg.table)
    factors = load_factors(_required(cfg.paths.factors, "factors"))
    report = disentanglement_probe(checkpoint, ds, factors, cfg.probe)
    frame = pd.DataFrame.from_records([row.model_dump() for row in report.modalities])
    artifacts = [
        write_json(out / "probe.json", report.model_dump(mode="json")),
        write_csv(frame, out / "probe.csv", _metadata(cfg, "probe")),
    ]
    print(f"mean R2 gap (generic - unique) = {report.mean_gap:.4f}")
    return artifacts


COMMANDS: Dict[str, Callable[[RunConfig, Path], List[Path]]] = {
    "synth": cmd_synth,
    "select": cmd_select,
    "train": cmd_train,
    "eval": cmd_eval,
    "cv": cmd_cv,
    "ablate": cmd_ablate,
    "probe": cmd_probe,
}


def add_common_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="Run configuration (JSON).")
    parser.add_argument(
        "--out",
        help="Output directory. Defaults to BRAINAGE_OUTPUT_DIR/<command>.",
    )
    parser.add_argument("--seed", type=int, help="Override the config's master seed.")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="brainage", description="Multimodal brain age estimation pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "synth": "Generate a synthetic two-modality cohort and its factor sidecar.",
        "select": "Rank features per modality and write the selection sidecar.",
        "train": "Train one model and save the best-validation checkpoint.",
        "eval": "Evaluate a checkpoint on a dataset.",
        "cv": "Run k-fold cross-validation.",
        "ablate": "Compare modality and task variants on identical folds.",
        "probe": "Measure shared-factor recoverability from generic vs unique codes.",
    }
    for name, text in helps.items():
        add_common_args(sub.add_parser(name, help=text))
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, settings.log_level, logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        stream=sys.stdout,
    )
    if args.seed is not None and args.seed < 0:
        die("--seed must be non-negative", EXIT_CONFIG)

    out: Optional[Path] = None
    try:
        cfg = load_run_config(args.config, seed=args.seed)
        out = create_output_directory(Path(args.out) if args.out else settings.output_dir / args.command)
        resolved = write_json(out / "resolved_config.json", cfg.model_dump(mode="json"))
        artifacts = COMMANDS[args.command](cfg, out)
        write_manifest(out, [resolved, *artifacts], args.command)
    except (ConfigError, ValidationError) as exc:
        die(f"Configuration error: {exc}", EXIT_CONFIG)
    except (LoadError, OSError) as exc:
        die(f"I/O error: {exc}", EXIT_IO)
    except NumericError as exc:
        dump = write_json(
            (out or Path.cwd()) / "numeric_error.json", {"error": str(exc), "diagnostics": exc.diagnostics}
        )
        die(f"Numeric failure: {exc}\nDiagnostics written to {dump}", EXIT_NUMERIC)
    except Exception as exc:
        logger.exception("Command %s failed", args.command)
        die(f"{args.command} failed: {exc}", EXIT_FAILURE)
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())

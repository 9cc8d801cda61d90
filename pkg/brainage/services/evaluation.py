"""
Metrics, cross-validation, the modality x task ablation, scatter exports,
the disentanglement probe, own- versus cross-decoded reconstruction, the
ridge baseline and workbook reports.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from openpyxl import Workbook
from sklearn.linear_model import Ridge
from sklearn.metrics import r2_score
from sklearn.model_selection import KFold, cross_val_predict

from ..config import get_settings
from ..exceptions import ConfigError, DimensionError
from ..schemas import (
    AblationReport,
    AblationRow,
    BinMetrics,
    CvReport,
    FoldResult,
    MetricsReport,
    MetricSummary,
    ProbeConfig,
    ProbeModality,
    ProbeReport,
    ReconstructionModality,
    ReconstructionReport,
    RunConfig,
)
from .checkpoint import Checkpoint
from .data import (
    BIN_LABELS,
    Dataset,
    FoldPlan,
    StandardizationConstants,
    SynthFactors,
    age_bin_labels,
    apply_standardization,
    standardize,
)
from .featsel import run_selection
from .helpers import ensure_writable, write_csv
from .model import cross_decode, decode, encode
from .train import PredictionSet, fit, make_variant, predict, split_validation

logger = logging.getLogger("brainage.services.evaluation")
settings = get_settings()

CI_Z = 1.96


def compute_metrics(y_true, y_pred, sex_true=None, sex_prob=None) -> MetricsReport:
    """MAE, RMSE and population Pearson correlation plus the per-age-bin breakdown."""
    y_true = np.asarray(y_true, dtype=np.float64).reshape(-1)
    y_pred = np.asarray(y_pred, dtype=np.float64).reshape(-1)
    if y_true.shape != y_pred.shape:
        raise DimensionError(f"{y_true.size} targets vs {y_pred.size} predictions")
    if y_true.size == 0:
        raise ValueError("compute_metrics needs at least one sample")

    error = y_pred - y_true
    abs_error = np.abs(error)
    mae = float(abs_error.mean())
    rmse = float(math.sqrt(np.mean(error * error)))

    std_true, std_pred = y_true.std(), y_pred.std()
    pcc_defined = bool(std_true > 0 and std_pred > 0)
    if pcc_defined:
        cov = np.mean((y_true - y_true.mean()) * (y_pred - y_pred.mean()))
        pcc = float(np.clip(cov / (std_true * std_pred), -1.0, 1.0))
    else:
        pcc = float("nan")

    labels = age_bin_labels(y_true)
    bins = []
    for label in BIN_LABELS:
        in_bin = labels == label
        n = int(in_bin.sum())
        bins.append(
            BinMetrics(
                label=label,
                n=n,
                mae=float(abs_error[in_bin].mean()) if n else float("nan"),
                mae_std=float(abs_error[in_bin].std()) if n else float("nan"),
            )
        )

    sex_accuracy = None
    if sex_true is not None and sex_prob is not None:
        sex_true = np.asarray(sex_true).reshape(-1)
        sex_prob = np.asarray(sex_prob, dtype=np.float64).reshape(-1)
        if sex_true.shape != y_true.shape or sex_prob.shape != y_true.shape:
            raise DimensionError("Sex labels and probabilities must match the age vectors")
        sex_accuracy = float(np.mean((sex_prob >= 0.5).astype(np.int64) == sex_true))

    return MetricsReport(
        n=int(y_true.size),
        mae=mae,
        rmse=rmse,
        pcc=pcc,
        pcc_defined=pcc_defined,
        bins=bins,
        sex_accuracy=sex_accuracy,
    )


def _summarize(folds: Sequence[FoldResult]) -> Dict[str, MetricSummary]:
    done = [fold.metrics for fold in folds if fold.metrics is not None]
    summary = {}
    for name in ("mae", "rmse", "pcc"):
        values = np.asarray([getattr(m, name) for m in done], dtype=np.float64)
        values = values[np.isfinite(values)]
        summary[name] = MetricSummary(
            mean=float(values.mean()) if values.size else float("nan"),
            std=float(values.std()) if values.size else float("nan"),
        )
    return summary


def _concat(predictions: Sequence[PredictionSet]) -> PredictionSet:
    return PredictionSet(
        ids=np.concatenate([p.ids for p in predictions]),
        age_true=np.concatenate([p.age_true for p in predictions]),
        age_pred=np.concatenate([p.age_pred for p in predictions]),
        sex_true=np.concatenate([p.sex_true for p in predictions]),
        sex_prob=np.concatenate([p.sex_prob for p in predictions]),
    )


def _run_folds(plan: FoldPlan, run_fold, label: str, n_jobs: int, multitask: bool) -> Tuple[CvReport, PredictionSet]:
    workers = max(1, min(n_jobs, plan.k))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run_fold, range(plan.k)))
    else:
        outcomes = [run_fold(fold) for fold in range(plan.k)]

    results = [result for result, _ in outcomes]
    predictions = [preds for _, preds in outcomes if preds is not None]
    if not predictions:
        raise ValueError("No fold produced predictions")
    pooled = _concat(predictions)
    pooled_metrics = compute_metrics(
        pooled.age_true,
        pooled.age_pred,
        pooled.sex_true if multitask else None,
        pooled.sex_prob if multitask else None,
    )
    report = CvReport(
        label=label, plan_hash=plan.plan_hash(), folds=results, pooled=pooled_metrics, summary=_summarize(results)
    )
    logger.info("%s: pooled MAE %.4f over %d folds", label, pooled_metrics.mae, plan.k)
    return report, pooled


def _check_plan(ds: Dataset, plan: FoldPlan) -> None:
    if plan.n != ds.n:
        raise ConfigError(f"Fold plan covers {plan.n} rows but the dataset has {ds.n}")


def run_cv(
    ds: Dataset, plan: FoldPlan, cfg: RunConfig, label: str = "model", n_jobs: Optional[int] = None
) -> Tuple[CvReport, PredictionSet]:
    """Per fold: select and standardize on training rows, fit, predict the held-out rows."""
    _check_plan(ds, plan)
    n_jobs = settings.n_jobs if n_jobs is None else n_jobs
    train_cfg = cfg.train
    multitask = train_cfg.mode == "multitask"

    def run_fold(fold: int):
        test = plan.test_indices(fold)
        train_all = plan.train_indices(fold)
        if test.size < 2:
            logger.warning("Fold %d has %d held-out rows; skipped", fold, test.size)
            return FoldResult(fold=fold, n_train=int(train_all.size), n_test=int(test.size), skipped=True), None
        train, val = split_validation(train_all, train_cfg.validation_fraction, train_cfg.seed)
        selection = run_selection(ds, train, cfg.selection, n_jobs=1)
        checkpoint, _ = fit(ds, (train, val), train_cfg, selection)
        preds = predict(checkpoint, ds, test)
        metrics = compute_metrics(
            preds.age_true,
            preds.age_pred,
            preds.sex_true if multitask else None,
            preds.sex_prob if multitask else None,
        )
        result = FoldResult(
            fold=fold, n_train=int(train_all.size), n_test=preds.n, best_epoch=checkpoint.epoch, metrics=metrics
        )
        return result, preds

    return _run_folds(plan, run_fold, label, n_jobs, multitask)


ABLATION_CELLS: Tuple[Tuple[str, str], ...] = tuple(
    (modality_mode, mode) for modality_mode in ("both", "smri_only", "fmri_only") for mode in ("multitask", "single_task")
)


def ablation_configs(cfg: RunConfig, include_aae: bool = False) -> List[Tuple[str, RunConfig]]:
    """Labelled run configs of the comparison table, all sharing one seed."""
    cells = []
    for modality_mode, mode in ABLATION_CELLS:
        train_cfg = cfg.train
        if modality_mode != "both":
            train_cfg = make_variant(train_cfg, modality_mode)
        if mode == "single_task":
            train_cfg = make_variant(train_cfg, "single_task")
        cells.append((f"{modality_mode}+{mode}", cfg.model_copy(update={"train": train_cfg})))
    if include_aae:
        for variant in ("aae", "m_aae"):
            cells.append((variant, cfg.model_copy(update={"train": make_variant(cfg.train, variant)})))
    return cells


def run_ablation(
    ds: Dataset, plan: FoldPlan, cfg: RunConfig, include_aae: bool = False, n_jobs: Optional[int] = None
) -> AblationReport:
    """Train every cell on the same fold plan and seed."""
    if ds.m1 == 0 or ds.m2 == 0 or not (ds.present1 & ds.present2).any():
        raise ConfigError("The ablation needs a dataset carrying both modalities")
    _check_plan(ds, plan)
    n_jobs = settings.n_jobs if n_jobs is None else n_jobs
    cells = ablation_configs(cfg, include_aae)

    def run_cell(cell):
        label, cell_cfg = cell
        report, _ = run_cv(ds, plan, cell_cfg, label=label, n_jobs=1)
        return AblationRow(
            variant=label,
            modality_mode=cell_cfg.train.modality_mode,
            mode=cell_cfg.train.mode,
            plan_hash=report.plan_hash,
            report=report,
        )

    workers = max(1, min(n_jobs, len(cells)))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_cell, cells))
    else:
        rows = [run_cell(cell) for cell in cells]
    return AblationReport(rows=rows)


def scatter_summary(y_true, y_pred) -> Dict[str, float]:
    """Least-squares line of predicted on chronological age plus 1.96-sigma residual bands.

    Residual std uses the population formula.
    """
    y_true = np.asarray(y_true, dtype=np.float64).reshape(-1)
    y_pred = np.asarray(y_pred, dtype=np.float64).reshape(-1)
    n = y_true.size
    var_true = y_true.var()
    if var_true > 0:
        slope = float(np.mean((y_true - y_true.mean()) * (y_pred - y_pred.mean())) / var_true)
        intercept = float(y_pred.mean() - slope * y_true.mean())
    else:
        slope, intercept = float("nan"), float("nan")
    residual_std = float((y_pred - y_true).std())
    return {
        "n": n,
        "slope": slope,
        "intercept": intercept,
        "mean_residual": float((y_pred - y_true).mean()),
        "residual_std": residual_std,
        "ci_half_width": CI_Z * residual_std,
        "mean_ci_half_width": CI_Z * residual_std / math.sqrt(n),
    }


def export_scatter(
    y_true, y_pred, path: Union[str, Path], metadata: Optional[Mapping[str, str]] = None
) -> Tuple[Path, Path]:
    """Write chronological/predicted/residual rows and a one-row ``.summary.csv`` companion."""
    y_true = np.asarray(y_true, dtype=np.float64).reshape(-1)
    y_pred = np.asarray(y_pred, dtype=np.float64).reshape(-1)
    if y_true.shape != y_pred.shape:
        raise DimensionError(f"{y_true.size} targets vs {y_pred.size} predictions")
    if y_true.size == 0:
        raise ValueError("export_scatter needs at least one sample")
    path = Path(path)
    frame = pd.DataFrame({"chronological": y_true, "predicted": y_pred, "residual": y_pred - y_true})
    write_csv(frame, path, metadata)
    summary_path = path.with_name(f"{path.stem}.summary.csv")
    write_csv(pd.DataFrame([scatter_summary(y_true, y_pred)]), summary_path, metadata)
    return path, summary_path


def _r2(features: np.ndarray, target: np.ndarray, cfg: ProbeConfig) -> float:
    folds = KFold(n_splits=cfg.folds, shuffle=True, random_state=0)
    predicted = cross_val_predict(Ridge(alpha=cfg.ridge_alpha), features, target, cv=folds)
    return float(r2_score(target, predicted, multioutput="uniform_average"))


def disentanglement_probe(
    checkpoint: Checkpoint, ds: Dataset, factors: SynthFactors, cfg: Optional[ProbeConfig] = None
) -> ProbeReport:
    """Cross-validated ridge R^2 of the true shared factors from generic vs unique codes."""
    cfg = cfg or ProbeConfig()
    factors = factors.align([str(i) for i in ds.ids])
    if checkpoint.selection is not None:
        ds = checkpoint.selection.apply(ds)
    ds_std = apply_standardization(ds, checkpoint.constants)
    params = checkpoint.params

    rows_out = []
    for m in params.spec.modalities:
        rows = ds_std.present(m)
        n = int(rows.sum())
        if n < cfg.folds:
            raise ConfigError(f"Modality {m}: {n} rows cannot feed a {cfg.folds}-fold probe")
        code = encode(params, m, ds_std.x(m)[rows], mode="deterministic")
        target = factors.shared[rows]
        generic_r2 = _r2(code.mu[:, : code.generic_dim], target, cfg)
        unique_r2 = _r2(code.mu[:, code.generic_dim:], target, cfg)
        rows_out.append(
            ProbeModality(modality=m, n=n, generic_r2=generic_r2, unique_r2=unique_r2, gap=generic_r2 - unique_r2)
        )
        logger.info("Modality %d probe: generic R2 %.3f, unique R2 %.3f", m, generic_r2, unique_r2)
    return ProbeReport(modalities=rows_out, mean_gap=float(np.mean([row.gap for row in rows_out])))


def _row_error(x: np.ndarray, x_hat: np.ndarray) -> float:
    return float(np.linalg.norm(x - x_hat, axis=1).mean())


def reconstruction_report(checkpoint: Checkpoint, ds: Dataset, indices=None) -> ReconstructionReport:
    """Mean row L2 error of each modality decoded from its own codes and from cross codes.

    Inputs are scaled with the checkpoint's constants; only rows holding both
    modalities take part.
    """
    params = checkpoint.params
    if tuple(params.spec.modalities) != (1, 2):
        raise ConfigError("Cross reconstruction needs a checkpoint trained on both modalities")
    if checkpoint.selection is not None:
        ds = checkpoint.selection.apply(ds)
    ds_std = apply_standardization(ds, checkpoint.constants)
    rows = np.arange(ds.n) if indices is None else np.asarray(indices, dtype=np.int64)
    rows = rows[ds_std.present(1)[rows] & ds_std.present(2)[rows]]
    if rows.size == 0:
        raise ConfigError("No rows hold both modalities")

    codes = {m: encode(params, m, ds_std.x(m)[rows], mode="deterministic") for m in (1, 2)}
    rows_out = []
    for m, other in ((1, 2), (2, 1)):
        x = ds_std.x(m)[rows]
        own = _row_error(x, decode(params, m, codes[m].generic, codes[m].unique))
        cross = _row_error(x, cross_decode(params, m, other, codes[m], codes[other]))
        ratio = cross / own if own > 0.0 else math.inf
        rows_out.append(
            ReconstructionModality(modality=m, n=int(rows.size), own_error=own, cross_error=cross, ratio=ratio)
        )
        logger.info("Modality %d reconstruction: own %.4f, cross %.4f", m, own, cross)
    return ReconstructionReport(modalities=rows_out)


@dataclass
class LinearBaseline:
    """Ridge regression on the concatenated, standardized, zero-filled features."""

    model: Ridge
    constants: StandardizationConstants

    def predict(self, ds: Dataset, indices=None) -> np.ndarray:
        ds_std = apply_standardization(ds, self.constants)
        rows = np.arange(ds.n) if indices is None else np.asarray(indices, dtype=np.int64)
        return self.model.predict(_design(ds_std, rows))


def _design(ds: Dataset, rows: np.ndarray) -> np.ndarray:
    return np.concatenate([ds.x1[rows], ds.x2[rows]], axis=1)


def fit_linear_baseline(ds: Dataset, train_indices, alpha: float = 1.0) -> LinearBaseline:
    train_indices = np.asarray(train_indices, dtype=np.int64)
    ds_std, constants = standardize(ds, train_indices)
    model = Ridge(alpha=alpha)
    model.fit(_design(ds_std, train_indices), ds.age[train_indices])
    return LinearBaseline(model, constants)


def run_baseline_cv(ds: Dataset, plan: FoldPlan, alpha: float = 1.0) -> Tuple[CvReport, PredictionSet]:
    _check_plan(ds, plan)

    def run_fold(fold: int):
        test = plan.test_indices(fold)
        train = plan.train_indices(fold)
        if test.size < 2:
            logger.warning("Fold %d has %d held-out rows; skipped", fold, test.size)
            return FoldResult(fold=fold, n_train=int(train.size), n_test=int(test.size), skipped=True), None
        predicted = fit_linear_baseline(ds, train, alpha).predict(ds, test)
        preds = PredictionSet(ds.ids[test], ds.age[test], predicted, ds.sex[test], np.full(test.size, np.nan))
        result = FoldResult(
            fold=fold, n_train=int(train.size), n_test=int(test.size), metrics=compute_metrics(ds.age[test], predicted)
        )
        return result, preds

    return _run_folds(plan, run_fold, "ridge_baseline", 1, multitask=False)


def cv_frame(report: CvReport) -> pd.DataFrame:
    """One row per fold plus a final pooled row."""
    records = []
    for fold in report.folds:
        metrics = fold.metrics
        records.append(
            {
                "fold": str(fold.fold),
                "n_train": fold.n_train,
                "n_test": fold.n_test,
                "skipped": fold.skipped,
                "best_epoch": fold.best_epoch,
                "mae": metrics.mae if metrics else float("nan"),
                "rmse": metrics.rmse if metrics else float("nan"),
                "pcc": metrics.pcc if metrics else float("nan"),
                "sex_accuracy": metrics.sex_accuracy if metrics else None,
            }
        )
    pooled = report.pooled
    records.append(
        {
            "fold": "pooled",
            "n_train": None,
            "n_test": pooled.n,
            "skipped": False,
            "best_epoch": None,
            "mae": pooled.mae,
            "rmse": pooled.rmse,
            "pcc": pooled.pcc,
            "sex_accuracy": pooled.sex_accuracy,
        }
    )
    return pd.DataFrame.from_records(records)


def bins_frame(metrics: MetricsReport) -> pd.DataFrame:
    return pd.DataFrame.from_records([b.model_dump() for b in metrics.bins])


def ablation_frame(report: AblationReport) -> pd.DataFrame:
    records = []
    for row in report.rows:
        pooled, summary = row.report.pooled, row.report.summary
        records.append(
            {
                "variant": row.variant,
                "modality_mode": row.modality_mode,
                "mode": row.mode,
                "plan_hash": row.plan_hash,
                "mae": pooled.mae,
                "rmse": pooled.rmse,
                "pcc": pooled.pcc,
                "fold_mae_mean": summary["mae"].mean,
                "fold_mae_std": summary["mae"].std,
            }
        )
    return pd.DataFrame.from_records(records)


def _cell(value):
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and math.isnan(value):
        return None
    return value


def _fill_sheet(sheet, frame: pd.DataFrame) -> None:
    sheet.append(list(frame.columns))
    for record in frame.itertuples(index=False):
        sheet.append([_cell(v) for v in record])


def export_workbook(report: Union[CvReport, AblationReport], path: Union[str, Path]) -> Optional[Path]:
    """Spreadsheet companion of a CV or ablation report; skipped when workbooks are disabled."""
    if not settings.workbook_enabled:
        logger.debug("Workbook export disabled; skipping %s", path)
        return None
    path = Path(path)
    workbook = Workbook()
    sheet = workbook.active
    if isinstance(report, CvReport):
        sheet.title = "folds"
        _fill_sheet(sheet, cv_frame(report))
        _fill_sheet(workbook.create_sheet("bins"), bins_frame(report.pooled))
    else:
        sheet.title = "ablation"
        _fill_sheet(sheet, ablation_frame(report))
    workbook.save(path)
    ensure_writable(path)
    return path

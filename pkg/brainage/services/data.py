"""
Dataset ingestion, standardization, the synthetic cohort generator and fold planning.

A ``Dataset`` is columnar: one zero-filled matrix per modality plus a presence
mask, so a subject missing a modality still occupies its row.
"""

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from ..exceptions import ConfigError, DimensionError, LoadError
from ..schemas import SynthConfig, TableSchema
from .helpers import ensure_writable, write_json
from .numerics import Rng, sigmoid

logger = logging.getLogger("brainage.services.data")

AGE_MIN, AGE_MAX = 0.0, 120.0
SYNTH_AGE_CENTER, SYNTH_AGE_SCALE = 39.0, 7.0
SYNTH_AGE_RANGE = (18.0, 60.0)

# chronological bins of the per-age breakdown; anything else lands in "other"
AGE_BINS: Tuple[Tuple[str, float, float], ...] = (
    ("<25", 18.0, 25.0),
    ("25-35", 25.0, 35.0),
    ("35-45", 35.0, 45.0),
    ("45-55", 45.0, 55.0),
)
OTHER_BIN = "other"
BIN_LABELS = tuple(label for label, _, _ in AGE_BINS) + (OTHER_BIN,)


def age_bin_labels(ages) -> np.ndarray:
    ages = np.asarray(ages, dtype=np.float64)
    labels = np.full(ages.shape, OTHER_BIN, dtype=object)
    for label, low, high in AGE_BINS:
        labels[(ages >= low) & (ages < high)] = label
    return labels


@dataclass
class SubjectRecord:
    """One subject; ``x1``/``x2`` are None when that modality is absent."""

    id: str
    age: float
    sex: int
    x1: Optional[np.ndarray] = None
    x2: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.x1 is None and self.x2 is None:
            raise LoadError(f"Subject {self.id}: at least one modality must be present")
        if not (AGE_MIN < float(self.age) < AGE_MAX):
            raise LoadError(f"Subject {self.id}: age {self.age} outside (0, 120)")
        if self.sex not in (0, 1):
            raise LoadError(f"Subject {self.id}: sex must be 0 or 1, got {self.sex}")


@dataclass(frozen=True)
class StandardizationConstants:
    """Per-column means/stds estimated on training rows only."""

    columns1: Tuple[str, ...]
    columns2: Tuple[str, ...]
    mean1: np.ndarray
    std1: np.ndarray
    mean2: np.ndarray
    std2: np.ndarray

    def mean(self, modality: int) -> np.ndarray:
        return self.mean1 if modality == 1 else self.mean2

    def std(self, modality: int) -> np.ndarray:
        return self.std1 if modality == 1 else self.std2

    def to_dict(self) -> dict:
        return {
            "columns1": list(self.columns1),
            "columns2": list(self.columns2),
            "mean1": self.mean1.tolist(),
            "std1": self.std1.tolist(),
            "mean2": self.mean2.tolist(),
            "std2": self.std2.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "StandardizationConstants":
        return cls(
            columns1=tuple(data["columns1"]),
            columns2=tuple(data["columns2"]),
            mean1=np.asarray(data["mean1"], dtype=np.float64),
            std1=np.asarray(data["std1"], dtype=np.float64),
            mean2=np.asarray(data["mean2"], dtype=np.float64),
            std2=np.asarray(data["std2"], dtype=np.float64),
        )


@dataclass
class Dataset:
    """Subjects in columnar form."""

    ids: np.ndarray
    age: np.ndarray
    sex: np.ndarray
    x1: np.ndarray
    x2: np.ndarray
    present1: np.ndarray
    present2: np.ndarray
    columns1: Tuple[str, ...]
    columns2: Tuple[str, ...]
    constants: Optional[StandardizationConstants] = field(default=None, repr=False)

    def __post_init__(self):
        n = len(self.ids)
        self.ids = np.asarray(self.ids, dtype=object)
        self.age = np.asarray(self.age, dtype=np.float64).reshape(-1)
        self.sex = np.asarray(self.sex, dtype=np.int64).reshape(-1)
        self.present1 = np.asarray(self.present1, dtype=bool).reshape(-1)
        self.present2 = np.asarray(self.present2, dtype=bool).reshape(-1)
        self.x1 = np.array(self.x1, dtype=np.float64).reshape(n, len(self.columns1))
        self.x2 = np.array(self.x2, dtype=np.float64).reshape(n, len(self.columns2))
        self.columns1, self.columns2 = tuple(self.columns1), tuple(self.columns2)
        for name in ("age", "sex", "present1", "present2"):
            if getattr(self, name).shape[0] != n:
                raise DimensionError(f"Dataset field {name} has {getattr(self, name).shape[0]} rows, expected {n}")
        if np.any(~(self.present1 | self.present2)):
            raise LoadError("Every subject needs at least one modality")
        self.x1[~self.present1] = 0.0
        self.x2[~self.present2] = 0.0

    @property
    def n(self) -> int:
        return int(self.ids.shape[0])

    @property
    def m1(self) -> int:
        return len(self.columns1)

    @property
    def m2(self) -> int:
        return len(self.columns2)

    def x(self, modality: int) -> np.ndarray:
        return self.x1 if modality == 1 else self.x2

    def present(self, modality: int) -> np.ndarray:
        return self.present1 if modality == 1 else self.present2

    def columns(self, modality: int) -> Tuple[str, ...]:
        return self.columns1 if modality == 1 else self.columns2

    def input_dims(self) -> Dict[int, int]:
        return {1: self.m1, 2: self.m2}

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return replace(
            self,
            ids=self.ids[idx],
            age=self.age[idx],
            sex=self.sex[idx],
            x1=self.x1[idx],
            x2=self.x2[idx],
            present1=self.present1[idx],
            present2=self.present2[idx],
        )

    def index_of(self, ids: Sequence[str]) -> np.ndarray:
        lookup = {subject: row for row, subject in enumerate(self.ids)}
        missing = [subject for subject in ids if subject not in lookup]
        if missing:
            raise LoadError(f"Subjects not in dataset: {', '.join(map(str, missing[:5]))}")
        return np.asarray([lookup[subject] for subject in ids], dtype=np.int64)

    def records(self) -> List[SubjectRecord]:
        return [
            SubjectRecord(
                id=str(self.ids[row]),
                age=float(self.age[row]),
                sex=int(self.sex[row]),
                x1=self.x1[row].copy() if self.present1[row] else None,
                x2=self.x2[row].copy() if self.present2[row] else None,
            )
            for row in range(self.n)
        ]

    @classmethod
    def from_records(
        cls, records: Sequence[SubjectRecord], columns1: Sequence[str], columns2: Sequence[str]
    ) -> "Dataset":
        n, m1, m2 = len(records), len(columns1), len(columns2)
        x1, x2 = np.zeros((n, m1)), np.zeros((n, m2))
        for row, record in enumerate(records):
            for block, values, width in ((x1, record.x1, m1), (x2, record.x2, m2)):
                if values is None:
                    continue
                values = np.asarray(values, dtype=np.float64).reshape(-1)
                if values.size != width:
                    raise DimensionError(f"Subject {record.id}: expected {width} features, got {values.size}")
                block[row] = values
        return cls(
            ids=[r.id for r in records],
            age=[r.age for r in records],
            sex=[r.sex for r in records],
            x1=x1,
            x2=x2,
            present1=[r.x1 is not None for r in records],
            present2=[r.x2 is not None for r in records],
            columns1=tuple(columns1),
            columns2=tuple(columns2),
        )


def load_table(path: Union[str, Path], schema: Optional[TableSchema] = None) -> Dataset:
    """Read a comma-delimited table with id, age, sex and two prefixed feature blocks.

    A modality block left entirely empty marks that modality as absent for the
    row. Errors name the offending file line (the header is line 1).
    """
    schema = schema or TableSchema()
    path = Path(path)
    if not path.exists():
        raise LoadError(f"Dataset not found: {path}")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError as exc:
        raise LoadError(f"{path}: file is empty") from exc
    except pd.errors.ParserError as exc:
        raise LoadError(f"{path}: ragged row ({exc})") from exc
    if frame.empty:
        raise LoadError(f"{path}: no data rows")

    for column in (schema.id_column, schema.age_column, schema.sex_column):
        if column not in frame.columns:
            raise LoadError(f"{path}: missing column {column!r}")
    columns1 = tuple(c for c in frame.columns if c.startswith(schema.modality1_prefix))
    columns2 = tuple(c for c in frame.columns if c.startswith(schema.modality2_prefix))
    if not columns1 and not columns2:
        raise LoadError(f"{path}: no feature columns with prefixes {schema.modality1_prefix!r}/{schema.modality2_prefix!r}")

    short = frame.isna().any(axis=1).to_numpy()
    if short.any():
        raise LoadError(f"{path}: ragged row at line {int(np.argmax(short)) + 2}")

    def _block(columns: Tuple[str, ...]) -> Tuple[np.ndarray, np.ndarray]:
        if not columns:
            return np.zeros((len(frame), 0)), np.zeros(len(frame), dtype=bool)
        raw = frame[list(columns)].apply(lambda col: col.str.strip())
        blank = (raw == "").to_numpy()
        partial = blank.any(axis=1) & ~blank.all(axis=1)
        if partial.any():
            raise LoadError(f"{path}: partially empty modality block at line {int(np.argmax(partial)) + 2}")
        values = raw.apply(pd.to_numeric, errors="coerce").to_numpy(dtype=np.float64)
        bad = ~blank & ~np.isfinite(values)
        if bad.any():
            row, col = np.argwhere(bad)[0]
            raise LoadError(f"{path}: non-numeric value in column {columns[col]!r} at line {row + 2}")
        present = ~blank.all(axis=1)
        return np.where(blank, 0.0, values), present

    x1, present1 = _block(columns1)
    x2, present2 = _block(columns2)
    neither = ~(present1 | present2)
    if neither.any():
        raise LoadError(f"{path}: no modality present at line {int(np.argmax(neither)) + 2}")

    age = pd.to_numeric(frame[schema.age_column].str.strip(), errors="coerce").to_numpy(dtype=np.float64)
    bad_age = ~np.isfinite(age) | (age <= AGE_MIN) | (age >= AGE_MAX)
    if bad_age.any():
        row = int(np.argmax(bad_age))
        raise LoadError(f"{path}: age {frame[schema.age_column].iloc[row]!r} outside (0, 120) at line {row + 2}")
    sex = pd.to_numeric(frame[schema.sex_column].str.strip(), errors="coerce").to_numpy(dtype=np.float64)
    bad_sex = ~np.isin(sex, (0.0, 1.0))
    if bad_sex.any():
        row = int(np.argmax(bad_sex))
        raise LoadError(f"{path}: sex {frame[schema.sex_column].iloc[row]!r} not in {{0, 1}} at line {row + 2}")

    ids = frame[schema.id_column].str.strip()
    if ids.duplicated().any():
        raise LoadError(f"{path}: duplicate subject id {ids[ids.duplicated()].iloc[0]!r}")

    logger.info("Loaded %d subjects (%d + %d features) from %s", len(frame), len(columns1), len(columns2), path)
    return Dataset(
        ids=ids.to_numpy(dtype=object),
        age=age,
        sex=sex.astype(np.int64),
        x1=x1,
        x2=x2,
        present1=present1,
        present2=present2,
        columns1=columns1,
        columns2=columns2,
    )


def write_table(ds: Dataset, path: Union[str, Path], schema: Optional[TableSchema] = None) -> Path:
    """Write the format ``load_table`` reads; absent blocks become empty cells."""
    schema = schema or TableSchema()
    path = Path(path)
    frame = pd.DataFrame({schema.id_column: ds.ids, schema.age_column: ds.age, schema.sex_column: ds.sex})
    blocks = []
    for m in (1, 2):
        block = pd.DataFrame(np.where(ds.present(m)[:, None], ds.x(m), np.nan), columns=list(ds.columns(m)))
        blocks.append(block)
    frame = pd.concat([frame, *blocks], axis=1)
    frame.to_csv(path, index=False, na_rep="", float_format="%.17g", lineterminator="\n")
    ensure_writable(path)
    return path


def select_columns(ds: Dataset, columns1: Sequence[str], columns2: Sequence[str]) -> Dataset:
    """Restrict both modalities to the named columns, in the given order."""
    picked = []
    for m, wanted in ((1, columns1), (2, columns2)):
        lookup = {name: index for index, name in enumerate(ds.columns(m))}
        missing = [name for name in wanted if name not in lookup]
        if missing:
            raise LoadError(f"Modality {m} columns not in dataset: {', '.join(missing[:5])}")
        picked.append([lookup[name] for name in wanted])
    return replace(
        ds,
        x1=ds.x1[:, picked[0]],
        x2=ds.x2[:, picked[1]],
        columns1=tuple(columns1),
        columns2=tuple(columns2),
        constants=None,
    )


def _column_stats(x: np.ndarray, rows: np.ndarray, columns: Sequence[str], modality: int):
    if x.shape[1] == 0 or not rows.any():
        return np.zeros(x.shape[1]), np.ones(x.shape[1])
    mean = x[rows].mean(axis=0)
    std = x[rows].std(axis=0)
    flat = std < 1e-12
    if flat.any():
        names = [columns[i] for i in np.flatnonzero(flat)]
        logger.warning("Modality %d: %d zero-variance columns left unscaled (%s)", modality, len(names), ", ".join(names[:5]))
        mean = np.where(flat, 0.0, mean)
        std = np.where(flat, 1.0, std)
    return mean, std


def standardize(ds: Dataset, train_indices) -> Tuple[Dataset, StandardizationConstants]:
    """Z-score every column with statistics of the training rows only."""
    train_indices = np.asarray(train_indices, dtype=np.int64)
    if train_indices.size == 0:
        raise ValueError("standardize needs at least one training row")
    stats = {}
    for m in (1, 2):
        rows = np.zeros(ds.n, dtype=bool)
        rows[train_indices] = True
        rows &= ds.present(m)
        stats[m] = _column_stats(ds.x(m), rows, ds.columns(m), m)
    constants = StandardizationConstants(
        columns1=ds.columns1,
        columns2=ds.columns2,
        mean1=stats[1][0],
        std1=stats[1][1],
        mean2=stats[2][0],
        std2=stats[2][1],
    )
    return apply_standardization(ds, constants), constants


def apply_standardization(ds: Dataset, constants: StandardizationConstants) -> Dataset:
    """Reapply stored constants; absent modality rows stay zero."""
    if ds.columns1 != constants.columns1 or ds.columns2 != constants.columns2:
        raise DimensionError("Dataset columns do not match the standardization constants")
    x1 = (ds.x1 - constants.mean1) / constants.std1
    x2 = (ds.x2 - constants.mean2) / constants.std2
    return replace(ds, x1=x1, x2=x2, constants=constants)


@dataclass
class SynthFactors:
    """Ground truth behind a synthetic cohort, keyed by subject id."""

    ids: np.ndarray
    shared: np.ndarray
    unique1: np.ndarray
    unique2: np.ndarray
    informative1: Tuple[str, ...]
    informative2: Tuple[str, ...]
    age_weights: np.ndarray
    sex_weights: np.ndarray
    seed: int = 0

    def align(self, ids: Sequence[str]) -> "SynthFactors":
        """Reorder rows to follow ``ids``."""
        lookup = {subject: row for row, subject in enumerate(self.ids)}
        missing = [subject for subject in ids if subject not in lookup]
        if missing:
            raise LoadError(f"Factor sidecar lacks subjects: {', '.join(map(str, missing[:5]))}")
        rows = np.asarray([lookup[subject] for subject in ids], dtype=np.int64)
        return replace(
            self,
            ids=self.ids[rows],
            shared=self.shared[rows],
            unique1=self.unique1[rows],
            unique2=self.unique2[rows],
        )

    def informative_indices(self, modality: int, columns: Sequence[str]) -> List[int]:
        wanted = set(self.informative1 if modality == 1 else self.informative2)
        return [index for index, name in enumerate(columns) if name in wanted]


def write_factors(factors: SynthFactors, path: Union[str, Path]) -> Path:
    payload = {
        "seed": factors.seed,
        "informative1": list(factors.informative1),
        "informative2": list(factors.informative2),
        "age_weights": factors.age_weights.tolist(),
        "sex_weights": factors.sex_weights.tolist(),
        "subjects": {
            str(subject): {
                "shared": factors.shared[row].tolist(),
                "unique1": factors.unique1[row].tolist(),
                "unique2": factors.unique2[row].tolist(),
            }
            for row, subject in enumerate(factors.ids)
        },
    }
    return write_json(Path(path), payload)


def load_factors(path: Union[str, Path]) -> SynthFactors:
    path = Path(path)
    if not path.exists():
        raise LoadError(f"Factor sidecar not found: {path}")
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
        subjects = payload["subjects"]
        ids = np.asarray(list(subjects), dtype=object)
        return SynthFactors(
            ids=ids,
            shared=np.asarray([subjects[s]["shared"] for s in ids], dtype=np.float64),
            unique1=np.asarray([subjects[s]["unique1"] for s in ids], dtype=np.float64),
            unique2=np.asarray([subjects[s]["unique2"] for s in ids], dtype=np.float64),
            informative1=tuple(payload["informative1"]),
            informative2=tuple(payload["informative2"]),
            age_weights=np.asarray(payload["age_weights"], dtype=np.float64),
            sex_weights=np.asarray(payload["sex_weights"], dtype=np.float64),
            seed=int(payload.get("seed", 0)),
        )
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise LoadError(f"Malformed factor sidecar {path}: {exc}") from exc


def _modality_block(
    rng: Rng, factors: np.ndarray, informative: int, distractors: int, noise: float, nonlinear: bool
) -> Tuple[np.ndarray, np.ndarray]:
    """Mixed signal columns plus pure-noise distractors, columns shuffled.

    Returns the block and the positions the signal columns ended up at.
    """
    n, width = factors.shape
    mixing = rng.child(0).generator.standard_normal((informative, width)) / math.sqrt(width)
    signal = factors @ mixing.T
    if nonlinear:
        signal = np.tanh(signal)
    signal = signal + noise * rng.child(1).generator.standard_normal(signal.shape)
    noise_columns = rng.child(2).generator.standard_normal((n, distractors))
    block = np.concatenate([signal, noise_columns], axis=1)
    order = rng.child(3).generator.permutation(block.shape[1])
    positions = np.argsort(order)[:informative]
    return block[:, order], np.sort(positions)


def synth_generate(cfg: SynthConfig) -> Tuple[Dataset, SynthFactors]:
    """Draw a two-modality cohort whose age and sex depend on the shared factors only."""
    rng = Rng(cfg.seed)
    n = cfg.n_subjects
    draws = rng.child(0).generator
    shared = draws.standard_normal((n, cfg.shared_dim))
    unique1 = draws.standard_normal((n, cfg.unique_dim1))
    unique2 = draws.standard_normal((n, cfg.unique_dim2))

    weight_rng = rng.child(1).generator
    age_weights = (
        np.asarray(cfg.age_weights, dtype=np.float64)
        if cfg.age_weights is not None
        else weight_rng.standard_normal(cfg.shared_dim)
    )
    sex_weights = (
        np.asarray(cfg.sex_weights, dtype=np.float64)
        if cfg.sex_weights is not None
        else cfg.sex_strength * weight_rng.standard_normal(cfg.shared_dim) / math.sqrt(cfg.shared_dim)
    )

    norm = np.linalg.norm(age_weights)
    age_signal = shared @ age_weights / norm if norm > 0 else np.zeros(n)
    age_noise = cfg.age_noise * rng.child(2).generator.standard_normal(n)
    age = np.clip(SYNTH_AGE_CENTER + SYNTH_AGE_SCALE * (age_signal + age_noise), *SYNTH_AGE_RANGE)
    sex = (rng.child(3).generator.random(n) < sigmoid(shared @ sex_weights)).astype(np.int64)

    x1, signal1 = _modality_block(
        rng.child(4), np.concatenate([shared, unique1], axis=1), cfg.informative1, cfg.distractors1, cfg.noise1, cfg.nonlinear
    )
    x2, signal2 = _modality_block(
        rng.child(5), np.concatenate([shared, unique2], axis=1), cfg.informative2, cfg.distractors2, cfg.noise2, cfg.nonlinear
    )
    width1 = len(str(x1.shape[1] - 1))
    width2 = len(str(x2.shape[1] - 1))
    columns1 = tuple(f"x1_{i:0{width1}d}" for i in range(x1.shape[1]))
    columns2 = tuple(f"x2_{i:0{width2}d}" for i in range(x2.shape[1]))

    present1, present2 = np.ones(n, dtype=bool), np.ones(n, dtype=bool)
    order = rng.child(6).generator.permutation(n)
    n_miss1 = int(round(cfg.missing_rate1 * n))
    n_miss2 = int(round(cfg.missing_rate2 * n))
    present1[order[:n_miss1]] = False
    present2[order[n_miss1:n_miss1 + n_miss2]] = False

    ids = np.asarray([f"sub-{i:05d}" for i in range(n)], dtype=object)
    ds = Dataset(
        ids=ids,
        age=age,
        sex=sex,
        x1=x1,
        x2=x2,
        present1=present1,
        present2=present2,
        columns1=columns1,
        columns2=columns2,
    )
    factors = SynthFactors(
        ids=ids,
        shared=shared,
        unique1=unique1,
        unique2=unique2,
        informative1=tuple(columns1[i] for i in signal1),
        informative2=tuple(columns2[i] for i in signal2),
        age_weights=age_weights,
        sex_weights=sex_weights,
        seed=cfg.seed,
    )
    logger.info(
        "Synthesized %d subjects: %d + %d features, d_s=%d, seed=%d",
        n, ds.m1, ds.m2, cfg.shared_dim, cfg.seed,
    )
    return ds, factors


@dataclass(frozen=True)
class FoldPlan:
    """Disjoint test folds covering 0..n-1."""

    folds: Tuple[Tuple[int, ...], ...]
    n: int
    seed: int = 0
    stratify: str = "none"

    def __post_init__(self):
        members = sorted(index for fold in self.folds for index in fold)
        if members != list(range(self.n)):
            raise LoadError("Fold plan does not partition the row indices exactly")

    @property
    def k(self) -> int:
        return len(self.folds)

    def test_indices(self, fold: int) -> np.ndarray:
        return np.asarray(self.folds[fold], dtype=np.int64)

    def train_indices(self, fold: int) -> np.ndarray:
        held_out = set(self.folds[fold])
        return np.asarray([i for i in range(self.n) if i not in held_out], dtype=np.int64)

    def to_dict(self) -> dict:
        return {"n": self.n, "seed": self.seed, "stratify": self.stratify, "folds": [list(f) for f in self.folds]}

    @classmethod
    def from_dict(cls, data: Mapping) -> "FoldPlan":
        return cls(
            folds=tuple(tuple(int(i) for i in fold) for fold in data["folds"]),
            n=int(data["n"]),
            seed=int(data.get("seed", 0)),
            stratify=str(data.get("stratify", "none")),
        )

    def plan_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()[:16]


def kfold_plan(n: int, k: int, seed: int = 0, stratify: str = "none", ages=None) -> FoldPlan:
    """Shuffle rows into k folds whose sizes differ by at most one.

    ``age_bin`` stratification deals each age bin round-robin across folds.
    """
    if k < 2:
        raise ConfigError(f"Need at least 2 folds, got {k}")
    if k > n:
        raise ConfigError(f"Cannot split {n} rows into {k} folds")
    generator = Rng(seed).child(7).generator
    if stratify == "none":
        order = generator.permutation(n)
    elif stratify == "age_bin":
        if ages is None or len(ages) != n:
            raise ConfigError("age_bin stratification needs one age per row")
        labels = age_bin_labels(ages)
        order = np.concatenate(
            [generator.permutation(np.flatnonzero(labels == label)) for label in BIN_LABELS]
        )
    else:
        raise ConfigError(f"Unknown stratification {stratify!r}")

    assignment = np.empty(n, dtype=np.int64)
    assignment[order] = np.arange(n) % k
    folds = tuple(tuple(int(i) for i in np.flatnonzero(assignment == fold)) for fold in range(k))
    return FoldPlan(folds=folds, n=n, seed=seed, stratify=stratify)


def save_fold_plan(plan: FoldPlan, path: Union[str, Path]) -> Path:
    payload = plan.to_dict()
    payload["plan_hash"] = plan.plan_hash()
    return write_json(Path(path), payload)


def load_fold_plan(path: Union[str, Path]) -> FoldPlan:
    path = Path(path)
    if not path.exists():
        raise LoadError(f"Fold plan not found: {path}")
    try:
        return FoldPlan.from_dict(json.loads(path.read_text(encoding="utf-8")))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, LoadError):
            raise
        raise LoadError(f"Malformed fold plan {path}: {exc}") from exc

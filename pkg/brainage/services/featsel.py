"""
Random-forest filter that keeps each modality's top-k columns.

Trees are grown by scikit-learn; this module reads their node arrays back into
plain ``RegressionTree`` values so importances and predictions only depend on
the stored splits.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from sklearn.ensemble import RandomForestRegressor

from ..exceptions import ConfigError, LoadError, StateError
from ..schemas import ForestConfig, SelectionConfig
from .data import Dataset, select_columns
from .helpers import write_csv, write_json
from .numerics import as_matrix

logger = logging.getLogger("brainage.services.featsel")

LEAF = -1


@dataclass(frozen=True)
class TreeNode:
    feature_index: int
    threshold: float
    left: int
    right: int
    leaf_value: float
    impurity_decrease: float

    @property
    def is_leaf(self) -> bool:
        return self.left == LEAF


@dataclass
class RegressionTree:
    """Binary tree in array form; leaves have ``left == right == -1``."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    impurity_decrease: np.ndarray
    n_features: int

    @classmethod
    def from_estimator(cls, estimator, n_features: int) -> "RegressionTree":
        tree = estimator.tree_
        left = tree.children_left.astype(np.int64)
        right = tree.children_right.astype(np.int64)
        internal = left != LEAF
        weight = tree.weighted_n_node_samples
        impurity = tree.impurity
        decrease = np.zeros(tree.node_count)
        decrease[internal] = (
            weight[internal] * impurity[internal]
            - weight[left[internal]] * impurity[left[internal]]
            - weight[right[internal]] * impurity[right[internal]]
        ) / weight[0]
        return cls(
            feature=np.where(internal, tree.feature, LEAF).astype(np.int64),
            threshold=np.where(internal, tree.threshold, 0.0),
            left=left,
            right=right,
            value=tree.value.reshape(tree.node_count, -1)[:, 0].astype(np.float64),
            impurity_decrease=np.maximum(decrease, 0.0),
            n_features=n_features,
        )

    @property
    def n_nodes(self) -> int:
        return int(self.feature.shape[0])

    @property
    def nodes(self) -> List[TreeNode]:
        return [
            TreeNode(
                int(self.feature[i]),
                float(self.threshold[i]),
                int(self.left[i]),
                int(self.right[i]),
                float(self.value[i]),
                float(self.impurity_decrease[i]),
            )
            for i in range(self.n_nodes)
        ]

    @property
    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for node in range(self.n_nodes):
            if self.left[node] != LEAF:
                depth[self.left[node]] = depth[node] + 1
                depth[self.right[node]] = depth[node] + 1
        return int(depth.max())

    def predict(self, x) -> np.ndarray:
        x = as_matrix(x)
        node = np.zeros(x.shape[0], dtype=np.int64)
        active = self.left[node] != LEAF
        while active.any():
            rows = np.flatnonzero(active)
            current = node[rows]
            go_left = x[rows, self.feature[current]] <= self.threshold[current]
            node[rows] = np.where(go_left, self.left[current], self.right[current])
            active = self.left[node] != LEAF
        return self.value[node]

    def feature_importances(self) -> np.ndarray:
        internal = self.left != LEAF
        return np.bincount(
            self.feature[internal], weights=self.impurity_decrease[internal], minlength=self.n_features
        ).astype(np.float64)


@dataclass
class Forest:
    trees: List[RegressionTree]
    n_features: int
    features_per_split: int
    config: ForestConfig

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def predict(self, x) -> np.ndarray:
        if not self.trees:
            raise StateError("Forest has no trees")
        return np.mean([tree.predict(x) for tree in self.trees], axis=0)


@dataclass
class ImportanceReport:
    """Normalized importances and the descending ranking (ties by ascending index)."""

    importances: np.ndarray
    ranking: np.ndarray
    degenerate: bool = False
    feature_names: Optional[Tuple[str, ...]] = None

    @property
    def n_features(self) -> int:
        return int(self.importances.shape[0])

    def to_frame(self) -> pd.DataFrame:
        names = self.feature_names or tuple(str(i) for i in range(self.n_features))
        rank = np.empty(self.n_features, dtype=np.int64)
        rank[self.ranking] = np.arange(1, self.n_features + 1)
        frame = pd.DataFrame({"feature_name": list(names), "importance": self.importances, "rank": rank})
        return frame.sort_values("rank", kind="stable").reset_index(drop=True)


def fit_forest(x, y, config: Optional[ForestConfig] = None, n_jobs: Optional[int] = None) -> Forest:
    """Grow the forest on rows put in a canonical order first."""
    config = config or ForestConfig()
    x = as_matrix(x)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"{x.shape[0]} rows but {y.shape[0]} targets")
    if x.shape[0] < 2:
        raise ValueError("fit_forest needs at least 2 rows")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("fit_forest needs finite inputs")

    order = np.lexsort(np.column_stack([x, y]).T[::-1])
    x, y = x[order], y[order]
    n_features = x.shape[1]
    per_split = min(config.features_per_split or math.ceil(n_features / 3), n_features)
    model = RandomForestRegressor(
        n_estimators=config.n_trees,
        max_depth=config.max_depth,
        max_features=per_split,
        min_samples_leaf=config.min_samples_leaf,
        bootstrap=config.bootstrap,
        random_state=config.seed,
        n_jobs=n_jobs,
    )
    model.fit(x, y)
    trees = [RegressionTree.from_estimator(estimator, n_features) for estimator in model.estimators_]
    logger.debug("Fitted %d trees on %d rows x %d features", len(trees), x.shape[0], n_features)
    return Forest(trees=trees, n_features=n_features, features_per_split=per_split, config=config)


def importance(forest: Forest, feature_names: Optional[Sequence[str]] = None) -> ImportanceReport:
    """Mean impurity decrease per feature across trees, normalized to sum 1."""
    if not forest.trees:
        raise StateError("Forest has no trees")
    raw = np.mean([tree.feature_importances() for tree in forest.trees], axis=0)
    total = raw.sum()
    degenerate = not total > 0
    if degenerate:
        logger.warning("All feature importances are zero; reporting a uniform ranking")
        normalized = np.full(forest.n_features, 1.0 / forest.n_features)
    else:
        normalized = raw / total
    ranking = np.lexsort((np.arange(forest.n_features), -normalized))
    names = tuple(feature_names) if feature_names is not None else None
    if names is not None and len(names) != forest.n_features:
        raise ValueError("feature_names must match the forest width")
    return ImportanceReport(normalized, ranking, degenerate, names)


def select_top_k(report: ImportanceReport, k: int) -> List[int]:
    if not 1 <= k <= report.n_features:
        raise ConfigError(f"k must be in [1, {report.n_features}], got {k}")
    return [int(i) for i in report.ranking[:k]]


@dataclass
class FeatureSelection:
    """Columns kept per modality, in importance order."""

    columns1: Tuple[str, ...]
    columns2: Tuple[str, ...]
    target: str = "age"
    reports: Dict[int, ImportanceReport] = field(default_factory=dict, repr=False)
    row_ids: Tuple[str, ...] = ()

    def columns(self, modality: int) -> Tuple[str, ...]:
        return self.columns1 if modality == 1 else self.columns2

    def apply(self, ds: Dataset) -> Dataset:
        return select_columns(ds, self.columns1, self.columns2)

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "columns1": list(self.columns1),
            "columns2": list(self.columns2),
            "row_ids": list(self.row_ids),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "FeatureSelection":
        return cls(
            columns1=tuple(data["columns1"]),
            columns2=tuple(data["columns2"]),
            target=data.get("target", "age"),
            row_ids=tuple(str(i) for i in data.get("row_ids", [])),
        )


def run_selection(
    ds: Dataset, train_indices, cfg: SelectionConfig, n_jobs: Optional[int] = None
) -> FeatureSelection:
    """Rank each modality's columns on the training rows and keep the top k.

    With selection disabled every column is kept in table order. The ids of the
    rows the ranking saw are recorded in ``row_ids``.
    """
    train_indices = np.asarray(train_indices, dtype=np.int64)
    row_ids = tuple(str(i) for i in ds.ids[train_indices])
    if not cfg.enabled:
        return FeatureSelection(ds.columns1, ds.columns2, cfg.target, row_ids=row_ids)

    kept, reports = {}, {}
    for m, k in ((1, cfg.k1), (2, cfg.k2)):
        columns = ds.columns(m)
        if not columns:
            kept[m] = ()
            continue
        rows = train_indices[ds.present(m)[train_indices]]
        if rows.size < 2:
            logger.warning("Modality %d has %d training rows; keeping all columns", m, rows.size)
            kept[m] = columns
            continue
        target = ds.age[rows] if cfg.target == "age" else ds.sex[rows].astype(np.float64)
        forest = fit_forest(ds.x(m)[rows], target, cfg.forest, n_jobs=n_jobs)
        report = importance(forest, columns)
        keep = select_top_k(report, min(k, len(columns)))
        kept[m] = tuple(columns[i] for i in keep)
        reports[m] = report
        logger.info("Modality %d: kept %d of %d columns", m, len(keep), len(columns))
    return FeatureSelection(kept[1], kept[2], cfg.target, reports, row_ids)


def write_importance_csv(report: ImportanceReport, path: Path, metadata: Optional[Mapping[str, str]] = None) -> Path:
    return write_csv(report.to_frame(), path, metadata)


def save_selection(selection: FeatureSelection, path: Union[str, Path]) -> Path:
    return write_json(Path(path), selection.to_dict())


def load_selection(path: Union[str, Path]) -> FeatureSelection:
    path = Path(path)
    if path.is_dir():
        path = path / "selection.json"
    if not path.exists():
        raise LoadError(f"Selection sidecar not found: {path}")
    try:
        return FeatureSelection.from_dict(json.loads(path.read_text(encoding="utf-8")))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise LoadError(f"Malformed selection sidecar {path}: {exc}") from exc

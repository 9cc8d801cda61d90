"""
Self-contained model checkpoints.

A checkpoint is an ``.npz`` archive: one float64 array per parameter plus a
``__header__`` entry holding JSON with the format version, model layout,
training config, column selection, standardization constants and the
best-epoch bookkeeping.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from ..exceptions import LoadError
from ..schemas import TrainConfig
from .data import StandardizationConstants
from .featsel import FeatureSelection
from .helpers import ensure_writable
from .model import ModelParams, ModelSpec

logger = logging.getLogger("brainage.services.checkpoint")

CHECKPOINT_VERSION = 1
HEADER_KEY = "__header__"


@dataclass
class Checkpoint:
    """Everything inference needs: parameters, columns and scaling."""

    params: ModelParams
    config: TrainConfig
    constants: StandardizationConstants
    selection: Optional[FeatureSelection] = None
    epoch: int = 0
    val_mae: float = float("nan")
    validation_ids: Tuple[str, ...] = field(default_factory=tuple)

    def header(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "spec": self.params.spec.to_dict(),
            "config": self.config.model_dump(mode="json"),
            "constants": self.constants.to_dict(),
            "selection": self.selection.to_dict() if self.selection is not None else None,
            "age_mean": self.params.age_mean,
            "age_std": self.params.age_std,
            "epoch": self.epoch,
            "val_mae": self.val_mae,
            "validation_ids": list(self.validation_ids),
        }


def save_checkpoint(checkpoint: Checkpoint, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = checkpoint.params.to_arrays()
    header = np.array(json.dumps(checkpoint.header(), sort_keys=True))
    with path.open("wb") as handle:
        np.savez(handle, **{HEADER_KEY: header}, **arrays)
    ensure_writable(path)
    logger.info("Saved checkpoint (epoch %d, val MAE %.4f) to %s", checkpoint.epoch, checkpoint.val_mae, path)
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise LoadError(f"Checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as archive:
            header = json.loads(str(archive[HEADER_KEY]))
            arrays = {name: archive[name] for name in archive.files if name != HEADER_KEY}
    except (OSError, ValueError, KeyError) as exc:
        raise LoadError(f"Unreadable checkpoint {path}: {exc}") from exc

    version = header.get("version")
    if version != CHECKPOINT_VERSION:
        raise LoadError(f"Checkpoint {path} has format version {version}, expected {CHECKPOINT_VERSION}")
    spec = ModelSpec.from_dict(header["spec"])
    params = ModelParams.from_arrays(spec, arrays, header["age_mean"], header["age_std"])
    selection = header.get("selection")
    return Checkpoint(
        params=params,
        config=TrainConfig.model_validate(header["config"]),
        constants=StandardizationConstants.from_dict(header["constants"]),
        selection=FeatureSelection.from_dict(selection) if selection is not None else None,
        epoch=int(header["epoch"]),
        val_mae=float(header["val_mae"]),
        validation_ids=tuple(header["validation_ids"]),
    )

"""
Pydantic schemas for run configuration and report validation.
"""

import hashlib
import json
import math
from typing import ClassVar, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class _Strict(BaseModel):
    """Base model that rejects unknown keys."""
    model_config = ConfigDict(extra="forbid")


class LatentSpec(_Strict):
    """Latent code layout shared by both encoders."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    total_dim: int = Field(default=120, ge=2, description="Width of each modality's latent code z")
    generic_dim: int = Field(default=50, ge=1, description="Leading entries of z holding the generic code")
    unique_dim: int = Field(default=70, ge=1, description="Trailing entries of z holding the unique code")

    @model_validator(mode="after")
    def check_partition(self):
        if self.generic_dim + self.unique_dim != self.total_dim:
            raise ValueError("generic_dim + unique_dim must equal total_dim")
        return self


class ArchitectureConfig(_Strict):
    """Hidden layer widths of every network."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    encoder_hidden: Tuple[int, ...] = Field(default=(256,), description="Encoder hidden widths")
    decoder_hidden: Tuple[int, ...] = Field(default=(256,), description="Decoder hidden widths")
    classifier_hidden: Tuple[int, ...] = Field(
        default=(64,), description="Sex classifier hidden widths (the discriminator reuses them)"
    )
    regressor_hidden: Tuple[int, ...] = Field(default=(64,), description="Age regressor hidden widths")
    hidden_activation: Literal["relu", "tanh"] = Field(default="relu", description="Hidden activation")

    @field_validator("encoder_hidden", "decoder_hidden", "classifier_hidden", "regressor_hidden")
    @classmethod
    def validate_widths(cls, v):
        if any(width < 1 for width in v):
            raise ValueError("Hidden widths must be >= 1")
        return tuple(v)


class LossWeights(_Strict):
    """Trade-off weights of the full objective."""
    regression: float = Field(default=1.0, ge=0.0, description="Weight of the age regression loss")
    classification: float = Field(default=0.5, ge=0.0, description="Weight of the sex classification loss")
    distance_ratio: float = Field(default=0.1, ge=0.0, description="Weight of the generic/unique distance ratio")
    reconstruction: float = Field(default=1.0, ge=0.0, description="Weight of own and cross reconstruction")
    adversarial: float = Field(default=0.1, ge=0.0, description="Weight of the generator side of the adversarial loss")
    variational: float = Field(default=0.01, ge=0.0, description="Weight of the KL term on unique codes")


class TrainConfig(_Strict):
    """Training hyperparameters and model variant."""
    latent: LatentSpec = Field(default_factory=LatentSpec)
    architecture: ArchitectureConfig = Field(default_factory=ArchitectureConfig)
    batch_size: int = Field(default=20, ge=2, description="Minibatch size")
    learning_rate: float = Field(default=0.001, gt=0.0, description="Initial Adam learning rate")
    lr_reduction_factor: float = Field(
        default=0.25, gt=0.0, lt=1.0, description="Multiplier applied on a validation plateau"
    )
    patience_epochs: int = Field(default=9, ge=1, description="Non-improving epochs before lr reduction")
    early_stop_patience: int = Field(default=20, ge=1, description="Non-improving epochs before stopping")
    max_epochs: int = Field(default=300, ge=1, description="Epoch budget")
    min_improvement: float = Field(
        default=1e-4, ge=0.0, description="Validation MAE decrease (years) that counts as improvement"
    )
    weights: LossWeights = Field(default_factory=LossWeights)
    mode: Literal["multitask", "single_task"] = Field(default="multitask")
    modality_mode: Literal["both", "smri_only", "fmri_only"] = Field(default="both")
    fusion_weights: Tuple[float, float] = Field(default=(0.5, 0.5), description="Per-modality weights of the generic-code average")
    unique_prior_means: Tuple[float, float] = Field(
        default=(0.0, 0.0), description="Mean offset of each modality's unique-code prior"
    )
    distance_epsilon: float = Field(default=1e-8, ge=0.0, description="Distance-ratio denominator guard")
    validation_fraction: float = Field(
        default=0.1, gt=0.0, lt=1.0, description="Share of training rows held out for early stopping"
    )
    seed: int = Field(default=0, ge=0)

    @field_validator("fusion_weights")
    @classmethod
    def validate_fusion_weights(cls, v):
        if min(v) < 0 or abs(v[0] + v[1] - 1.0) > 1e-12:
            raise ValueError("fusion_weights must be non-negative and sum to 1")
        return v

    @property
    def modalities(self) -> Tuple[int, ...]:
        """Modalities the model encodes."""
        return {"both": (1, 2), "smri_only": (1,), "fmri_only": (2,)}[self.modality_mode]


class SynthConfig(_Strict):
    """Synthetic two-modality cohort with known shared and unique factors."""
    n_subjects: int = Field(default=2000, ge=2)
    shared_dim: int = Field(default=8, ge=1, description="Factors seen by both modalities")
    unique_dim1: int = Field(default=4, ge=1, description="Factors private to modality 1")
    unique_dim2: int = Field(default=4, ge=1, description="Factors private to modality 2")
    informative1: int = Field(default=10, ge=1, description="Signal columns of modality 1")
    informative2: int = Field(default=10, ge=1, description="Signal columns of modality 2")
    distractors1: int = Field(default=100, ge=0, description="Pure-noise columns of modality 1")
    distractors2: int = Field(default=100, ge=0, description="Pure-noise columns of modality 2")
    noise1: float = Field(default=0.3, ge=0.0, description="Additive noise scale, modality 1")
    noise2: float = Field(default=0.6, ge=0.0, description="Additive noise scale, modality 2")
    age_noise: float = Field(default=0.1, ge=0.0, description="Age noise relative to the signal std")
    age_weights: Optional[List[float]] = Field(default=None, description="Age weights on the shared factors; drawn from the seed if omitted")
    sex_weights: Optional[List[float]] = Field(default=None, description="Sex logit weights on the shared factors; drawn from the seed if omitted")
    sex_strength: float = Field(default=1.5, ge=0.0, description="Scale of drawn sex logit weights")
    nonlinear: bool = Field(default=False, description="Apply elementwise tanh mixing")
    missing_rate1: float = Field(default=0.0, ge=0.0, lt=1.0, description="Share of rows without modality 1")
    missing_rate2: float = Field(default=0.0, ge=0.0, lt=1.0, description="Share of rows without modality 2")
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def check_weights(self):
        for name in ("age_weights", "sex_weights"):
            value = getattr(self, name)
            if value is not None and len(value) != self.shared_dim:
                raise ValueError(f"{name} must have shared_dim entries")
        if self.missing_rate1 + self.missing_rate2 >= 1.0:
            raise ValueError("missing rates must leave rows with both modalities")
        return self


class ForestConfig(_Strict):
    """Random forest used for filter feature selection."""
    n_trees: int = Field(default=100, ge=1)
    max_depth: Optional[int] = Field(default=12, ge=1)
    features_per_split: Optional[int] = Field(default=None, ge=1, description="None means ceil(m/3)")
    min_samples_leaf: int = Field(default=2, ge=1)
    bootstrap: bool = Field(default=True)
    seed: int = Field(default=0, ge=0)


class SelectionConfig(_Strict):
    """Per-modality top-k feature selection."""
    enabled: bool = Field(default=True)
    forest: ForestConfig = Field(default_factory=ForestConfig)
    k1: int = Field(default=256, ge=1, description="Columns kept for modality 1 (clipped to the table width)")
    k2: int = Field(default=256, ge=1, description="Columns kept for modality 2 (clipped to the table width)")
    target: Literal["age", "sex"] = Field(default="age", description="Target the importances are computed for")


class TableSchema(_Strict):
    """Column layout of the delimited input table."""
    id_column: str = Field(default="id")
    age_column: str = Field(default="age")
    sex_column: str = Field(default="sex")
    modality1_prefix: str = Field(default="x1_")
    modality2_prefix: str = Field(default="x2_")


class CvConfig(_Strict):
    """Cross-validation settings."""
    folds: int = Field(default=10, ge=2)
    stratify: Literal["none", "age_bin"] = Field(default="age_bin")
    baseline: bool = Field(default=True, description="Also report the ridge baseline")
    baseline_alpha: float = Field(default=1.0, gt=0.0)
    include_aae: bool = Field(default=False, description="Ablation also trains the aae and m_aae variants")


class EvalConfig(_Strict):
    """Checkpoint evaluation settings."""
    subset: Literal["validation", "all"] = Field(default="validation")
    scatter: bool = Field(default=True, description="Write the predicted-vs-chronological scatter export")


class ProbeConfig(_Strict):
    """Disentanglement probe settings."""
    ridge_alpha: float = Field(default=1.0, gt=0.0)
    folds: int = Field(default=5, ge=2)


class PathsConfig(_Strict):
    """Input artifact locations (relative paths resolve against the working directory)."""
    dataset: Optional[str] = Field(default=None, description="Delimited feature table")
    factors: Optional[str] = Field(default=None, description="Ground-truth factor sidecar")
    checkpoint: Optional[str] = Field(default=None, description="Checkpoint for eval/probe")
    selection: Optional[str] = Field(default=None, description="Directory holding selection sidecars")
    fold_plan: Optional[str] = Field(default=None, description="Fold plan to reuse instead of planning")


class RunConfig(_Strict):
    """One run of any CLI command."""
    seed: int = Field(default=0, ge=0, description="Master seed copied into every sub-config")
    synth: SynthConfig = Field(default_factory=SynthConfig)
    selection: SelectionConfig = Field(default_factory=SelectionConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    cv: CvConfig = Field(default_factory=CvConfig)
    evaluation: EvalConfig = Field(default_factory=EvalConfig)
    probe: ProbeConfig = Field(default_factory=ProbeConfig)
    table: TableSchema = Field(default_factory=TableSchema)
    paths: PathsConfig = Field(default_factory=PathsConfig)

    def resolved(self) -> "RunConfig":
        """Copy the master seed into the sub-configs."""
        forest = self.selection.forest.model_copy(update={"seed": self.seed})
        return self.model_copy(
            update={
                "synth": self.synth.model_copy(update={"seed": self.seed}),
                "selection": self.selection.model_copy(update={"forest": forest}),
                "train": self.train.model_copy(update={"seed": self.seed}),
            }
        )


def config_hash(model: BaseModel) -> str:
    """Stable short hash of a config model."""
    payload = json.dumps(model.model_dump(mode="json"), sort_keys=True).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()[:16]


class LossBreakdown(BaseModel):
    """Per-term objective values for one batch or one epoch."""
    regression: float = Field(..., description="Age regression")
    classification: float = Field(..., description="Sex classification")
    distance_ratio: float = Field(..., description="Generic/unique distance ratio")
    reconstruction: float = Field(..., description="Own and cross reconstruction")
    adversarial: float = Field(..., description="Generator side of the adversarial loss")
    variational: float = Field(..., description="KL on unique codes")
    total: float = Field(..., description="Weighted sum of the six terms")
    discriminator: float = Field(default=0.0, description="Discriminator loss, reported separately")

    TERMS: ClassVar[Tuple[str, ...]] = ("regression", "classification", "distance_ratio", "reconstruction", "adversarial", "variational")

    def is_finite(self) -> bool:
        return all(math.isfinite(value) for value in self.model_dump().values())

    @classmethod
    def mean(cls, items: List["LossBreakdown"]) -> "LossBreakdown":
        """Average breakdowns across batches."""
        if not items:
            raise ValueError("Cannot average an empty list of breakdowns")
        fields = cls.model_fields.keys()
        return cls(**{name: sum(getattr(item, name) for item in items) / len(items) for name in fields})


class TrainLogRow(BaseModel):
    """One epoch of training."""
    epoch: int
    loss: LossBreakdown
    val_mae: float = Field(..., description="Validation MAE in years")
    learning_rate: float
    seconds: float = Field(default=0.0, description="Wall-clock time of the epoch")


class BinMetrics(BaseModel):
    """MAE within one chronological age bin."""
    label: str
    n: int
    mae: float = Field(..., description="NaN when the bin is empty")
    mae_std: float = Field(..., description="Population std of absolute errors")


class MetricsReport(BaseModel):
    """Regression metrics with the age-bin breakdown."""
    n: int
    mae: float
    rmse: float
    pcc: float = Field(..., description="Pearson correlation; NaN when undefined")
    pcc_defined: bool = Field(..., description="False when either input has zero variance")
    pcc_method: str = Field(default="population", description="Moments divide by n")
    bins: List[BinMetrics] = Field(default_factory=list)
    sex_accuracy: Optional[float] = Field(default=None, description="Set for multitask runs")


class MetricSummary(BaseModel):
    mean: float
    std: float


class FoldResult(BaseModel):
    """Outcome of one cross-validation fold."""
    fold: int
    n_train: int
    n_test: int
    skipped: bool = False
    best_epoch: Optional[int] = None
    metrics: Optional[MetricsReport] = None


class CvReport(BaseModel):
    """Per-fold metrics plus pooled statistics."""
    label: str = Field(default="model")
    plan_hash: str
    folds: List[FoldResult]
    pooled: MetricsReport = Field(..., description="Metrics over all held-out predictions")
    summary: Dict[str, MetricSummary] = Field(..., description="Mean and std of fold metrics")


class AblationRow(BaseModel):
    variant: str = Field(..., description="Cell label, e.g. both+multitask")
    modality_mode: str
    mode: str
    plan_hash: str
    report: CvReport


class AblationReport(BaseModel):
    """Modality x task comparison trained on identical folds."""
    rows: List[AblationRow]


class ProbeModality(BaseModel):
    modality: int
    n: int
    generic_r2: float = Field(..., description="Cross-validated R^2 of the shared factors from generic codes")
    unique_r2: float = Field(..., description="Cross-validated R^2 of the shared factors from unique codes")
    gap: float


class ProbeReport(BaseModel):
    """Shared-factor recoverability from each latent partition."""
    modalities: List[ProbeModality]
    mean_gap: float


class ReconstructionModality(BaseModel):
    modality: int
    n: int = Field(..., description="Rows holding both modalities")
    own_error: float = Field(..., description="Mean row L2 error decoding from the modality's own codes")
    cross_error: float = Field(..., description="Mean row L2 error decoding with the other modality's generic code")
    ratio: float


class ReconstructionReport(BaseModel):
    """Own- versus cross-decoded reconstruction error per modality."""
    modalities: List[ReconstructionModality]

"""
Two-phase adversarial training, the plateau schedule with early stopping,
ablation variants and checkpoint inference.

Each step first updates the latent discriminator against N(0, I) prior
samples, then runs a fresh forward pass and updates the encoders, decoders and
heads on the weighted objective with the discriminator frozen.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from ..exceptions import ConfigError, NumericError
from ..schemas import LossBreakdown, TrainConfig, TrainLogRow
from .checkpoint import Checkpoint
from .data import Dataset, apply_standardization, standardize
from .featsel import FeatureSelection
from .helpers import write_csv
from .losses import (
    adv_disc_loss,
    adv_gen_loss,
    class_loss,
    dist_ratio_loss,
    recon_loss,
    reg_loss,
    total_objective,
    var_loss,
)
from .model import (
    Batch,
    ForwardPass,
    ModelParams,
    Upstream,
    backward_pass,
    build_model_spec,
    encode,
    forward_pass,
    init_model,
    parameter_count,
)
from .numerics import AdamState, MLPParams, Rng, adam_step, gaussian_sample, mlp_backward, mlp_forward

logger = logging.getLogger("brainage.services.train")

VARIANTS = ("single_task", "smri_only", "fmri_only", "aae", "m_aae")


def make_variant(cfg: TrainConfig, variant: str) -> TrainConfig:
    """Derive an ablation config; variants compose when applied in turn."""
    weights = cfg.weights
    if variant == "single_task":
        return cfg.model_copy(
            update={"mode": "single_task", "weights": weights.model_copy(update={"classification": 0.0})}
        )
    if variant in ("smri_only", "fmri_only"):
        if cfg.modality_mode not in ("both", variant):
            raise ConfigError(f"Cannot derive {variant} from a {cfg.modality_mode} config")
        return cfg.model_copy(update={"modality_mode": variant})
    if variant == "aae":
        single = make_variant(cfg, "single_task")
        return single.model_copy(
            update={"weights": single.weights.model_copy(update={"distance_ratio": 0.0, "variational": 0.0})}
        )
    if variant == "m_aae":
        return cfg.model_copy(
            update={"weights": weights.model_copy(update={"distance_ratio": 0.0, "variational": 0.0})}
        )
    raise ConfigError(f"Unknown variant {variant!r}; expected one of {', '.join(VARIANTS)}")


def generator_nets(cfg: TrainConfig) -> Tuple[str, ...]:
    """Networks updated in the second phase of a step."""
    names = []
    for m in cfg.modalities:
        names += [f"enc{m}", f"dec{m}"]
    names.append("regressor")
    if cfg.mode == "multitask":
        names.append("classifier")
    return tuple(names)


def make_batch(
    ds: Dataset, indices, modalities: Sequence[int], age_mean: float = 0.0, age_std: float = 1.0
) -> Batch:
    idx = np.asarray(indices, dtype=np.int64)
    return Batch(
        x={m: ds.x(m)[idx] for m in modalities},
        present={m: ds.present(m)[idx] for m in modalities},
        age=(ds.age[idx] - age_mean) / age_std,
        sex=ds.sex[idx].astype(np.float64),
    )


@dataclass
class TrainState:
    params: ModelParams
    optimizers: Dict[str, AdamState]
    learning_rate: float

    @classmethod
    def fresh(cls, params: ModelParams, learning_rate: float) -> "TrainState":
        optimizers = {name: AdamState.fresh(net, learning_rate) for name, net in params.nets.items()}
        return cls(params, optimizers, learning_rate)

    def with_learning_rate(self, learning_rate: float) -> "TrainState":
        optimizers = {name: opt.with_learning_rate(learning_rate) for name, opt in self.optimizers.items()}
        return TrainState(self.params, optimizers, learning_rate)


def discriminator_objective(
    params: ModelParams,
    batch: Batch,
    cfg: TrainConfig,
    rng: Optional[Rng] = None,
    eps: Optional[Mapping[int, np.ndarray]] = None,
    prior: Optional[Mapping[int, np.ndarray]] = None,
) -> Tuple[float, MLPParams]:
    """Discriminator loss and its parameter gradients.

    ``eps`` and ``prior`` pin the random draws, otherwise both come from ``rng``.
    """
    spec = params.spec
    d_prior, d_post, caches = [], [], []
    for index, m in enumerate(spec.modalities):
        rows = np.asarray(batch.present[m], dtype=bool)
        if not rows.any():
            continue
        m_eps = eps.get(m) if eps is not None else None
        code = encode(params, m, batch.x[m], None if rng is None else rng.child(index), "sample", m_eps)
        generic = code.generic[rows]
        samples = (
            prior[m] if prior is not None else gaussian_sample(rng.child(10 + m), generic.shape)
        )
        prior_prob, prior_cache = mlp_forward(params.disc, spec.nets["disc"], samples)
        post_prob, post_cache = mlp_forward(params.disc, spec.nets["disc"], generic)
        d_prior.append(prior_prob)
        d_post.append(post_prob)
        caches.append((prior_cache, post_cache))

    value, (grads_prior, grads_post) = adv_disc_loss(d_prior, d_post)
    grads = params.disc.zeros_like()
    for (prior_cache, post_cache), g_prior, g_post in zip(caches, grads_prior, grads_post):
        grads = grads.add(mlp_backward(prior_cache, g_prior)[0]).add(mlp_backward(post_cache, g_post)[0])
    return value, grads


def _scatter(rows: np.ndarray, values: np.ndarray, width: int) -> np.ndarray:
    full = np.zeros((rows.shape[0], width))
    full[rows] = values
    return full


def generator_objective(
    params: ModelParams,
    batch: Batch,
    cfg: TrainConfig,
    rng: Optional[Rng] = None,
    eps: Optional[Mapping[int, np.ndarray]] = None,
) -> Tuple[LossBreakdown, Dict[str, MLPParams], ForwardPass]:
    """Weighted objective over encoders, decoders and heads, with gradients."""
    spec = params.spec
    weights = cfg.weights
    lam_class = weights.classification if cfg.mode == "multitask" else 0.0
    fp = forward_pass(params, batch, "sample", rng, eps)
    up = Upstream()
    terms: Dict[str, float] = {}

    terms["regression"], d_age = reg_loss(batch.age, fp.age_raw[:, 0])
    up.d_age = weights.regression * d_age[:, None]

    terms["classification"], d_sex = class_loss(batch.sex, fp.sex_prob[:, 0])
    if cfg.mode == "multitask":
        up.d_sex = lam_class * d_sex[:, None]

    terms["distance_ratio"] = 0.0
    if len(spec.modalities) == 2:
        rows = fp.present[1] & fp.present[2]
        code1, code2 = fp.codes[1], fp.codes[2]
        value, (dg1, dg2, du1, du2) = dist_ratio_loss(
            code1.generic[rows], code2.generic[rows], code1.unique[rows], code2.unique[rows], cfg.distance_epsilon
        )
        terms["distance_ratio"] = value
        lam = weights.distance_ratio
        up.d_generic = {1: lam * _scatter(rows, dg1, dg1.shape[1]), 2: lam * _scatter(rows, dg2, dg2.shape[1])}
        up.d_unique = {1: lam * _scatter(rows, du1, du1.shape[1]), 2: lam * _scatter(rows, du2, du2.shape[1])}

    terms["reconstruction"], d_recon = recon_loss(batch.x, fp.recon, fp.present)
    up.d_recon = {pair: weights.reconstruction * grad for pair, grad in d_recon.items()}

    posted = sorted(fp.disc_post)
    terms["adversarial"], d_post = adv_gen_loss([fp.disc_post[m] for m in posted])
    up.d_disc_post = {m: weights.adversarial * grad for m, grad in zip(posted, d_post)}

    mods = list(spec.modalities)
    value, (d_mu, d_logvar) = var_loss(
        [fp.codes[m].mu_unique[fp.present[m]] for m in mods],
        [fp.codes[m].logvar_unique[fp.present[m]] for m in mods],
        [cfg.unique_prior_means[m - 1] for m in mods],
    )
    terms["variational"] = value
    unique_dim = spec.latent.unique_dim
    up.d_mu_unique = {m: weights.variational * _scatter(fp.present[m], g, unique_dim) for m, g in zip(mods, d_mu)}
    up.d_logvar_unique = {
        m: weights.variational * _scatter(fp.present[m], g, unique_dim) for m, g in zip(mods, d_logvar)
    }

    bad = {name: value for name, value in terms.items() if not math.isfinite(value)}
    if bad:
        raise NumericError(f"Non-finite loss terms: {', '.join(sorted(bad))}", {"terms": terms})

    effective = weights.model_copy(update={"classification": lam_class})
    breakdown = total_objective(terms, effective)
    grads = backward_pass(params, fp, up)
    return breakdown, grads, fp


def discriminator_step(state: TrainState, batch: Batch, cfg: TrainConfig, rng: Rng) -> Tuple[TrainState, float]:
    """Phase 1: update the discriminator only."""
    value, grads = discriminator_objective(state.params, batch, cfg, rng)
    if not math.isfinite(value):
        raise NumericError("Non-finite discriminator loss", {"terms": {"discriminator": value}})
    disc, opt = adam_step(state.params.disc, grads, state.optimizers["disc"])
    optimizers = dict(state.optimizers, disc=opt)
    return TrainState(state.params.replace_nets({"disc": disc}), optimizers, state.learning_rate), value


def generator_step(
    state: TrainState, batch: Batch, cfg: TrainConfig, rng: Rng
) -> Tuple[TrainState, LossBreakdown]:
    """Phase 2: update encoders, decoders and heads; the discriminator is frozen."""
    breakdown, grads, _ = generator_objective(state.params, batch, cfg, rng)
    updates, optimizers = {}, dict(state.optimizers)
    for name in generator_nets(cfg):
        grad = grads.get(name, state.params.nets[name].zeros_like())
        updates[name], optimizers[name] = adam_step(state.params.nets[name], grad, state.optimizers[name])
    return TrainState(state.params.replace_nets(updates), optimizers, state.learning_rate), breakdown


def train_step(state: TrainState, batch: Batch, cfg: TrainConfig, rng: Rng) -> Tuple[TrainState, LossBreakdown]:
    state, disc_loss = discriminator_step(state, batch, cfg, rng.child(0))
    state, breakdown = generator_step(state, batch, cfg, rng.child(1))
    return state, breakdown.model_copy(update={"discriminator": disc_loss})


@dataclass
class TrainLog:
    rows: List[TrainLogRow] = field(default_factory=list)

    @property
    def learning_rates(self) -> List[float]:
        return [row.learning_rate for row in self.rows]

    @property
    def val_maes(self) -> List[float]:
        return [row.val_mae for row in self.rows]

    def to_frame(self, include_seconds: bool = False) -> pd.DataFrame:
        records = []
        for row in self.rows:
            record = {"epoch": row.epoch, **row.loss.model_dump(), "val_mae": row.val_mae, "learning_rate": row.learning_rate}
            if include_seconds:
                record["seconds"] = row.seconds
            records.append(record)
        return pd.DataFrame.from_records(records)

    def to_csv(self, path: Path, metadata: Optional[Mapping[str, str]] = None) -> Path:
        """Wall-clock time is left out so identical runs give identical files."""
        return write_csv(self.to_frame(), path, metadata)


def split_validation(indices, fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Hold out a seeded share of ``indices`` for early stopping."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size < 2:
        raise ValueError("Need at least 2 rows to carve out a validation split")
    order = Rng(seed).child(8).generator.permutation(indices)
    n_val = min(max(1, int(round(fraction * indices.size))), indices.size - 1)
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def _usable(ds: Dataset, indices: np.ndarray, modalities: Sequence[int]) -> np.ndarray:
    if len(modalities) == 2:
        return indices
    return indices[ds.present(modalities[0])[indices]]


def predict_rows(params: ModelParams, ds: Dataset, indices) -> Tuple[np.ndarray, np.ndarray]:
    """Deterministic-mode ages (years) and sex probabilities on standardized rows."""
    batch = make_batch(ds, indices, params.spec.modalities)
    fp = forward_pass(params, batch, "deterministic", with_decoders=False, with_disc=False)
    return fp.age_raw[:, 0] * params.age_std + params.age_mean, fp.sex_prob[:, 0]


def fit(
    ds: Dataset,
    split: Tuple[Sequence[int], Sequence[int]],
    cfg: TrainConfig,
    selection: Optional[FeatureSelection] = None,
    on_epoch: Optional[Callable[[TrainLogRow, TrainState], None]] = None,
) -> Tuple[Checkpoint, TrainLog]:
    """Train on ``split[0]``, early-stop on ``split[1]``, return the best-validation checkpoint."""
    train_idx = np.asarray(split[0], dtype=np.int64)
    val_idx = np.asarray(split[1], dtype=np.int64)
    if train_idx.size == 0 or val_idx.size == 0:
        raise ValueError("fit needs non-empty training and validation splits")
    if np.intersect1d(train_idx, val_idx).size:
        raise ValueError("Training and validation splits overlap")

    if selection is not None:
        ds = selection.apply(ds)
    modalities = cfg.modalities
    train_idx, val_idx = _usable(ds, train_idx, modalities), _usable(ds, val_idx, modalities)
    if train_idx.size == 0 or val_idx.size == 0:
        raise ValueError(f"No rows carry the modalities required by {cfg.modality_mode}")

    ds_std, constants = standardize(ds, train_idx)
    age_mean = float(ds.age[train_idx].mean())
    age_std = float(ds.age[train_idx].std())
    if age_std < 1e-12:
        age_std = 1.0

    rng = Rng(cfg.seed)
    spec = build_model_spec(cfg, ds.input_dims())
    state = TrainState.fresh(init_model(spec, rng.child(0), age_mean, age_std), cfg.learning_rate)
    logger.info(
        "Training %s/%s model with %d parameters on %d rows (%d validation)",
        cfg.modality_mode, cfg.mode, parameter_count(state.params), train_idx.size, val_idx.size,
    )

    log = TrainLog()
    best_mae, best_params, best_epoch = math.inf, state.params, 0
    stale = 0
    learning_rate = cfg.learning_rate
    for epoch in range(1, cfg.max_epochs + 1):
        started = time.perf_counter()
        order = rng.child(1, epoch).generator.permutation(train_idx)
        breakdowns = []
        for step, start in enumerate(range(0, order.size, cfg.batch_size)):
            batch = make_batch(ds_std, order[start:start + cfg.batch_size], modalities, age_mean, age_std)
            try:
                state, breakdown = train_step(state, batch, cfg, rng.child(2, epoch, step))
            except NumericError as exc:
                exc.diagnostics.update({"epoch": epoch, "step": step, "learning_rate": learning_rate})
                raise
            breakdowns.append(breakdown)

        predicted, _ = predict_rows(state.params, ds_std, val_idx)
        val_mae = float(np.mean(np.abs(predicted - ds.age[val_idx])))
        row = TrainLogRow(
            epoch=epoch,
            loss=LossBreakdown.mean(breakdowns),
            val_mae=val_mae,
            learning_rate=learning_rate,
            seconds=time.perf_counter() - started,
        )
        log.rows.append(row)
        logger.info(
            "epoch %d loss %.4f val_mae %.4f lr %.2e (%.1fs)", epoch, row.loss.total, val_mae, learning_rate, row.seconds
        )
        if on_epoch is not None:
            on_epoch(row, state)

        if val_mae < best_mae - cfg.min_improvement:
            best_mae, best_params, best_epoch, stale = val_mae, state.params.copy(), epoch, 0
            continue
        stale += 1
        if stale >= cfg.early_stop_patience:
            logger.info("Early stop after %d epochs without improvement", stale)
            break
        if stale % cfg.patience_epochs == 0:
            learning_rate *= cfg.lr_reduction_factor
            state = state.with_learning_rate(learning_rate)
            logger.info("Validation plateau; learning rate reduced to %.2e", learning_rate)

    checkpoint = Checkpoint(
        params=best_params,
        config=cfg,
        constants=constants,
        selection=selection,
        epoch=best_epoch,
        val_mae=best_mae,
        validation_ids=tuple(str(i) for i in ds.ids[val_idx]),
    )
    return checkpoint, log


@dataclass
class PredictionSet:
    ids: np.ndarray
    age_true: np.ndarray
    age_pred: np.ndarray
    sex_true: np.ndarray
    sex_prob: np.ndarray

    @property
    def n(self) -> int:
        return int(self.ids.shape[0])

    def subset(self, ids: Sequence[str]) -> "PredictionSet":
        lookup = {subject: row for row, subject in enumerate(self.ids)}
        rows = np.asarray([lookup[subject] for subject in ids if subject in lookup], dtype=np.int64)
        return PredictionSet(
            self.ids[rows], self.age_true[rows], self.age_pred[rows], self.sex_true[rows], self.sex_prob[rows]
        )

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "id": self.ids,
                "age": self.age_true,
                "predicted_age": self.age_pred,
                "sex": self.sex_true,
                "sex_probability": self.sex_prob,
            }
        )


def predict(checkpoint: Checkpoint, ds: Dataset, indices=None) -> PredictionSet:
    """Apply the stored column selection and scaling, then predict in deterministic mode."""
    if checkpoint.selection is not None:
        ds = checkpoint.selection.apply(ds)
    ds_std = apply_standardization(ds, checkpoint.constants)
    rows = np.arange(ds.n) if indices is None else np.asarray(indices, dtype=np.int64)
    usable = _usable(ds, rows, checkpoint.params.spec.modalities)
    if usable.size < rows.size:
        logger.warning("Skipping %d rows without the modality this model encodes", rows.size - usable.size)
    ages, sex_prob = predict_rows(checkpoint.params, ds_std, usable)
    return PredictionSet(ds.ids[usable], ds.age[usable], ages, ds.sex[usable], sex_prob)

"""
Loss terms of the training objective.

Every loss returns ``(value, grads)`` where ``grads`` has the shape of the
loss inputs, so the training loop can hand them straight to the backward pass.
Batch reduction is the arithmetic mean throughout.
"""

import logging
import math
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from ..exceptions import ConfigError, DimensionError, NumericError
from ..schemas import LossBreakdown, LossWeights

logger = logging.getLogger("brainage.services.losses")

PROB_CLAMP = 1e-7


def _probs(p, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    if p.size == 0:
        raise ValueError(f"{name}: empty batch")
    return p


def _neg_log(p: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """-ln(clamp(p)) and its derivative w.r.t. p (zero where clamped)."""
    clamped = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    inside = (p > PROB_CLAMP) & (p < 1.0 - PROB_CLAMP)
    return -np.log(clamped), np.where(inside, -1.0 / clamped, 0.0)


def adv_disc_loss(
    d_prior: Sequence[np.ndarray], d_post: Sequence[np.ndarray]
) -> Tuple[float, Tuple[List[np.ndarray], List[np.ndarray]]]:
    """Discriminator BCE: prior samples labelled 1, posterior codes labelled 0.

    One entry per modality in each sequence; the per-modality losses are summed.
    """
    if len(d_prior) != len(d_post):
        raise DimensionError("d_prior and d_post must list the same modalities")
    total = 0.0
    grads_prior, grads_post = [], []
    for prior, post in zip(d_prior, d_post):
        shape_prior, shape_post = np.shape(prior), np.shape(post)
        prior, post = _probs(prior, "d_prior"), _probs(post, "d_post")
        loss_prior, grad_prior = _neg_log(prior)
        loss_post, grad_post = _neg_log(1.0 - post)
        total += loss_prior.mean() + loss_post.mean()
        grads_prior.append((grad_prior / prior.size).reshape(shape_prior))
        # d/dp of -ln(1 - p)
        grads_post.append((-grad_post / post.size).reshape(shape_post))
    return float(total), (grads_prior, grads_post)


def adv_gen_loss(d_post: Sequence[np.ndarray]) -> Tuple[float, List[np.ndarray]]:
    """Non-saturating generator loss, mean of -ln D over all modalities' codes."""
    if not d_post:
        raise ValueError("d_post: empty batch")
    shapes = [np.shape(p) for p in d_post]
    flat = [np.asarray(p, dtype=np.float64).reshape(-1) for p in d_post]
    n = sum(p.size for p in flat)
    if n == 0:
        raise ValueError("d_post: empty batch")
    total, grads = 0.0, []
    for p, shape in zip(flat, shapes):
        loss, grad = _neg_log(p)
        total += loss.sum()
        grads.append((grad / n).reshape(shape))
    return float(total / n), grads


def kl_standard(mu: np.ndarray, logvar: np.ndarray, prior_mean: float = 0.0) -> np.ndarray:
    """Per-row KL(N(mu, exp(logvar)) || N(prior_mean, I))."""
    diff = mu - prior_mean
    return 0.5 * np.sum(diff * diff + np.exp(logvar) - logvar - 1.0, axis=1)


def var_loss(
    mu_u: Sequence[np.ndarray],
    logvar_u: Sequence[np.ndarray],
    prior_means: Optional[Sequence[float]] = None,
) -> Tuple[float, Tuple[List[np.ndarray], List[np.ndarray]]]:
    """KL of each modality's unique code against its Gaussian prior.

    Mean over rows, summed over modalities. A modality with no rows adds 0.
    """
    if len(mu_u) != len(logvar_u):
        raise DimensionError("mu_u and logvar_u must list the same modalities")
    prior_means = [0.0] * len(mu_u) if prior_means is None else list(prior_means)
    total = 0.0
    grads_mu, grads_logvar = [], []
    for mu, logvar, prior_mean in zip(mu_u, logvar_u, prior_means):
        mu = np.asarray(mu, dtype=np.float64)
        logvar = np.asarray(logvar, dtype=np.float64)
        if mu.shape != logvar.shape:
            raise DimensionError(f"mu shape {mu.shape} != logvar shape {logvar.shape}")
        if not np.all(np.isfinite(logvar)):
            raise NumericError("var_loss: logvar is not finite")
        mu, logvar = np.atleast_2d(mu), np.atleast_2d(logvar)
        n = mu.shape[0]
        if n == 0:
            grads_mu.append(np.zeros_like(mu))
            grads_logvar.append(np.zeros_like(logvar))
            continue
        total += kl_standard(mu, logvar, prior_mean).mean()
        grads_mu.append((mu - prior_mean) / n)
        grads_logvar.append(0.5 * (np.exp(logvar) - 1.0) / n)
    return float(total), (grads_mu, grads_logvar)


def _unit_rows(diff: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(diff, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    return norms, np.where(norms[:, None] > 0, diff / safe[:, None], 0.0)


def dist_ratio_loss(gen1, gen2, unq1, unq2, eps: float = 1e-8):
    """Mean generic distance over mean unique distance (+ eps).

    Returns ``(value, (d_gen1, d_gen2, d_unq1, d_unq2))``. An empty batch
    contributes 0; with eps = 0 and coinciding unique codes the value is 0 when
    the generic codes coincide too, otherwise inf with zero gradients.
    """
    gen1, gen2 = np.atleast_2d(np.asarray(gen1, float)), np.atleast_2d(np.asarray(gen2, float))
    unq1, unq2 = np.atleast_2d(np.asarray(unq1, float)), np.atleast_2d(np.asarray(unq2, float))
    if gen1.shape != gen2.shape or unq1.shape != unq2.shape or gen1.shape[0] != unq1.shape[0]:
        raise DimensionError("dist_ratio_loss: inconsistent code shapes")
    n = gen1.shape[0]
    if n == 0:
        return 0.0, (np.zeros_like(gen1), np.zeros_like(gen2), np.zeros_like(unq1), np.zeros_like(unq2))

    gen_norms, gen_dir = _unit_rows(gen1 - gen2)
    unq_norms, unq_dir = _unit_rows(unq1 - unq2)
    numerator = gen_norms.mean()
    denominator = unq_norms.mean() + eps
    if denominator == 0.0:
        zeros = (np.zeros_like(gen1), np.zeros_like(gen2), np.zeros_like(unq1), np.zeros_like(unq2))
        return (0.0 if numerator == 0.0 else math.inf), zeros

    d_gen = gen_dir / (n * denominator)
    d_unq = -numerator * unq_dir / (n * denominator * denominator)
    return float(numerator / denominator), (d_gen, -d_gen, d_unq, -d_unq)


def reg_loss(y_true, y_pred) -> Tuple[float, np.ndarray]:
    """Mean absolute deviation (the L2 norm of a scalar residual)."""
    y_true = np.asarray(y_true, dtype=np.float64).reshape(-1)
    y_pred = np.asarray(y_pred, dtype=np.float64).reshape(-1)
    if y_true.shape != y_pred.shape:
        raise DimensionError(f"reg_loss: {y_true.size} targets vs {y_pred.size} predictions")
    if y_true.size == 0:
        raise ValueError("reg_loss: empty batch")
    residual = y_pred - y_true
    return float(np.abs(residual).mean()), np.sign(residual) / y_true.size


def class_loss(y, p) -> Tuple[float, np.ndarray]:
    """Binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7]."""
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    if y.shape != p.shape:
        raise DimensionError(f"class_loss: {y.size} labels vs {p.size} probabilities")
    if y.size == 0:
        raise ValueError("class_loss: empty batch")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("class_loss: labels must be 0 or 1")
    loss_pos, grad_pos = _neg_log(p)
    loss_neg, grad_neg = _neg_log(1.0 - p)
    loss = y * loss_pos + (1.0 - y) * loss_neg
    grad = (y * grad_pos - (1.0 - y) * grad_neg) / y.size
    return float(loss.mean()), grad


def recon_loss(
    x: Mapping[int, np.ndarray],
    recon: Mapping[Tuple[int, int], np.ndarray],
    present: Mapping[int, np.ndarray],
) -> Tuple[float, Dict[Tuple[int, int], np.ndarray]]:
    """Sum over (i, j) of the mean ||x_i - x_hat_ij|| over rows holding both i and j.

    ``recon[(i, j)]`` decodes modality i from the generic code of j and the unique code of i. A term with
    no eligible rows is 0.
    """
    total = 0.0
    grads: Dict[Tuple[int, int], np.ndarray] = {}
    for (i, j), x_hat in recon.items():
        x_hat = np.asarray(x_hat, dtype=np.float64)
        target = np.asarray(x[i], dtype=np.float64)
        if x_hat.shape != target.shape:
            raise DimensionError(f"recon_loss: term ({i},{j}) shape {x_hat.shape} != {target.shape}")
        rows = np.asarray(present[i], dtype=bool) & np.asarray(present[j], dtype=bool)
        grad = np.zeros_like(x_hat)
        n = int(rows.sum())
        if n:
            norms, direction = _unit_rows(x_hat[rows] - target[rows])
            total += norms.mean()
            grad[rows] = direction / n
        grads[(i, j)] = grad
    return float(total), grads


def total_objective(
    terms: Mapping[str, float], weights: LossWeights, discriminator: float = 0.0
) -> LossBreakdown:
    """Weighted sum of the six terms; the discriminator loss is carried alongside."""
    lambdas = weights.model_dump()
    negative = [name for name, value in lambdas.items() if value < 0]
    if negative:
        raise ConfigError(f"Loss weights must be non-negative: {', '.join(negative)}")
    values = {name: float(terms.get(name, 0.0)) for name in LossBreakdown.TERMS}
    total = sum(lambdas[name] * values[name] for name in LossBreakdown.TERMS)
    return LossBreakdown(**values, total=float(total), discriminator=float(discriminator))

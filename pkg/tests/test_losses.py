import math

import numpy as np
import pytest

from brainage.exceptions import ConfigError, DimensionError, NumericError
from brainage.schemas import LossBreakdown, LossWeights
from brainage.services.losses import (
    adv_disc_loss,
    adv_gen_loss,
    class_loss,
    dist_ratio_loss,
    kl_standard,
    recon_loss,
    reg_loss,
    total_objective,
    var_loss,
)
from brainage.services.numerics import gradcheck


def test_adv_disc_at_chance_and_perfect():
    half = np.full((4, 1), 0.5)
    value, _ = adv_disc_loss([half], [half])
    assert value == pytest.approx(2 * math.log(2))

    value, _ = adv_disc_loss([half, half], [half, half])
    assert value == pytest.approx(4 * math.log(2))

    value, _ = adv_disc_loss([np.ones(3)], [np.zeros(3)])
    assert 0.0 <= value < 1e-6


def test_adv_disc_is_permutation_invariant():
    rng = np.random.default_rng(0)
    prior, post = rng.uniform(0.05, 0.95, 8), rng.uniform(0.05, 0.95, 8)
    value, _ = adv_disc_loss([prior], [post])
    shuffled, _ = adv_disc_loss([prior[::-1]], [rng.permutation(post)])
    assert value == pytest.approx(shuffled)


def test_adv_disc_rejects_empty_batch():
    with pytest.raises(ValueError):
        adv_disc_loss([np.array([])], [np.array([0.5])])


def test_adv_disc_gradient():
    rng = np.random.default_rng(1)
    params = {"prior": rng.uniform(0.1, 0.9, (5, 1)), "post": rng.uniform(0.1, 0.9, (3, 1))}

    def loss_fn(arrays):
        value, (gp, gq) = adv_disc_loss([arrays["prior"]], [arrays["post"]])
        return value, {"prior": gp[0], "post": gq[0]}

    assert gradcheck(loss_fn, params).passed


def test_adv_gen_examples_and_monotonicity():
    assert adv_gen_loss([np.full(4, 0.5)])[0] == pytest.approx(math.log(2))
    assert adv_gen_loss([np.ones(4)])[0] < 1e-6
    values = [adv_gen_loss([np.full(3, p)])[0] for p in (0.1, 0.3, 0.6, 0.9)]
    assert values == sorted(values, reverse=True)


def test_adv_gen_pools_modalities():
    value, grads = adv_gen_loss([np.full((1, 1), 0.5), np.full((3, 1), 0.25)])
    assert value == pytest.approx((math.log(2) + 3 * math.log(4)) / 4)
    assert grads[1].shape == (3, 1)


def test_var_loss_examples():
    zeros = np.zeros((3, 2))
    assert var_loss([zeros], [zeros])[0] == pytest.approx(0.0)
    assert var_loss([np.ones((1, 1))], [np.zeros((1, 1))])[0] == pytest.approx(0.5)
    assert var_loss([np.full((1, 1), 2.0)], [np.zeros((1, 1))], prior_means=[2.0])[0] == pytest.approx(0.0)


def test_var_loss_rejects_non_finite_logvar():
    with pytest.raises(NumericError):
        var_loss([np.zeros((1, 1))], [np.array([[np.nan]])])


def test_kl_matches_monte_carlo():
    rng = np.random.default_rng(2024)
    for _ in range(50):
        mu = rng.choice([-1.0, 1.0]) * rng.uniform(1.0, 2.0)
        sigma = rng.uniform(0.5, 1.5)
        # 10**6 draws as antithetic pairs
        eps = rng.standard_normal(500_000)
        z = mu + sigma * np.concatenate([eps, -eps])
        log_q = -0.5 * ((z - mu) / sigma) ** 2 - math.log(sigma)
        log_p = -0.5 * z * z
        estimate = (log_q - log_p).mean()
        exact = kl_standard(np.array([[mu]]), np.array([[2.0 * math.log(sigma)]]))[0]
        assert abs(estimate - exact) <= 0.01 * exact


def test_var_loss_gradient():
    rng = np.random.default_rng(3)
    params = {"mu": rng.standard_normal((4, 3)), "logvar": rng.uniform(-1.0, 1.0, (4, 3))}

    def loss_fn(arrays):
        value, (d_mu, d_lv) = var_loss([arrays["mu"]], [arrays["logvar"]], [0.5])
        return value, {"mu": d_mu[0], "logvar": d_lv[0]}

    assert gradcheck(loss_fn, params).passed


def test_dist_ratio_examples():
    g = np.array([[1.0, 2.0]])
    u1, u2 = np.array([[0.0, 0.0]]), np.array([[3.0, 4.0]])
    assert dist_ratio_loss(g, g, u1, u2)[0] == 0.0
    assert dist_ratio_loss(u1, u2, u1, u2, eps=0.0)[0] == pytest.approx(1.0)
    value, _ = dist_ratio_loss([[0.0]], [[2.0]], [[0.0]], [[4.0]], eps=0.0)
    assert value == pytest.approx(0.5)


def test_dist_ratio_is_scale_covariant():
    rng = np.random.default_rng(4)
    g1, g2, u1, u2 = (rng.standard_normal((6, 3)) for _ in range(4))
    base = dist_ratio_loss(g1, g2, u1, u2, eps=0.0)[0]
    assert dist_ratio_loss(3 * g1, 3 * g2, u1, u2, eps=0.0)[0] == pytest.approx(3 * base)
    assert dist_ratio_loss(g1, g2, 3 * u1, 3 * u2, eps=0.0)[0] == pytest.approx(base / 3)


def test_dist_ratio_degenerate_cases():
    assert dist_ratio_loss(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros((0, 2)), np.zeros((0, 2)))[0] == 0.0
    same = np.ones((2, 2))
    assert dist_ratio_loss(same, same, same, same, eps=0.0)[0] == 0.0
    value, grads = dist_ratio_loss(np.zeros((1, 2)), np.ones((1, 2)), same[:1], same[:1], eps=0.0)
    assert value == math.inf
    assert all(not g.any() for g in grads)
    with pytest.raises(DimensionError):
        dist_ratio_loss(np.zeros((2, 2)), np.zeros((2, 3)), same, same)


def test_dist_ratio_gradient():
    rng = np.random.default_rng(5)
    names = ("g1", "g2", "u1", "u2")
    params = {name: rng.standard_normal((5, 3)) for name in names}

    def loss_fn(arrays):
        value, grads = dist_ratio_loss(*(arrays[name] for name in names))
        return value, dict(zip(names, grads))

    assert gradcheck(loss_fn, params).passed


def test_reg_loss_examples():
    assert reg_loss([30, 40], [30, 40])[0] == 0.0
    assert reg_loss([30, 40], [32, 37])[0] == pytest.approx(2.5)
    with pytest.raises(ValueError):
        reg_loss([], [])
    with pytest.raises(DimensionError):
        reg_loss([1, 2], [1])


def test_reg_loss_gradient():
    rng = np.random.default_rng(6)
    target = rng.standard_normal(6)
    params = {"pred": target + rng.choice([-1.0, 1.0], 6) * rng.uniform(0.5, 1.0, 6)}

    def loss_fn(arrays):
        value, grad = reg_loss(target, arrays["pred"])
        return value, {"pred": grad}

    assert gradcheck(loss_fn, params).passed


def test_class_loss_examples():
    assert class_loss([1], [0.5])[0] == pytest.approx(math.log(2))
    assert class_loss([0], [0.5])[0] == pytest.approx(math.log(2))
    assert class_loss([1], [1.0])[0] == pytest.approx(1e-7, abs=1e-9)
    assert class_loss([1], [0.0])[0] == pytest.approx(-math.log(1e-7))
    assert class_loss([1], [0.3])[0] == pytest.approx(class_loss([0], [0.7])[0])
    with pytest.raises(ValueError):
        class_loss([2], [0.5])


def test_class_loss_gradient():
    rng = np.random.default_rng(7)
    y = rng.integers(0, 2, 8).astype(float)
    params = {"p": rng.uniform(0.1, 0.9, 8)}

    def loss_fn(arrays):
        value, grad = class_loss(y, arrays["p"])
        return value, {"p": grad}

    assert gradcheck(loss_fn, params).passed


def test_recon_loss_counts_each_term():
    x = {1: np.array([[1.0, 2.0]]), 2: np.array([[1.0, 2.0]])}
    present = {1: np.array([True]), 2: np.array([True])}
    recon = {(1, 1): x[1], (1, 2): x[1], (2, 1): x[2], (2, 2): np.array([[2.0, 2.0]])}

    value, grads = recon_loss(x, recon, present)

    assert value == pytest.approx(1.0)
    assert np.allclose(grads[(2, 2)], [[1.0, 0.0]])


def test_recon_loss_masks_absent_rows():
    rng = np.random.default_rng(8)
    x = {1: rng.standard_normal((4, 3)), 2: rng.standard_normal((4, 2))}
    recon = {(1, 1): rng.standard_normal((4, 3)), (1, 2): rng.standard_normal((4, 3)),
             (2, 1): rng.standard_normal((4, 2)), (2, 2): rng.standard_normal((4, 2))}
    present = {1: np.array([True, True, False, True]), 2: np.array([True, False, True, True])}

    value, grads = recon_loss(x, recon, present)

    both = np.array([0, 3])
    expected = (
        np.linalg.norm(recon[(1, 1)][[0, 1, 3]] - x[1][[0, 1, 3]], axis=1).mean()
        + np.linalg.norm(recon[(1, 2)][both] - x[1][both], axis=1).mean()
        + np.linalg.norm(recon[(2, 1)][both] - x[2][both], axis=1).mean()
        + np.linalg.norm(recon[(2, 2)][[0, 2, 3]] - x[2][[0, 2, 3]], axis=1).mean()
    )
    assert value == pytest.approx(expected)
    assert np.all(grads[(1, 2)][[1, 2]] == 0.0)


def test_total_objective_weighted_sum():
    terms = {name: 1.0 for name in LossBreakdown.TERMS}
    breakdown = total_objective(terms, LossWeights())
    assert breakdown.total == pytest.approx(1.0 + 0.5 + 0.1 + 1.0 + 0.1 + 0.01)

    zero = LossWeights(**{name: 0.0 for name in LossBreakdown.TERMS})
    assert total_objective(terms, zero).total == 0.0

    only_reg = zero.model_copy(update={"regression": 1.0})
    assert total_objective({"regression": 2.5, "reconstruction": 9.0}, only_reg).total == pytest.approx(2.5)


def test_total_objective_is_linear_in_weights():
    terms = {"regression": 2.0, "variational": 3.0}
    single = LossWeights(regression=1.0, variational=2.0)
    double = LossWeights(regression=2.0, variational=4.0)
    assert total_objective(terms, double).total == pytest.approx(2 * total_objective(terms, single).total)


def test_total_objective_rejects_negative_weight():
    weights = LossWeights.model_construct(**{**LossWeights().model_dump(), "adversarial": -0.1})
    with pytest.raises(ConfigError):
        total_objective({}, weights)


def test_losses_are_non_negative():
    rng = np.random.default_rng(9)
    for _ in range(20):
        probs = rng.uniform(0.0, 1.0, 5)
        assert adv_disc_loss([probs], [probs[::-1]])[0] >= 0.0
        assert adv_gen_loss([probs])[0] >= 0.0
        assert var_loss([rng.standard_normal((3, 2))], [rng.standard_normal((3, 2))])[0] >= 0.0
        assert class_loss(rng.integers(0, 2, 5), probs)[0] >= 0.0

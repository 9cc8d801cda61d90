import json

import numpy as np
import pandas as pd
import pytest

from brainage.exceptions import ConfigError, LoadError, NumericError
from brainage.schemas import LossBreakdown, LossWeights, SynthConfig, TrainConfig
from brainage.services import train as train_module
from brainage.services.checkpoint import load_checkpoint, save_checkpoint
from brainage.services.data import synth_generate
from brainage.services.model import build_model_spec, forward_pass, init_model
from brainage.services.numerics import MLPParams, Rng, gradcheck
from brainage.services.train import (
    TrainState,
    discriminator_objective,
    discriminator_step,
    fit,
    generator_nets,
    generator_objective,
    generator_step,
    make_batch,
    make_variant,
    predict,
    split_validation,
    train_step,
)


@pytest.fixture
def model_and_batch(tiny_train_config, tiny_dataset):
    spec = build_model_spec(tiny_train_config, tiny_dataset.input_dims())
    params = init_model(spec, Rng(7), age_mean=39.0, age_std=7.0)
    batch = make_batch(tiny_dataset, np.arange(4), (1, 2), 39.0, 7.0)
    batch.present[2] = np.array([True, True, False, True])
    batch.x[2][2] = 0.0
    return params, batch


def _snapshot(params):
    return {name: array.copy() for name, array in params.to_arrays().items()}


def _changed(before, after):
    nets = set()
    for name, array in after.items():
        if not np.array_equal(before[name], array):
            nets.add(name.split(".")[0])
    return nets


def test_make_variant_examples(tiny_train_config):
    single = make_variant(tiny_train_config, "single_task")
    assert single.weights.classification == 0.0
    assert "classifier" not in generator_nets(single)

    smri = make_variant(tiny_train_config, "smri_only")
    assert smri.modalities == (1,)

    fmri = make_variant(TrainConfig(), "fmri_only")
    assert build_model_spec(fmri, {1: 10, 2: 10}).fused_dim == 120

    aae = make_variant(tiny_train_config, "aae")
    assert aae.mode == "single_task"
    assert aae.weights.distance_ratio == 0.0 and aae.weights.variational == 0.0

    with pytest.raises(ConfigError):
        make_variant(tiny_train_config, "triple_modality")


def test_smri_only_has_one_reconstruction_term(tiny_train_config, tiny_dataset):
    cfg = make_variant(tiny_train_config, "smri_only")
    params = init_model(build_model_spec(cfg, tiny_dataset.input_dims()), Rng(0))
    fp = forward_pass(params, make_batch(tiny_dataset, np.arange(4), cfg.modalities), "deterministic")

    assert list(fp.recon) == [(1, 1)]


@pytest.mark.parametrize("seed", range(20))
def test_generator_objective_gradients(tiny_train_config, model_and_batch, seed):
    params, batch = model_and_batch
    params = init_model(params.spec, Rng(seed), params.age_mean, params.age_std)
    draws = Rng(100 + seed).generator
    eps = {m: draws.standard_normal((batch.size, 4)) for m in (1, 2)}
    disc = params.disc.to_arrays("disc.")
    trainable = {k: v for k, v in params.to_arrays().items() if not k.startswith("disc.")}

    def loss_fn(arrays):
        model = type(params).from_arrays(params.spec, {**disc, **arrays}, params.age_mean, params.age_std)
        breakdown, grads, _ = generator_objective(model, batch, tiny_train_config, eps=eps)
        named = {}
        for name, g in grads.items():
            named.update(g.to_arrays(f"{name}."))
        return breakdown.total, named

    report = gradcheck(loss_fn, trainable, floor=1e-5)
    assert report.passed, report


def test_discriminator_objective_gradients(tiny_train_config, model_and_batch):
    params, batch = model_and_batch
    draws = Rng(5).generator
    eps = {m: draws.standard_normal((batch.size, 4)) for m in (1, 2)}
    prior = {1: draws.standard_normal((4, 2)), 2: draws.standard_normal((3, 2))}

    def loss_fn(arrays):
        model = params.replace_nets({"disc": MLPParams.from_arrays(arrays, "disc.")})
        value, grads = discriminator_objective(model, batch, tiny_train_config, eps=eps, prior=prior)
        return value, grads.to_arrays("disc.")

    assert gradcheck(loss_fn, params.disc.to_arrays("disc.")).passed


def test_phases_touch_only_their_networks(tiny_train_config, model_and_batch):
    params, batch = model_and_batch
    state = TrainState.fresh(params, 0.01)

    before = _snapshot(state.params)
    state, _ = discriminator_step(state, batch, tiny_train_config, Rng(1))
    assert _changed(before, _snapshot(state.params)) == {"disc"}

    before = _snapshot(state.params)
    state, _ = generator_step(state, batch, tiny_train_config, Rng(2))
    assert _changed(before, _snapshot(state.params)) == {"enc1", "enc2", "dec1", "dec2", "regressor", "classifier"}


def test_single_task_never_updates_classifier(tiny_train_config, model_and_batch):
    params, batch = model_and_batch
    cfg = make_variant(tiny_train_config, "single_task")
    state = TrainState.fresh(params, 0.01)
    before = _snapshot(state.params)

    state, _ = train_step(state, batch, cfg, Rng(3))

    assert "classifier" not in _changed(before, _snapshot(state.params))


def test_zero_weights_leave_generator_unchanged(tiny_train_config, model_and_batch):
    params, batch = model_and_batch
    zero = LossWeights(**{name: 0.0 for name in LossBreakdown.TERMS})
    cfg = tiny_train_config.model_copy(update={"weights": zero})
    state = TrainState.fresh(params, 0.01)
    before = _snapshot(state.params)

    state, breakdown = generator_step(state, batch, cfg, Rng(4))

    assert _changed(before, _snapshot(state.params)) == set()
    assert breakdown.total == 0.0


def test_train_step_is_reproducible(tiny_train_config, model_and_batch):
    params, batch = model_and_batch
    first, loss_a = train_step(TrainState.fresh(params, 0.01), batch, tiny_train_config, Rng(9))
    second, loss_b = train_step(TrainState.fresh(params, 0.01), batch, tiny_train_config, Rng(9))

    assert loss_a == loss_b
    assert _changed(_snapshot(first.params), _snapshot(second.params)) == set()


def test_every_step_of_a_short_run_respects_phase_scoping(tiny_train_config, tiny_dataset):
    spec = build_model_spec(tiny_train_config, tiny_dataset.input_dims())
    state = TrainState.fresh(init_model(spec, Rng(0)), 0.01)
    for epoch in range(5):
        for step, start in enumerate(range(0, 40, 8)):
            batch = make_batch(tiny_dataset, np.arange(start, start + 8), (1, 2))
            before = _snapshot(state.params)
            state, _ = discriminator_step(state, batch, tiny_train_config, Rng(0, (epoch, step, 0)))
            assert _changed(before, _snapshot(state.params)) <= {"disc"}
            before = _snapshot(state.params)
            state, _ = generator_step(state, batch, tiny_train_config, Rng(0, (epoch, step, 1)))
            assert "disc" not in _changed(before, _snapshot(state.params))


def test_split_validation_is_seeded_and_disjoint():
    train, val = split_validation(np.arange(50), 0.1, seed=3)
    again, _ = split_validation(np.arange(50), 0.1, seed=3)

    assert val.size == 5
    assert np.intersect1d(train, val).size == 0
    assert np.array_equal(train, again)
    with pytest.raises(ValueError):
        split_validation([1], 0.1, seed=0)


def test_fit_single_epoch_and_self_consistency(tiny_train_config, tiny_dataset):
    cfg = tiny_train_config.model_copy(update={"max_epochs": 1})
    split = split_validation(np.arange(tiny_dataset.n), 0.2, cfg.seed)

    checkpoint, log = fit(tiny_dataset, split, cfg)

    assert len(log.rows) == 1
    assert checkpoint.epoch == 1
    preds = predict(checkpoint, tiny_dataset).subset(checkpoint.validation_ids)
    assert preds.n == split[1].size
    assert abs(np.mean(np.abs(preds.age_pred - preds.age_true)) - checkpoint.val_mae) < 1e-9


def test_fit_rejects_empty_split(tiny_train_config, tiny_dataset):
    with pytest.raises(ValueError):
        fit(tiny_dataset, (np.arange(10), np.array([], dtype=int)), tiny_train_config)
    with pytest.raises(ValueError):
        fit(tiny_dataset, (np.arange(10), np.arange(5, 12)), tiny_train_config)


def test_learning_rate_schedule_and_early_stop(tiny_train_config, tiny_dataset):
    cfg = tiny_train_config.model_copy(
        update={
            "learning_rate": 0.001,
            "min_improvement": 1e9,
            "patience_epochs": 2,
            "early_stop_patience": 7,
            "max_epochs": 20,
        }
    )
    split = split_validation(np.arange(tiny_dataset.n), 0.2, cfg.seed)

    checkpoint, log = fit(tiny_dataset, split, cfg)

    expected = [0.001, 0.001, 0.001, 0.001 / 4, 0.001 / 4, 0.001 / 16, 0.001 / 16, 0.001 / 64]
    assert log.learning_rates == pytest.approx(expected, rel=1e-12)
    assert checkpoint.epoch == 1


def test_fit_is_deterministic(tmp_path, tiny_train_config, tiny_dataset):
    split = split_validation(np.arange(tiny_dataset.n), 0.2, tiny_train_config.seed)
    first_ckpt, first = fit(tiny_dataset, split, tiny_train_config)
    second_ckpt, second = fit(tiny_dataset, split, tiny_train_config)

    pd.testing.assert_frame_equal(first.to_frame(), second.to_frame())
    a = first.to_csv(tmp_path / "a.csv")
    b = second.to_csv(tmp_path / "b.csv")
    assert a.read_bytes() == b.read_bytes()
    assert first_ckpt.val_mae == second_ckpt.val_mae


def test_fit_handles_missing_modalities(tiny_train_config, tiny_synth_config):
    ds, _ = synth_generate(tiny_synth_config.model_copy(update={"missing_rate1": 0.2, "missing_rate2": 0.2}))
    split = split_validation(np.arange(ds.n), 0.2, 0)

    checkpoint, log = fit(ds, split, tiny_train_config.model_copy(update={"max_epochs": 2}))

    assert np.isfinite(checkpoint.val_mae)
    assert all(row.loss.is_finite() for row in log.rows)
    assert predict(checkpoint, ds).n == ds.n


def test_unimodal_model_skips_rows_without_its_modality(tiny_train_config, tiny_synth_config):
    ds, _ = synth_generate(tiny_synth_config.model_copy(update={"missing_rate1": 0.25}))
    cfg = make_variant(tiny_train_config, "smri_only").model_copy(update={"max_epochs": 1})

    checkpoint, _ = fit(ds, split_validation(np.arange(ds.n), 0.2, 0), cfg)

    assert predict(checkpoint, ds).n == int(ds.present1.sum())


def test_fit_reports_where_numbers_went_bad(monkeypatch, tiny_train_config, tiny_dataset):
    def explode(*args, **kwargs):
        raise NumericError("boom", {"terms": {"regression": float("nan")}})

    monkeypatch.setattr(train_module, "train_step", explode)
    split = split_validation(np.arange(tiny_dataset.n), 0.2, 0)
    with pytest.raises(NumericError) as excinfo:
        fit(tiny_dataset, split, tiny_train_config)
    assert excinfo.value.diagnostics["epoch"] == 1
    assert excinfo.value.diagnostics["step"] == 0


def test_checkpoint_round_trip_is_exact(tmp_path, tiny_train_config, tiny_dataset, tiny_selection_config):
    from brainage.services.featsel import run_selection

    split = split_validation(np.arange(tiny_dataset.n), 0.2, 0)
    selection = run_selection(tiny_dataset, split[0], tiny_selection_config)
    checkpoint, _ = fit(tiny_dataset, split, tiny_train_config.model_copy(update={"max_epochs": 2}), selection)

    loaded = load_checkpoint(save_checkpoint(checkpoint, tmp_path / "checkpoint.npz"))

    original, restored = checkpoint.params.to_arrays(), loaded.params.to_arrays()
    assert original.keys() == restored.keys()
    assert all(np.array_equal(original[name], restored[name]) for name in original)
    assert loaded.selection.columns1 == selection.columns1
    assert loaded.validation_ids == checkpoint.validation_ids
    assert np.array_equal(predict(loaded, tiny_dataset).age_pred, predict(checkpoint, tiny_dataset).age_pred)


def test_checkpoint_version_mismatch(tmp_path, tiny_train_config, tiny_dataset):
    split = split_validation(np.arange(tiny_dataset.n), 0.2, 0)
    checkpoint, _ = fit(tiny_dataset, split, tiny_train_config.model_copy(update={"max_epochs": 1}))
    path = save_checkpoint(checkpoint, tmp_path / "checkpoint.npz")

    with np.load(path) as archive:
        arrays = {name: archive[name] for name in archive.files}
    header = json.loads(str(arrays.pop("__header__")))
    header["version"] = 99
    stale = tmp_path / "stale.npz"
    np.savez(stale, __header__=np.array(json.dumps(header)), **arrays)

    with pytest.raises(LoadError):
        load_checkpoint(stale)
    with pytest.raises(LoadError):
        load_checkpoint(tmp_path / "absent.npz")


@pytest.mark.slow
def test_linear_task_reaches_sub_year_error():
    ds, _ = synth_generate(
        SynthConfig(n_subjects=1000, noise1=0.0, noise2=0.0, age_noise=0.0, distractors1=5, distractors2=5, seed=1)
    )
    weights = LossWeights(**{name: 0.0 for name in LossBreakdown.TERMS}).model_copy(update={"regression": 1.0})
    cfg = TrainConfig(weights=weights, mode="single_task", max_epochs=100, batch_size=32, seed=1)

    checkpoint, _ = fit(ds, split_validation(np.arange(ds.n), 0.1, 1), cfg)

    assert checkpoint.val_mae < 0.5

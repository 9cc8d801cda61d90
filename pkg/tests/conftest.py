import pytest

from brainage.config import settings
from brainage.schemas import (
    ArchitectureConfig,
    ForestConfig,
    LatentSpec,
    SelectionConfig,
    SynthConfig,
    TrainConfig,
)
from brainage.services.data import synth_generate


@pytest.fixture(autouse=True)
def disable_workbook(monkeypatch):
    monkeypatch.setenv("BRAINAGE_DISABLE_WORKBOOK", "true")
    settings.clear_workbook_override()
    yield
    settings.clear_workbook_override()


@pytest.fixture
def use_temp_output(tmp_path, monkeypatch):
    monkeypatch.setattr(settings, "output_dir", tmp_path)
    tmp_path.mkdir(parents=True, exist_ok=True)
    return tmp_path


@pytest.fixture
def tiny_train_config():
    return TrainConfig(
        latent=LatentSpec(total_dim=4, generic_dim=2, unique_dim=2),
        architecture=ArchitectureConfig(
            encoder_hidden=(6,),
            decoder_hidden=(6,),
            classifier_hidden=(4,),
            regressor_hidden=(4,),
            hidden_activation="tanh",
        ),
        batch_size=8,
        max_epochs=3,
        seed=3,
    )


@pytest.fixture
def tiny_synth_config():
    return SynthConfig(
        n_subjects=80,
        shared_dim=2,
        unique_dim1=1,
        unique_dim2=1,
        informative1=4,
        informative2=3,
        distractors1=2,
        distractors2=2,
        seed=5,
    )


@pytest.fixture
def tiny_selection_config():
    return SelectionConfig(forest=ForestConfig(n_trees=5, max_depth=3), k1=4, k2=3)


@pytest.fixture
def tiny_dataset(tiny_synth_config):
    ds, _ = synth_generate(tiny_synth_config)
    return ds

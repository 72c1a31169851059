import pytest

from semiseg.data import SyntheticShapesConfig, generate_synthetic_dataset
from semiseg.losses import LossWeights
from semiseg.models import DiscriminatorConfig, GeneratorConfig
from semiseg.training import RunConfig, TrainConfig

TINY_DATA = SyntheticShapesConfig(image_size=16, n_labeled=12, n_unlabeled=8, n_weak=12, n_test=6, rng_seed=2)


def tiny_config(manifest, regime="semi", **train) -> RunConfig:
    """A run small enough for unit tests: 16x16 images, a few channels per layer."""
    base = dict(regime=regime, epochs=2, batch_size=4, lr_d=1e-3, lr_g=1e-3, seed=0)
    base.update(train)
    return RunConfig(
        str(manifest),
        TrainConfig(**base),
        LossWeights(),
        GeneratorConfig(noise_dim=8, feature_maps=(16, 8, 3), output_size=16),
        DiscriminatorConfig(num_classes=4, encoder_channels=(4, 8, 8), input_size=16, decoder_deconv_layers=2),
    )


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_data")
    generate_synthetic_dataset(TINY_DATA, out)
    return out

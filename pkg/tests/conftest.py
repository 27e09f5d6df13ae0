import numpy as np
import pytest

from pq_multilabel.config import ClassifierConfig, load_config
from pq_multilabel.data_io import synthetic_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def gratings():
    """200 labelled 32x32 training images, 20 per class."""
    return synthetic_dataset(seed=3, n=200, num_classes=10)


@pytest.fixture
def tiny_cfg():
    return ClassifierConfig(
        input_shape=(3, 8, 8),
        conv_channels=(2, 3),
        dense_width=5,
        num_classes=3,
        dropout_p=0.2,
        dtype="float64",
    )


def small_overrides(output_dir) -> dict:
    return {
        "data.synthetic.n_train": 200,
        "data.synthetic.n_test": 40,
        "labels.simulate_annotators": 3,
        "hyper.epochs": 1,
        "hyper.batch_size": 32,
        "seeds": [0, 1],
        "mc_samples": 2,
        "shifts.angles": [15.0, 90.0],
        "shifts.corruptions": ["contrast", "brightness"],
        "acceptance.retry": False,
        "output_dir": str(output_dir),
    }


@pytest.fixture
def small_config(tmp_path):
    def make(**extra):
        overrides = small_overrides(tmp_path / "run")
        overrides.update(extra)
        return load_config(None, overrides)

    return make

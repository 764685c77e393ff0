import pytest

from splatengine.constants import GROUND_TRUTH_NAME
from splatengine.pipeline import (
    ground_truth_state,
    initialize_state,
    save_checkpoint,
)
from splatengine.reconstruction import Reconstruction
from splatengine.utils.data.dataset import save_dataset
from splatengine.utils.data.synthetic import generate_synthetic
from tests.fixtures.scenes import tiny_config, tiny_spec


@pytest.fixture(scope="session")
def tiny_scene():
    """A 3-frame, one-actor synthetic sequence and its true model."""
    return generate_synthetic(tiny_spec())


@pytest.fixture(scope="session")
def tiny_dataset(tiny_scene):
    dataset, _ = tiny_scene
    return dataset


@pytest.fixture(scope="session")
def tiny_ground_truth(tiny_scene):
    _, ground_truth = tiny_scene
    return ground_truth


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory, tiny_scene):
    """The tiny sequence on disk, with its ground-truth checkpoint."""
    dataset, ground_truth = tiny_scene
    path = tmp_path_factory.mktemp("tiny") / "dataset"
    save_dataset(dataset, path)
    save_checkpoint(
        ground_truth_state(ground_truth), path / GROUND_TRUTH_NAME
    )
    return path


@pytest.fixture
def fresh_state(tiny_dataset):
    """An untrained reconstruction of the tiny sequence."""
    return initialize_state(tiny_config(), tiny_dataset)


@pytest.fixture(scope="session")
def truth_reconstruction(tiny_dataset_dir):
    """The tiny sequence paired with its own ground-truth checkpoint."""
    return Reconstruction(
        dataset=tiny_dataset_dir,
        checkpoint=tiny_dataset_dir / GROUND_TRUTH_NAME,
        title="Tiny sequence",
    )

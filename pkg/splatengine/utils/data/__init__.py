from .dataset import Dataset, DatasetError, load_dataset, save_dataset
from .synthetic import (
    GroundTruth,
    SyntheticSceneSpec,
    analytic_flow,
    generate_synthetic,
)
from .tensor_file import TensorFileError, read_tensor, write_tensor

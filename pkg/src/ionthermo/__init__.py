"""Trapped-ion thermometry from blue-sideband spectra with a neural regressor."""
__version__ = "0.1.0"

from .dataset import Dataset, ParamBox, apply_projection_noise, generate_dataset
from .estimator import ProjectionNoise, SidebandThermometer, SpectrumSimulator
from .neuralnet import MlpModel, TrainConfig, init_model, load_model, save_model, train
from .physics import coupling_ratio, lamb_dicke, spectrum, thermal_pmf

__all__ = [
    "Dataset",
    "MlpModel",
    "ParamBox",
    "ProjectionNoise",
    "SidebandThermometer",
    "SpectrumSimulator",
    "TrainConfig",
    "apply_projection_noise",
    "coupling_ratio",
    "generate_dataset",
    "init_model",
    "lamb_dicke",
    "load_model",
    "save_model",
    "spectrum",
    "thermal_pmf",
    "train",
]

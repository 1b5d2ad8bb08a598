"""Multimodal time-series forecasting lab: naive vs. constrained text fusion."""

__version__ = "0.1.0"

from .fusion import FusionSpec
from .backbone import DLinearBackbone, ForecastModel, MlpBackbone
from .data import MultimodalDataset, SplitSpec, WindowBatch, generate_toy_dataset
from .textpath import TextPipeline, ToyEncoder
from .training import TrainConfig, lr_sweep, train_run

__all__ = [
    "FusionSpec",
    "DLinearBackbone",
    "MlpBackbone",
    "ForecastModel",
    "MultimodalDataset",
    "WindowBatch",
    "SplitSpec",
    "generate_toy_dataset",
    "ToyEncoder",
    "TextPipeline",
    "TrainConfig",
    "train_run",
    "lr_sweep",
    "__version__",
]

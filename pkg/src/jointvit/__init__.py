"""Joint image/video classification with a frame-wise ViT, class-token
temporal shift and per-dataset heads, on a small numpy autodiff engine."""
from .data import AugmentConfig, DatasetSpec, Manifest, SampleBatch, load_manifest, synth_dataset
from .model import ViTConfig, ViTModel, checkpoint_load, checkpoint_save, forward, init_model
from .tensor import Tape, Tensor
from .train import (HyperparamRegime, LossWeighter, OptimizerConfig, TrainDataset, TrainState,
                    evaluate, train_iteration)

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig", "DatasetSpec", "HyperparamRegime", "LossWeighter", "Manifest", "OptimizerConfig",
    "SampleBatch", "Tape", "Tensor", "TrainDataset", "TrainState", "ViTConfig", "ViTModel",
    "checkpoint_load", "checkpoint_save", "evaluate", "forward", "init_model", "load_manifest",
    "synth_dataset", "train_iteration",
]

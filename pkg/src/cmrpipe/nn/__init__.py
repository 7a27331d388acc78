from .models import ModelSpec, SaxClassifier, UNet3Plus, build_model
from .train import Adam, LossConfig, TrainConfig, train
from .weights import load_model, save_model

__all__ = [
    "Adam", "LossConfig", "ModelSpec", "SaxClassifier", "TrainConfig",
    "UNet3Plus", "build_model", "load_model", "save_model", "train",
]

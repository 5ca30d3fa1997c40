"""Network descriptions, weights and training."""

from dentalxr.models.network import Network
from dentalxr.models.spec import (
    ARCHITECTURES,
    LayerSpec,
    ModelSpec,
    backbone_output,
    build_custom_cnn,
    build_pretrained,
)
from dentalxr.models.training import (
    EarlyStopping,
    TrainConfig,
    TrainHistory,
    UntrainedModelWarning,
    adam_step,
    extract_features,
    fit,
    predict,
    scce_loss,
    train,
)
from dentalxr.models.weights import load_backbone, load_model, load_weights, save_weights

__all__ = [
    "ARCHITECTURES",
    "EarlyStopping",
    "LayerSpec",
    "ModelSpec",
    "Network",
    "TrainConfig",
    "TrainHistory",
    "UntrainedModelWarning",
    "adam_step",
    "backbone_output",
    "build_custom_cnn",
    "build_pretrained",
    "extract_features",
    "fit",
    "load_backbone",
    "load_model",
    "load_weights",
    "predict",
    "save_weights",
    "scce_loss",
    "train",
]

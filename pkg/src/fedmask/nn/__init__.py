from .layers import (
    AvgPool2D,
    BatchNorm2D,
    Conv2D,
    Dense,
    Layer,
    NonFiniteError,
    ReLU,
    ShapeError,
    Sigmoid,
    Upsample2D,
)
from .loss import LabelRangeError, softmax_cross_entropy
from .model import Model, build_unet, init_parameters
from .optim import AdamState, adam_step, sgd_step
from .params import (
    GradientVector,
    LayoutEntry,
    LayoutError,
    ParameterLayout,
    ParameterVector,
    assign_parameters,
    flatten,
    model_layout,
    unflatten,
)
from .rten import read_rten, rten_bytes, rten_from_bytes, write_rten

__all__ = [
    "AdamState",
    "AvgPool2D",
    "BatchNorm2D",
    "Conv2D",
    "Dense",
    "GradientVector",
    "LabelRangeError",
    "Layer",
    "LayoutEntry",
    "LayoutError",
    "Model",
    "NonFiniteError",
    "ParameterLayout",
    "ParameterVector",
    "ReLU",
    "ShapeError",
    "Sigmoid",
    "Upsample2D",
    "adam_step",
    "assign_parameters",
    "build_unet",
    "flatten",
    "init_parameters",
    "model_layout",
    "read_rten",
    "rten_bytes",
    "rten_from_bytes",
    "sgd_step",
    "softmax_cross_entropy",
    "unflatten",
    "write_rten",
]

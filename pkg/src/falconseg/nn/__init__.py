"""Minimal float64 neural-net stack: layers with hand-written gradients."""

from falconseg.nn.adam import Adam
from falconseg.nn.layers import (
    BatchNorm2d,
    Conv2d,
    Dropout,
    GlobalAvgPool,
    LeakyReLU,
    Linear,
    Module,
    Param,
    Sequential,
    Sigmoid,
    UpsampleNearest2,
)

__all__ = [
    "Adam", "BatchNorm2d", "Conv2d", "Dropout", "GlobalAvgPool", "LeakyReLU",
    "Linear", "Module", "Param", "Sequential", "Sigmoid", "UpsampleNearest2",
]

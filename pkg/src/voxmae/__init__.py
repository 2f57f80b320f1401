"""Volumetric masked-autoencoder pretraining and downstream adaptation on numpy."""

from .errors import FormatError, InvalidArgument, NumericError, UndefinedMetric, VoxmaeError
from .model import ModelConfig, tiny_config
from .volumes import Volume

__version__ = "0.1.0"

__all__ = ["FormatError", "InvalidArgument", "ModelConfig", "NumericError", "UndefinedMetric", "Volume",
           "VoxmaeError", "tiny_config"]

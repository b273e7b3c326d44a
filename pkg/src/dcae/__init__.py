"""Learned image compression with a dictionary cross-attention entropy model.

Everything runs on numpy: a small reverse-mode autograd (``dcae.tensor``),
the transforms and entropy model, an rANS coder, the container and archive
formats, training, metrics and the ``dcae`` command line.
"""

from .codec import compress, decompress, ideal_rate
from .errors import (
    ConfigurationError,
    CorruptContainerError,
    CorruptStreamError,
    DcaeError,
    DimensionError,
    IntegrityError,
    MetricUndefinedError,
    UnsupportedFormatError,
)
from .estimator import DcaeCodec
from .formats import load_model, save_model
from .model import DcaeModel, ModelConfig, profile_config

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "CorruptContainerError",
    "CorruptStreamError",
    "DcaeCodec",
    "DcaeError",
    "DcaeModel",
    "DimensionError",
    "IntegrityError",
    "MetricUndefinedError",
    "ModelConfig",
    "UnsupportedFormatError",
    "compress",
    "decompress",
    "ideal_rate",
    "load_model",
    "profile_config",
    "save_model",
]

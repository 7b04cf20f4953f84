"""Texture CNNs (TCNN, TCNN-Inception) for histopathology image classification."""

from .engine import ConvGeometry, NonFiniteError, Param, ShapeError
from .model import (NetworkSpec, ParameterStore, build_tcnn, build_tcnn_inception, count_parameters,
                    init_parameters)

__version__ = "0.1.0"

__all__ = ["ConvGeometry", "NetworkSpec", "NonFiniteError", "Param", "ParameterStore", "ShapeError",
           "build_tcnn", "build_tcnn_inception", "count_parameters", "init_parameters"]

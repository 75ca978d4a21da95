"""Hierarchical spatiotemporal transformer with gyroscope attention, in numpy."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # pragma: no cover - running from a source tree
    __version__ = "0.1.0"

from .numerics import DimensionError, NumericError, count_flops, grad_check
from .attention import build_gyroscope_set, dstga, mhsa, stga, stga_oracle
from .encoder import count_parameters, encode, make_config
from .analysis import count_attention_flops, count_model_flops

__all__ = [
    "DimensionError",
    "NumericError",
    "build_gyroscope_set",
    "count_attention_flops",
    "count_flops",
    "count_model_flops",
    "count_parameters",
    "dstga",
    "encode",
    "grad_check",
    "make_config",
    "mhsa",
    "stga",
    "stga_oracle",
]

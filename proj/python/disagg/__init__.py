"""Disaggregation regression: polygon responses to pixel-level rate rasters.

Each function mirrors a `disagg` CLI subcommand and works on the same
directory artifacts, so pipelines can mix the CLI, C++ and python freely.
"""

from disagg._core import (
    DataError,
    NumericError,
    UsageError,
    compare,
    fit,
    mcmc,
    predict,
    prepare,
    read_grid,
    simulate,
)

__all__ = [
    "DataError",
    "NumericError",
    "UsageError",
    "compare",
    "fit",
    "mcmc",
    "predict",
    "prepare",
    "read_grid",
    "simulate",
]

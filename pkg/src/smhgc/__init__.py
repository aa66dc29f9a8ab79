"""Similarity-enhanced homophily for multi-view heterophilous graph clustering."""

from smhgc.errors import (
    ContractError,
    DimensionError,
    FeasibilityError,
    LoadError,
    NumericError,
    SmhgcError,
    UndefinedRatioError,
)

__version__ = "0.1.0"

__all__ = [
    "ContractError",
    "DimensionError",
    "FeasibilityError",
    "LoadError",
    "NumericError",
    "SmhgcError",
    "UndefinedRatioError",
]

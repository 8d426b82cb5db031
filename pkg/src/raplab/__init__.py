"""raplab: retrieval-augmented forecasting of spatiotemporal fields."""

from .field import (
    DimensionError,
    FormatError,
    NonFiniteError,
    SpatiotemporalField,
    TrajectoryPair,
    field_binop,
    read_field,
    window_split,
    write_field,
)
from .kernels import BACKEND

__version__ = "0.1.0"

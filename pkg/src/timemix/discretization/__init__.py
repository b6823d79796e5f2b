"""Grids, coefficient fields, operator assembly and discrete norms."""

from .coefficients import (
    CoefficientSet,
    Field,
    affine_field,
    constant_field,
    load_table_csv,
    matrix_field,
    power_field,
    table_field,
)
from .grids import Grid, TimeGrid, build_grid
from .norms import h0_norm, h1_norm, h2_norm, hneg1_norm
from .operators import (
    CoercivityReport,
    OperatorMatrix,
    assemble_adjoint_ops,
    assemble_generator,
    assemble_noise_op,
    central_diff,
    check_coercivity,
    noise_boundary_max,
    second_diff,
)

__all__ = [
    "CoefficientSet",
    "CoercivityReport",
    "Field",
    "Grid",
    "OperatorMatrix",
    "TimeGrid",
    "affine_field",
    "assemble_adjoint_ops",
    "assemble_generator",
    "assemble_noise_op",
    "build_grid",
    "central_diff",
    "check_coercivity",
    "constant_field",
    "h0_norm",
    "h1_norm",
    "h2_norm",
    "hneg1_norm",
    "load_table_csv",
    "matrix_field",
    "noise_boundary_max",
    "power_field",
    "second_diff",
    "table_field",
]

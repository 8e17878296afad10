from .field import (
    ControlGrid,
    DeformationField,
    FieldFormatError,
    basis_matrix,
    bspline_basis,
    bspline_field,
    read_field,
    read_grid,
    write_field,
    write_grid,
)
from .registration import (
    RegistrationConfig,
    downsample,
    level_sigma,
    objective,
    refine_grid,
    register,
    register_detailed,
)
from .warp import propagate_mask, warp, warp_array

__all__ = [
    "ControlGrid", "DeformationField", "FieldFormatError", "RegistrationConfig",
    "basis_matrix", "bspline_basis", "bspline_field", "downsample", "level_sigma", "objective",
    "propagate_mask", "read_field", "read_grid", "refine_grid", "register",
    "register_detailed", "warp", "warp_array", "write_field", "write_grid",
]

"""Backward bilinear warping (the spatial-transformer step).

Output pixel ``p`` takes the input value at ``p + u(p)``, interpolated from
the four surrounding input pixels with weights ``prod_d (1 - |p'_d - q_d|)``.
Sample positions outside the input are clamped to its edge.
"""
from __future__ import annotations

from typing import Union

import numpy as np

from .. import _kernels
from ..core import BinaryMask, DataError, ImageTensor, SoftMask
from .field import DeformationField


def sample_positions(field: DeformationField) -> tuple[np.ndarray, np.ndarray]:
    h, w = field.shape
    yy, xx = np.mgrid[0:h, 0:w]
    return (xx + field.u[..., 0].astype(np.float64),
            yy + field.u[..., 1].astype(np.float64))


def warp_array(arr: np.ndarray, field: DeformationField) -> np.ndarray:
    """Warp a 2-D float array; returns float64."""
    if arr.shape != field.shape:
        raise DataError(f"warp: input {arr.shape} and field {field.shape} differ")
    px, py = sample_positions(field)
    return _kernels.bilinear_sample(np.ascontiguousarray(arr, dtype=np.float64), px, py)


def warp(moving: Union[ImageTensor, SoftMask], field: DeformationField):
    """Warp an image or soft mask through ``field``; returns the same type."""
    if isinstance(moving, ImageTensor):
        chans = [warp_array(moving.data[:, :, c], field) for c in range(moving.channels)]
        out = np.clip(np.stack(chans, axis=-1), 0.0, 1.0)
        return ImageTensor(out.astype(np.float32))
    if isinstance(moving, SoftMask):
        out = warp_array(moving.data, field)
        return SoftMask(np.clip(out, 0.0, 1.0).astype(np.float32))
    raise TypeError(f"cannot warp {type(moving).__name__}")


def propagate_mask(support_mask: BinaryMask, field: DeformationField) -> SoftMask:
    """Carry a support mask onto the query grid; threshold at 0.5 for the coarse mask."""
    return warp(SoftMask.from_binary(support_mask), field)

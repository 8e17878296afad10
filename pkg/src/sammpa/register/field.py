"""Cubic B-spline control grids, dense displacement fields and their file format."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

FIELD_MAGIC = b"MPAD"
FIELD_VERSION = 1
_HEADER = struct.Struct("<4sIII")


class FieldFormatError(ValueError):
    pass


def bspline_basis(t):
    """The four cubic B-spline blending weights at fractional offset ``t``.

    Returns an array of shape ``t.shape + (4,)``; the weights sum to one.
    """
    t = np.asarray(t, dtype=np.float64)
    s = 1.0 - t
    t2 = t * t
    t3 = t2 * t
    return np.stack([
        s * s * s / 6.0,
        (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
        (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
        t3 / 6.0,
    ], axis=-1)


def control_count(extent: int, spacing: float) -> int:
    """Control points needed to cover ``extent`` pixels (one margin point each side)."""
    return int(np.ceil(extent / spacing)) + 3


def basis_matrix(positions, spacing: float, n_ctrl: int) -> np.ndarray:
    """Dense (len(positions), n_ctrl) matrix of B-spline weights along one axis.

    Control point ``k`` sits at pixel coordinate ``(k - 1) * spacing``; a
    pixel at ``x`` in cell ``i = floor(x / spacing)`` blends controls
    ``i .. i + 3``.
    """
    pos = np.asarray(positions, dtype=np.float64)
    t = pos / spacing
    cell = np.floor(t).astype(np.intp)
    if cell.size and (cell.min() < 0 or cell.max() + 3 >= n_ctrl):
        raise ValueError("control grid does not cover the requested positions")
    w = bspline_basis(t - cell)
    out = np.zeros((pos.size, n_ctrl))
    rows = np.arange(pos.size)
    for l in range(4):
        out[rows, cell + l] = w[:, l]
    return out


@dataclass
class ControlGrid:
    """Control-point displacements in pixel units.

    ``displacements`` has shape ``(ny, nx, 2)`` with ``[..., 0]`` the x
    (column) component and ``[..., 1]`` the y (row) component.
    """

    spacing: float
    displacements: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.displacements, dtype=np.float64)
        if d.ndim != 3 or d.shape[2] != 2:
            raise ValueError(f"displacements must be (ny, nx, 2), got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ValueError("control displacements must be finite")
        self.displacements = d

    @property
    def ny(self) -> int:
        return self.displacements.shape[0]

    @property
    def nx(self) -> int:
        return self.displacements.shape[1]

    @classmethod
    def zeros(cls, height: int, width: int, spacing: float) -> "ControlGrid":
        shape = (control_count(height, spacing), control_count(width, spacing), 2)
        return cls(spacing, np.zeros(shape))

    def covers(self, height: int, width: int) -> bool:
        return ((self.nx - 3) * self.spacing >= width
                and (self.ny - 3) * self.spacing >= height)

    def matrices(self, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
        """Row and column basis matrices for a ``height x width`` pixel grid."""
        if not self.covers(height, width):
            raise ValueError(
                f"grid {self.ny}x{self.nx} at spacing {self.spacing} "
                f"does not cover a {height}x{width} image")
        return (basis_matrix(np.arange(height), self.spacing, self.ny),
                basis_matrix(np.arange(width), self.spacing, self.nx))


@dataclass(frozen=True, eq=False)
class DeformationField:
    """Dense displacement ``u`` of shape (H, W, 2), pixel units, (u_x, u_y)."""

    u: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float32)
        if u.ndim != 3 or u.shape[2] != 2:
            raise ValueError(f"field must be (H, W, 2), got {u.shape}")
        if not np.all(np.isfinite(u)):
            raise ValueError("deformation field contains non-finite values")
        u.setflags(write=False)
        object.__setattr__(self, "u", u)

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape[:2]

    @classmethod
    def zeros(cls, height: int, width: int) -> "DeformationField":
        return cls(np.zeros((height, width, 2), dtype=np.float32))

    def mean_magnitude(self) -> float:
        return float(np.hypot(self.u[..., 0], self.u[..., 1]).mean())


def render(grid: ControlGrid, wy: np.ndarray, wx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Dense float64 (ux, uy) from precomputed basis matrices."""
    c = grid.displacements
    return wy @ c[:, :, 0] @ wx.T, wy @ c[:, :, 1] @ wx.T


def bspline_field(grid: ControlGrid, height: int, width: int) -> DeformationField:
    """Evaluate the tensor-product cubic B-spline expansion at every pixel."""
    wy, wx = grid.matrices(height, width)
    ux, uy = render(grid, wy, wx)
    return DeformationField(np.stack([ux, uy], axis=-1))


# ---------------------------------------------------------------------------
# binary grid files: magic, version, H, W, then H*W*C little-endian float32
# ---------------------------------------------------------------------------

def write_grid(path, data: np.ndarray) -> None:
    """Write an (H, W) or (H, W, C) float grid in the MPAD layout.

    The channel count is not stored; readers infer it from the payload size.
    """
    a = np.asarray(data, dtype="<f4")
    if a.ndim == 2:
        a = a[:, :, None]
    h, w = a.shape[:2]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FIELD_MAGIC, FIELD_VERSION, h, w))
        fh.write(np.ascontiguousarray(a).tobytes())


def read_grid(path) -> np.ndarray:
    """Read an MPAD grid; returns (H, W, C) float32."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FieldFormatError(f"{path}: truncated header")
    magic, version, h, w = _HEADER.unpack_from(raw)
    if magic != FIELD_MAGIC:
        raise FieldFormatError(f"{path}: bad magic {magic!r}")
    if version != FIELD_VERSION:
        raise FieldFormatError(f"{path}: unsupported version {version}")
    payload = len(raw) - _HEADER.size
    if h * w == 0 or payload % (4 * h * w):
        raise FieldFormatError(f"{path}: payload of {payload} bytes does not fit {h}x{w}")
    c = payload // (4 * h * w)
    a = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(h, w, c)
    return a.astype(np.float32)


def write_field(field: DeformationField, path) -> None:
    write_grid(path, field.u)


def read_field(path) -> DeformationField:
    a = read_grid(path)
    if a.shape[2] != 2:
        raise FieldFormatError(f"{path}: expected 2 channels, found {a.shape[2]}")
    return DeformationField(a)

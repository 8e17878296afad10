"""Image and mask data model, geometry helpers, Dice, and PNG I/O.

Coordinates follow the image convention used everywhere in the package:
``x`` is the column, ``y`` the row, origin at the top-left, and pixel
centres sit on integer coordinates.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy import ndimage

DEFAULT_SIZE = 256
FOREGROUND = 1
BACKGROUND = 0


class DataError(ValueError):
    """Raised for unreadable files or inputs that violate a type invariant."""


@dataclass(frozen=True, eq=False)
class ImageTensor:
    """H x W x C float32 intensities in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float32)
        if a.ndim == 2:
            a = a[:, :, None]
        if a.ndim != 3 or a.shape[2] not in (1, 3):
            raise DataError(f"image must be HxWx1 or HxWx3, got shape {a.shape}")
        if a.shape[0] == 0 or a.shape[1] == 0:
            raise DataError("zero-dimension image")
        if not np.all(np.isfinite(a)) or a.min() < 0.0 or a.max() > 1.0:
            raise DataError("image intensities must be finite and within [0, 1]")
        a.setflags(write=False)
        object.__setattr__(self, "data", a)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]

    def gray(self) -> np.ndarray:
        """Single-channel float64 view (mean over channels)."""
        return self.data.mean(axis=2, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """H x W mask with values exactly 0 or 1 (stored as uint8)."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data)
        if a.ndim != 2:
            raise DataError(f"mask must be 2-D, got shape {a.shape}")
        if a.dtype == bool:
            a = a.astype(np.uint8)
        elif not np.all((a == 0) | (a == 1)):
            raise DataError("binary mask values must be 0 or 1")
        else:
            a = a.astype(np.uint8)
        a.setflags(write=False)
        object.__setattr__(self, "data", a)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def area(self) -> int:
        return int(self.data.sum())

    def any(self) -> bool:
        return bool(self.data.any())

    @classmethod
    def empty(cls, height: int, width: int) -> "BinaryMask":
        return cls(np.zeros((height, width), dtype=np.uint8))

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.data, other.data))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class SoftMask:
    """H x W float32 mask in [0, 1]; its 0.5-threshold is the hard mask."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float32)
        if a.ndim != 2:
            raise DataError(f"soft mask must be 2-D, got shape {a.shape}")
        if not np.all(np.isfinite(a)) or a.min(initial=0.0) < 0.0 or a.max(initial=0.0) > 1.0:
            raise DataError("soft mask values must lie in [0, 1]")
        a.setflags(write=False)
        object.__setattr__(self, "data", a)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def threshold(self, level: float = 0.5) -> BinaryMask:
        return BinaryMask(self.data >= level)

    @classmethod
    def from_binary(cls, mask: BinaryMask) -> "SoftMask":
        return cls(mask.data.astype(np.float32))


@dataclass(frozen=True)
class Point:
    x: float
    y: float
    label: int = FOREGROUND

    def as_list(self) -> list:
        return [float(self.x), float(self.y), int(self.label)]


@dataclass(frozen=True)
class BBox:
    """Inclusive integer pixel bounds."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise DataError(f"degenerate box {self}")

    @property
    def area(self) -> int:
        return (self.x_max - self.x_min + 1) * (self.y_max - self.y_min + 1)

    def contains(self, x: float, y: float) -> bool:
        return self.x_min <= x <= self.x_max and self.y_min <= y <= self.y_max

    def corners(self) -> list[tuple[int, int]]:
        return [(self.x_min, self.y_min), (self.x_max, self.y_min),
                (self.x_min, self.y_max), (self.x_max, self.y_max)]

    def as_list(self) -> list[int]:
        return [int(self.x_min), int(self.y_min), int(self.x_max), int(self.y_max)]


@dataclass(frozen=True)
class SampleRecord:
    id: str
    image_path: Path
    mask_path: Optional[Path] = None


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------

def _read_raster(path) -> tuple[np.ndarray, float]:
    """Decode a raster file to a float64 array plus its full-scale value."""
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(im, dtype=np.float64)
                scale = 65535.0
            elif mode in ("1", "L", "RGB"):
                arr = np.asarray(im, dtype=np.float64)
                scale = 1.0 if mode == "1" else 255.0
            elif mode in ("LA",):
                arr = np.asarray(im.convert("L"), dtype=np.float64)
                scale = 255.0
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64)
                scale = 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    if arr.size == 0 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise DataError(f"zero-dimension image {path}")
    return arr, scale


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resize of a HxW or HxWxC array."""
    h, w = arr.shape[:2]
    if (h, w) == (out_h, out_w):
        return arr.copy()

    def axis(n_in, n_out):
        if n_out == 1 or n_in == 1:
            pos = np.zeros(n_out)
        else:
            pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        i0 = np.minimum(np.floor(pos).astype(np.intp), max(n_in - 2, 0))
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, pos - i0

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    if arr.ndim == 3:
        fy = fy[:, None, None]
        fx = fx[None, :, None]
    else:
        fy = fy[:, None]
        fx = fx[None, :]
    top = arr[y0][:, x0] * (1 - fx) + arr[y0][:, x1] * fx
    bot = arr[y1][:, x0] * (1 - fx) + arr[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def resize_nearest(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = arr.shape[:2]
    if (h, w) == (out_h, out_w):
        return arr.copy()
    ys = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.intp), h - 1)
    xs = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.intp), w - 1)
    return arr[ys][:, xs]


def load_image(path, target_size: Optional[int] = DEFAULT_SIZE) -> ImageTensor:
    """Read an 8/16-bit PNG, scale to [0, 1] and bilinearly resize to a square.

    Grayscale files stay single-channel, colour files keep three channels.
    ``target_size=None`` keeps the native size.
    """
    arr, scale = _read_raster(path)
    arr = arr / scale
    if target_size is not None:
        arr = resize_bilinear(arr, target_size, target_size)
    return ImageTensor(np.clip(arr, 0.0, 1.0).astype(np.float32))


def load_mask(path, target_size: Optional[int] = DEFAULT_SIZE) -> BinaryMask:
    arr, scale = _read_raster(path)
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    # compare on the 8-bit scale whatever the file depth
    arr8 = arr * (255.0 / scale)
    if target_size is not None:
        arr8 = resize_nearest(arr8, target_size, target_size)
    return BinaryMask(arr8 > 127)


def save_image(image: ImageTensor, path) -> None:
    arr = np.round(image.data * 255.0).astype(np.uint8)
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path)


def save_mask(mask: BinaryMask, path) -> None:
    Image.fromarray((mask.data * 255).astype(np.uint8), mode="L").save(path)


def list_dataset(root) -> list[SampleRecord]:
    """Enumerate ``<root>/images/<id>.png`` with optional ``<root>/masks/<id>.png``."""
    root = Path(root)
    img_dir = root / "images"
    if not img_dir.is_dir():
        raise DataError(f"dataset root {root} has no images/ directory")
    records = []
    for p in sorted(img_dir.glob("*.png")):
        m = root / "masks" / p.name
        records.append(SampleRecord(p.stem, p, m if m.exists() else None))
    if not records:
        raise DataError(f"no images found under {img_dir}")
    return records


# ---------------------------------------------------------------------------
# geometry and metrics
# ---------------------------------------------------------------------------

def dice(a: BinaryMask, b: BinaryMask) -> float:
    """Dice overlap; two empty masks score 1.0."""
    if a.shape != b.shape:
        raise DataError(f"dice: shape mismatch {a.shape} vs {b.shape}")
    sa = int(a.data.sum())
    sb = int(b.data.sum())
    if sa + sb == 0:
        return 1.0
    inter = int(np.logical_and(a.data, b.data).sum())
    return 2.0 * inter / (sa + sb)


def centroid(mask: BinaryMask) -> Point:
    ys, xs = np.nonzero(mask.data)
    if xs.size == 0:
        raise DataError("centroid of an empty mask")
    return Point(float(xs.mean()), float(ys.mean()), FOREGROUND)


def bounding_box(mask: BinaryMask) -> BBox:
    rows = np.flatnonzero(mask.data.any(axis=1))
    cols = np.flatnonzero(mask.data.any(axis=0))
    if rows.size == 0:
        raise DataError("bounding box of an empty mask")
    return BBox(int(cols[0]), int(rows[0]), int(cols[-1]), int(rows[-1]))


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 4:
        return ndimage.generate_binary_structure(2, 1)
    if connectivity == 8:
        return ndimage.generate_binary_structure(2, 2)
    raise ValueError("connectivity must be 4 or 8")


def largest_component(mask: BinaryMask, connectivity: int = 4) -> BinaryMask:
    """Keep only the largest connected foreground component.

    Equal-area ties go to the component met first in raster order.
    """
    labels, n = ndimage.label(mask.data, structure=_structure(connectivity))
    if n == 0:
        return BinaryMask.empty(*mask.shape)
    areas = np.bincount(labels.ravel())[1:]
    best = int(np.argmax(areas)) + 1
    return BinaryMask(labels == best)


def signed_distance(mask: BinaryMask) -> np.ndarray:
    """Exact Euclidean signed distance to the mask boundary, in pixels.

    Convention (pixel centres as points):

    * outside pixels get ``-d`` where ``d`` is the distance to the nearest
      foreground pixel, so every outside value is <= -1;
    * inside pixels get ``d - 1`` where ``d`` is the distance to the nearest
      background pixel, with the area beyond the image frame counting as
      background. Foreground pixels touching the boundary therefore sit at
      exactly 0 and deeper pixels are positive.

    An empty mask has no boundary; every pixel gets ``-hypot(H, W)``.
    """
    fg = mask.data.astype(bool)
    h, w = fg.shape
    out = np.empty((h, w), dtype=np.float64)
    if not fg.any():
        out.fill(-float(np.hypot(h, w)))
        return out
    padded = np.pad(fg, 1, constant_values=False)
    inside = ndimage.distance_transform_edt(padded)[1:-1, 1:-1]
    outside = ndimage.distance_transform_edt(~fg) if not fg.all() else np.zeros((h, w))
    out[fg] = inside[fg] - 1.0
    out[~fg] = -outside[~fg]
    return out

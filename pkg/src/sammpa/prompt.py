"""Point, box and mask prompts derived from a propagated coarse mask."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .core import (
    BACKGROUND,
    FOREGROUND,
    BBox,
    BinaryMask,
    Point,
    SoftMask,
    bounding_box,
    centroid,
    largest_component,
    signed_distance,
)
from .register.field import read_grid, write_grid

LOGIT_CLAMP = 20.0
DEFAULT_SOFTEN_SCALE = 0.5


@dataclass(frozen=True, eq=False)
class PromptSet:
    points: tuple
    box: BBox
    mask_logits: np.ndarray
    fallback_flag: bool = False

    def __post_init__(self):
        pts = tuple(self.points)
        if sum(1 for p in pts if p.label == FOREGROUND) != 1:
            raise ValueError("a prompt set carries exactly one foreground point")
        logits = np.asarray(self.mask_logits, dtype=np.float32)
        if logits.ndim != 2:
            raise ValueError("mask logits must be a 2-D grid")
        logits.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "mask_logits", logits)

    @property
    def foreground(self) -> Point:
        return next(p for p in self.points if p.label == FOREGROUND)

    @property
    def background(self) -> list[Point]:
        return [p for p in self.points if p.label == BACKGROUND]

    def with_logits(self, logits: np.ndarray) -> "PromptSet":
        return replace(self, mask_logits=logits)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps([[p.as_list() for p in self.points], self.box.as_list(),
                             bool(self.fallback_flag)]).encode())
        h.update(str(self.mask_logits.shape).encode())
        h.update(np.ascontiguousarray(self.mask_logits, dtype="<f4").tobytes())
        return h.hexdigest()

    def to_dict(self, logits_ref) -> dict:
        return {
            "points": [p.as_list() for p in self.points],
            "box": self.box.as_list(),
            "mask_logits": logits_ref,
            "fallback": bool(self.fallback_flag),
        }

    def save(self, path) -> None:
        """Write ``<name>.json`` plus a ``<name>.logits.mpad`` sidecar next to it."""
        path = Path(path)
        sidecar = path.with_suffix(".logits.mpad")
        write_grid(sidecar, self.mask_logits)
        path.write_text(json.dumps(self.to_dict(sidecar.name), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "PromptSet":
        path = Path(path)
        doc = json.loads(path.read_text())
        pts = tuple(Point(float(x), float(y), int(lab)) for x, y, lab in doc["points"])
        ref = doc.get("mask_logits")
        if ref is None:
            raise ValueError(f"{path}: prompt set without mask logits")
        grid = read_grid(path.parent / ref)
        return cls(pts, BBox(*doc["box"]), grid[:, :, 0], bool(doc.get("fallback", False)))


def soften_mask(hard: BinaryMask, scale: float = DEFAULT_SOFTEN_SCALE) -> np.ndarray:
    """Logit map ``scale * signed_distance``, clamped to +-20.

    Boundary foreground pixels have signed distance 0, so ``sigmoid >= 0.5``
    reproduces the mask exactly.
    """
    logits = scale * signed_distance(hard)
    return np.clip(logits, -LOGIT_CLAMP, LOGIT_CLAMP).astype(np.float32)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def _box_points(box: BBox) -> list[Point]:
    return [Point(float(x), float(y), BACKGROUND) for x, y in box.corners()]


def _fallback(h: int, w: int) -> PromptSet:
    box = BBox(w // 4, h // 4, max(w // 4, (3 * w) // 4 - 1), max(h // 4, (3 * h) // 4 - 1))
    fg = Point((w - 1) / 2.0, (h - 1) / 2.0, FOREGROUND)
    return PromptSet(tuple([fg] + _box_points(box)), box,
                     np.zeros((h, w), dtype=np.float32), True)


def interior_point(region: BinaryMask) -> Point:
    """Centroid when it lands on the region, else the deepest interior pixel."""
    c = centroid(region)
    h, w = region.shape
    yi = min(max(int(np.floor(c.y + 0.5)), 0), h - 1)
    xi = min(max(int(np.floor(c.x + 0.5)), 0), w - 1)
    if region.data[yi, xi]:
        return c
    sd = np.where(region.data.astype(bool), signed_distance(region), -np.inf)
    flat = int(np.argmax(sd))
    y, x = divmod(flat, w)
    return Point(float(x), float(y), FOREGROUND)


def generate_prompts(coarse: SoftMask, expand_margin: int = 0,
                     soften_scale: float = DEFAULT_SOFTEN_SCALE) -> PromptSet:
    """One foreground point, four box-corner background points, box and mask logits.

    An empty coarse mask yields a flagged fallback instead of an error.
    """
    h, w = coarse.shape
    region = largest_component(coarse.threshold(0.5))
    if not region.any():
        return _fallback(h, w)
    fg = interior_point(region)
    b = bounding_box(region)
    m = int(expand_margin)
    box = BBox(max(b.x_min - m, 0), max(b.y_min - m, 0),
               min(b.x_max + m, w - 1), min(b.y_max + m, h - 1))
    return PromptSet(tuple([fg] + _box_points(box)), box, soften_mask(region, soften_scale))

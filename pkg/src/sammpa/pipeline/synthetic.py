"""Desk-scale fixture: one bright smooth-edged blob per image, with exact masks."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

SIZE = 256
TEXTURE_AMPLITUDE = 0.04


def _blob(rng, size=SIZE):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    lo, hi = size / 4.0, 3.0 * size / 4.0
    cx, cy = rng.uniform(lo, hi, size=2)
    radius = rng.uniform(20.0, 60.0)
    # low-order angular harmonics give the mild elastic jitter of the outline
    harmonics = [(k, rng.uniform(-0.06, 0.06), rng.uniform(0, 2 * np.pi)) for k in (2, 3, 4)]
    dx = xx - cx
    dy = yy - cy
    rho = np.hypot(dx, dy)
    theta = np.arctan2(dy, dx)
    r_theta = radius * (1.0 + sum(a * np.cos(k * theta + ph) for k, a, ph in harmonics))
    sd = r_theta - rho  # positive inside
    return sd


def _texture(rng, size=SIZE):
    noise = ndimage.gaussian_filter(rng.standard_normal((size, size)), 6.0)
    noise /= np.abs(noise).max() + 1e-12
    return TEXTURE_AMPLITUDE * noise


def synth_pair(rng, size=SIZE):
    """One (image, mask) pair as uint8 arrays."""
    sd = _blob(rng, size)
    background = rng.uniform(0.15, 0.25)
    contrast = rng.uniform(0.35, 0.6)
    # smooth outline, crisp intensity step: the mask is exactly the bright region
    inside = (sd >= 0.0).astype(np.float64)
    img = background + _texture(rng, size) * (1.0 - inside) + contrast * inside
    img8 = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    mask8 = np.where(sd >= 0.0, 255, 0).astype(np.uint8)
    return img8, mask8


def make_synthetic_dataset(n: int, seed: int, out_dir) -> Path:
    """Write ``n`` image/mask pairs under ``out_dir/images`` and ``out_dir/masks``.

    Ids are ``synth_000``, ``synth_001``, ...; output is a pure function of
    ``(n, seed)``.
    """
    if n < 2:
        raise ValueError("need at least two samples")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    width = max(3, len(str(n - 1)))
    for i in range(n):
        img8, mask8 = synth_pair(rng)
        name = f"synth_{i:0{width}d}.png"
        Image.fromarray(img8, mode="L").save(out / "images" / name, optimize=False)
        Image.fromarray(mask8, mode="L").save(out / "masks" / name, optimize=False)
    return out

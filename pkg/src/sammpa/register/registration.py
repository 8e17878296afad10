"""Unsupervised B-spline registration by multi-resolution gradient descent.

The criterion is mean squared intensity difference between the fixed image
and the warped moving image, plus a bending-energy penalty on the dense
field. The field lives on the fixed (query) grid and pulls moving (support)
content, the same direction :func:`~sammpa.register.warp.warp` uses.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from dataclasses import field as dc_field

import numpy as np
from scipy import ndimage

from .. import _kernels
from ..core import DataError, ImageTensor
from .field import ControlGrid, DeformationField, basis_matrix, bspline_field

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RegistrationConfig:
    levels: int = 3
    grid_spacing_finest: float = 32.0
    lambda_bend: float = 0.1
    iters_per_level: int = 200
    step0: float = 1.0
    tol_rel: float = 1e-6
    # Gaussian pre-smoothing of downsampled levels, sigma = pyramid_sigma * factor
    # level pixels, capped at 1/8 of the level's short side; widens the capture
    # range for objects that do not overlap
    pyramid_sigma: float = 2.0

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        for name in ("grid_spacing_finest", "iters_per_level", "step0", "tol_rel"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lambda_bend < 0 or self.pyramid_sigma < 0:
            raise ValueError("lambda_bend and pyramid_sigma must be non-negative")


@dataclass
class LevelTrace:
    shape: tuple
    objectives: list = dc_field(default_factory=list)
    accepted: int = 0
    iterations: int = 0


def _as_gray(img) -> np.ndarray:
    if isinstance(img, ImageTensor):
        if img.channels != 1:
            raise DataError("registration expects grayscale images; convert upstream")
        return img.data[:, :, 0].astype(np.float64)
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[:, :, 0]
    if a.ndim != 2:
        raise DataError("registration expects grayscale images; convert upstream")
    return a


class _Problem:
    """Objective evaluation for one image pair at one resolution."""

    def __init__(self, fixed, moving, spacing, ny, nx, lambda_bend):
        if fixed.shape != moving.shape:
            raise DataError(f"size mismatch {fixed.shape} vs {moving.shape}")
        self.fixed = np.ascontiguousarray(fixed, dtype=np.float64)
        self.moving = np.ascontiguousarray(moving, dtype=np.float64)
        h, w = fixed.shape
        grid = ControlGrid(spacing, np.zeros((ny, nx, 2)))
        self.wy, self.wx = grid.matrices(h, w)
        self.yy, self.xx = np.mgrid[0:h, 0:w].astype(np.float64)
        self.lambda_bend = lambda_bend
        self.n = fixed.size

    def __call__(self, c):
        wy, wx = self.wy, self.wx
        ux = wy @ c[:, :, 0] @ wx.T
        uy = wy @ c[:, :, 1] @ wx.T
        val, gx, gy = _kernels.bilinear_sample_grad(self.moving, self.xx + ux, self.yy + uy)
        r = self.fixed - val
        e = float(np.dot(r.ravel(), r.ravel())) / self.n
        k = -2.0 / self.n * r
        dux = k * gx
        duy = k * gy
        if self.lambda_bend:
            be, bx, by = _kernels.bending_energy(ux, uy)
            e += self.lambda_bend * be
            dux += self.lambda_bend * bx
            duy += self.lambda_bend * by
        grad = np.stack([wy.T @ dux @ wx, wy.T @ duy @ wx], axis=-1)
        return e, grad


def objective(fixed, moving, grid: ControlGrid, lambda_bend: float = 0.1):
    """Registration energy and its gradient with respect to ``grid.displacements``."""
    f = _as_gray(fixed)
    m = _as_gray(moving)
    prob = _Problem(f, m, grid.spacing, grid.ny, grid.nx, lambda_bend)
    return prob(grid.displacements)


def level_sigma(shape, factor: int, pyramid_sigma: float) -> float:
    """Blur for a pyramid level, in level pixels; zero at full resolution."""
    if factor == 1:
        return 0.0
    short = min(-(-shape[0] // factor), -(-shape[1] // factor))
    return min(pyramid_sigma * factor, short / 8.0)


def downsample(img: np.ndarray, factor: int, sigma: float = 0.0) -> np.ndarray:
    """Block-average by ``factor`` (edge-padded), then blur by ``sigma`` level pixels."""
    if factor == 1:
        return img
    h, w = img.shape
    hp = -(-h // factor) * factor
    wp = -(-w // factor) * factor
    a = np.pad(img, ((0, hp - h), (0, wp - w)), mode="edge")
    out = a.reshape(hp // factor, factor, wp // factor, factor).mean(axis=(1, 3))
    if sigma > 0:
        out = ndimage.gaussian_filter(out, sigma, mode="nearest")
    return out


def refine_grid(grid: ControlGrid, coarse_shape, fine_shape, ratio: int = 2) -> ControlGrid:
    """Carry a coarse-level grid to the next finer level.

    The coarse field is evaluated at the fine pixel centres (scaled to
    fine-pixel units) and the fine grid, same spacing in its own pixels,
    is fitted to it by separable least squares. Nested dyadic spline spaces
    make this exact away from the image border.
    """
    hc, wc = coarse_shape
    hf, wf = fine_shape
    off = (ratio - 1) / 2.0
    yc = np.clip((np.arange(hf) - off) / ratio, 0.0, hc - 1.0)
    xc = np.clip((np.arange(wf) - off) / ratio, 0.0, wc - 1.0)
    wyc = basis_matrix(yc, grid.spacing, grid.ny)
    wxc = basis_matrix(xc, grid.spacing, grid.nx)
    fine = ControlGrid.zeros(hf, wf, grid.spacing)
    wyf, wxf = fine.matrices(hf, wf)
    py = np.linalg.pinv(wyf)
    px = np.linalg.pinv(wxf)
    c = grid.displacements
    disp = np.empty_like(fine.displacements)
    for k in range(2):
        u = ratio * (wyc @ c[:, :, k] @ wxc.T)
        disp[:, :, k] = py @ u @ px.T
    return ControlGrid(grid.spacing, disp)


def _descend(prob: _Problem, c0: np.ndarray, cfg: RegistrationConfig, trace: LevelTrace):
    """Gradient descent with hyperbolic step decay and rejection of uphill steps.

    The step is measured in pixels: the control point with the largest
    gradient component moves by ``step0 / (1 + k / 50)`` times the current
    gain. A rejected step halves the gain; an accepted one lets it recover.
    """
    c = c0.copy()
    e, g = prob(c)
    trace.objectives.append(e)
    gain = 1.0
    for k in range(cfg.iters_per_level):
        gmax = float(np.abs(g).max())
        if gmax == 0.0:
            break
        step = cfg.step0 / (1.0 + k / 50.0) * gain
        cand = c - (step / gmax) * g
        e_new, g_new = prob(cand)
        trace.iterations += 1
        if e_new <= e:
            c, e, g = cand, e_new, g_new
            gain = min(1.0, gain * 1.5)
            trace.accepted += 1
        else:
            gain *= 0.5
        trace.objectives.append(e)
        if k >= 10:
            before = trace.objectives[-11]
            if before <= 0.0 or (before - e) / before < cfg.tol_rel:
                break
    return c


def register_detailed(moving, fixed, cfg: RegistrationConfig | None = None):
    """Like :func:`register` but also returns one :class:`LevelTrace` per level."""
    cfg = cfg or RegistrationConfig()
    m_full = _as_gray(moving)
    f_full = _as_gray(fixed)
    if m_full.shape != f_full.shape:
        raise DataError(f"size mismatch {m_full.shape} vs {f_full.shape}")
    h, w = f_full.shape
    grid = None
    prev_shape = None
    traces = []
    for level in range(cfg.levels):
        factor = 2 ** (cfg.levels - 1 - level)
        sigma = level_sigma(f_full.shape, factor, cfg.pyramid_sigma)
        f_l = downsample(f_full, factor, sigma)
        m_l = downsample(m_full, factor, sigma)
        if grid is None:
            grid = ControlGrid.zeros(*f_l.shape, cfg.grid_spacing_finest)
        else:
            grid = refine_grid(grid, prev_shape, f_l.shape)
        prob = _Problem(f_l, m_l, grid.spacing, grid.ny, grid.nx, cfg.lambda_bend)
        trace = LevelTrace(f_l.shape)
        grid = ControlGrid(grid.spacing, _descend(prob, grid.displacements, cfg, trace))
        traces.append(trace)
        prev_shape = f_l.shape
        log.debug("level %d %s: E %.6g -> %.6g in %d iters", level, f_l.shape,
                  trace.objectives[0], trace.objectives[-1], trace.iterations)
    return bspline_field(grid, h, w), traces


def register(moving, fixed, cfg: RegistrationConfig | None = None) -> DeformationField:
    """Deformation field on the fixed grid that pulls ``moving`` onto ``fixed``."""
    return register_detailed(moving, fixed, cfg)[0]

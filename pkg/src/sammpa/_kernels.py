"""Hot inner loops, each in two flavours.

Every kernel exists as a numba ``njit`` loop and as a vectorised numpy
function with identical semantics. The module-level names dispatch to one
of them, chosen once at import time:

* ``SAMMPA_DISABLE_NUMBA=1`` forces the numpy path;
* otherwise numba is used when it imports cleanly.

Both namespaces stay importable as :data:`numba_impl` and
:data:`numpy_impl` so tests and the benchmark can compare them directly.
"""
import os
from types import SimpleNamespace

import numpy as np

try:
    import numba
    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and os.environ.get("SAMMPA_DISABLE_NUMBA", "0") not in ("1", "true", "yes")


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------

def _cell(coord, n):
    """Clamp sample coordinates to [0, n-1] and split into cell index + frac."""
    c = np.clip(coord, 0.0, n - 1.0)
    i0 = np.minimum(np.floor(c), max(n - 2, 0)).astype(np.intp)
    frac = c - i0
    i1 = np.minimum(i0 + 1, n - 1)
    inside = (coord >= 0.0) & (coord <= n - 1.0)
    return i0, i1, frac, inside


def bilinear_sample_np(img, px, py):
    h, w = img.shape
    x0, x1, fx, _ = _cell(px, w)
    y0, y1, fy, _ = _cell(py, h)
    return (img[y0, x0] * (1.0 - fx) * (1.0 - fy)
            + img[y0, x1] * fx * (1.0 - fy)
            + img[y1, x0] * (1.0 - fx) * fy
            + img[y1, x1] * fx * fy)


def bilinear_sample_grad_np(img, px, py):
    h, w = img.shape
    x0, x1, fx, inx = _cell(px, w)
    y0, y1, fy, iny = _cell(py, h)
    a = img[y0, x0]
    b = img[y0, x1]
    c = img[y1, x0]
    d = img[y1, x1]
    val = a * (1.0 - fx) * (1.0 - fy) + b * fx * (1.0 - fy) + c * (1.0 - fx) * fy + d * fx * fy
    # clamped regions are flat, so the positional derivative vanishes there
    gx = ((b - a) * (1.0 - fy) + (d - c) * fy) * inx
    gy = ((c - a) * (1.0 - fx) + (d - b) * fx) * iny
    if w == 1:
        gx = np.zeros_like(val)
    if h == 1:
        gy = np.zeros_like(val)
    return val, gx, gy


def bending_energy_np(ux, uy):
    """Discrete bending energy of a 2-component field and its gradient.

    ``BE = (1/N) * sum_c [ sum u_xx^2 + 2 sum u_xy^2 + sum u_yy^2 ]`` over
    every stencil that fits inside the grid.
    """
    n = ux.size
    total = 0.0
    grads = []
    for u in (ux, uy):
        g = np.zeros_like(u)
        if u.shape[1] >= 3:
            dxx = u[:, 2:] - 2.0 * u[:, 1:-1] + u[:, :-2]
            total += np.sum(dxx * dxx)
            t = 2.0 * dxx
            g[:, 2:] += t
            g[:, 1:-1] -= 2.0 * t
            g[:, :-2] += t
        if u.shape[0] >= 3:
            dyy = u[2:, :] - 2.0 * u[1:-1, :] + u[:-2, :]
            total += np.sum(dyy * dyy)
            t = 2.0 * dyy
            g[2:, :] += t
            g[1:-1, :] -= 2.0 * t
            g[:-2, :] += t
        if u.shape[0] >= 2 and u.shape[1] >= 2:
            dxy = u[1:, 1:] - u[1:, :-1] - u[:-1, 1:] + u[:-1, :-1]
            total += 2.0 * np.sum(dxy * dxy)
            t = 4.0 * dxy
            g[1:, 1:] += t
            g[1:, :-1] -= t
            g[:-1, 1:] -= t
            g[:-1, :-1] += t
        grads.append(g / n)
    return total / n, grads[0], grads[1]


def region_grow_np(img, seed_y, seed_x, tol):
    from scipy import ndimage

    ok = np.abs(img - img[seed_y, seed_x]) <= tol
    labels, _ = ndimage.label(ok)
    lab = labels[seed_y, seed_x]
    return labels == lab


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAS_NUMBA:

    @numba.njit(cache=True, nogil=True, inline="always")
    def _cell_nb(c, n):
        inside = 0.0 <= c <= n - 1.0
        if c < 0.0:
            c = 0.0
        elif c > n - 1.0:
            c = n - 1.0
        i0 = int(np.floor(c))
        if i0 > n - 2:
            i0 = max(n - 2, 0)
        i1 = min(i0 + 1, n - 1)
        return i0, i1, c - i0, inside

    @numba.njit(cache=True, nogil=True)
    def bilinear_sample_nb(img, px, py):
        h, w = img.shape
        out = np.empty(px.shape, dtype=img.dtype)
        fpx = px.ravel()
        fpy = py.ravel()
        fo = out.ravel()
        for k in range(fpx.size):
            x0, x1, fx, _ = _cell_nb(fpx[k], w)
            y0, y1, fy, _ = _cell_nb(fpy[k], h)
            fo[k] = (img[y0, x0] * (1.0 - fx) * (1.0 - fy)
                     + img[y0, x1] * fx * (1.0 - fy)
                     + img[y1, x0] * (1.0 - fx) * fy
                     + img[y1, x1] * fx * fy)
        return out

    @numba.njit(cache=True, nogil=True)
    def bilinear_sample_grad_nb(img, px, py):
        h, w = img.shape
        val = np.empty(px.shape, dtype=img.dtype)
        gx = np.empty(px.shape, dtype=img.dtype)
        gy = np.empty(px.shape, dtype=img.dtype)
        fpx = px.ravel()
        fpy = py.ravel()
        fv = val.ravel()
        fgx = gx.ravel()
        fgy = gy.ravel()
        for k in range(fpx.size):
            x0, x1, fx, inx = _cell_nb(fpx[k], w)
            y0, y1, fy, iny = _cell_nb(fpy[k], h)
            a = img[y0, x0]
            b = img[y0, x1]
            c = img[y1, x0]
            d = img[y1, x1]
            fv[k] = a * (1.0 - fx) * (1.0 - fy) + b * fx * (1.0 - fy) + c * (1.0 - fx) * fy + d * fx * fy
            fgx[k] = ((b - a) * (1.0 - fy) + (d - c) * fy) if (inx and w > 1) else 0.0
            fgy[k] = ((c - a) * (1.0 - fx) + (d - b) * fx) if (iny and h > 1) else 0.0
        return val, gx, gy

    @numba.njit(cache=True, nogil=True)
    def _bending_one_nb(u, g):
        h, w = u.shape
        total = 0.0
        for y in range(h):
            for x in range(w):
                if x >= 1 and x + 1 < w:
                    d = u[y, x + 1] - 2.0 * u[y, x] + u[y, x - 1]
                    total += d * d
                    t = 2.0 * d
                    g[y, x + 1] += t
                    g[y, x] -= 2.0 * t
                    g[y, x - 1] += t
                if y >= 1 and y + 1 < h:
                    d = u[y + 1, x] - 2.0 * u[y, x] + u[y - 1, x]
                    total += d * d
                    t = 2.0 * d
                    g[y + 1, x] += t
                    g[y, x] -= 2.0 * t
                    g[y - 1, x] += t
                if x + 1 < w and y + 1 < h:
                    d = u[y + 1, x + 1] - u[y + 1, x] - u[y, x + 1] + u[y, x]
                    total += 2.0 * d * d
                    t = 4.0 * d
                    g[y + 1, x + 1] += t
                    g[y + 1, x] -= t
                    g[y, x + 1] -= t
                    g[y, x] += t
        return total

    @numba.njit(cache=True, nogil=True)
    def bending_energy_nb(ux, uy):
        n = ux.size
        gx = np.zeros_like(ux)
        gy = np.zeros_like(uy)
        total = _bending_one_nb(ux, gx) + _bending_one_nb(uy, gy)
        return total / n, gx / n, gy / n

    @numba.njit(cache=True, nogil=True)
    def region_grow_nb(img, seed_y, seed_x, tol):
        h, w = img.shape
        out = np.zeros((h, w), dtype=np.bool_)
        ref = img[seed_y, seed_x]
        stack_y = np.empty(h * w, dtype=np.int64)
        stack_x = np.empty(h * w, dtype=np.int64)
        top = 0
        stack_y[0] = seed_y
        stack_x[0] = seed_x
        top = 1
        out[seed_y, seed_x] = True
        while top > 0:
            top -= 1
            y = stack_y[top]
            x = stack_x[top]
            for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                ny = y + dy
                nx = x + dx
                if 0 <= ny < h and 0 <= nx < w and not out[ny, nx]:
                    if abs(img[ny, nx] - ref) <= tol:
                        out[ny, nx] = True
                        stack_y[top] = ny
                        stack_x[top] = nx
                        top += 1
        return out


numpy_impl = SimpleNamespace(
    bilinear_sample=bilinear_sample_np,
    bilinear_sample_grad=bilinear_sample_grad_np,
    bending_energy=bending_energy_np,
    region_grow=region_grow_np,
)

if HAS_NUMBA:
    numba_impl = SimpleNamespace(
        bilinear_sample=bilinear_sample_nb,
        bilinear_sample_grad=bilinear_sample_grad_nb,
        bending_energy=bending_energy_nb,
        region_grow=region_grow_nb,
    )
else:  # pragma: no cover
    numba_impl = None

_active = numba_impl if USE_NUMBA else numpy_impl

bilinear_sample = _active.bilinear_sample
bilinear_sample_grad = _active.bilinear_sample_grad
bending_energy = _active.bending_energy
region_grow = _active.region_grow

BACKEND = "numba" if USE_NUMBA else "numpy"

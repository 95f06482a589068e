"""
Point spread function models.

Three parametric shapes (wide-field 2D, astigmatic and double helix) plus an
optional non-parametric 3D pixel map that is added on top of the parametric
part. All coordinates are in nanometers. Intensities are unnormalized: the
astigmatic PSF is exactly 1 at its center for every z.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import ClassVar, Union

import numpy as np


@dataclass(frozen=True)
class Psf2DParams:
    """Two circular Gaussians whose width grows with ``|z|``."""

    a1: float
    a2: float
    b1: float
    b2: float

    kind: ClassVar[str] = "2d"
    names: ClassVar[tuple[str, ...]] = ("a1", "a2", "b1", "b2")

    def __post_init__(self):
        if not (self.b1 > 0 and self.b2 > 0):
            raise ValueError("b1 and b2 must be positive")
        if not self.a1 + self.a2 > 0:
            raise ValueError("a1 + a2 must be positive")


@dataclass(frozen=True)
class PsfAsParams:
    """Elliptical Gaussian with independent focal offsets along x and y."""

    a: float
    b_x: float
    b_y: float
    c: float

    kind: ClassVar[str] = "as"
    names: ClassVar[tuple[str, ...]] = ("a", "b_x", "b_y", "c")

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError("a must be positive")
        if not self.c > 0:
            raise ValueError("c must be positive")

    @classmethod
    def from_widths(cls, sigma0, depth, b_x=-200.0, b_y=200.0):
        """Build from the in-focus Gaussian sigma and the axial depth (nm).

        The lateral sigma along x is ``sigma0 * sqrt(1 + ((z - b_x) / depth)**2)``.
        """
        c = depth**2
        return cls(a=c / (2.0 * sigma0**2), b_x=b_x, b_y=b_y, c=c)


@dataclass(frozen=True)
class PsfDhParams:
    """Two Gaussian lobes rotating around the emitter as a function of z."""

    a: float
    b: float
    c: float
    d: float

    kind: ClassVar[str] = "dh"
    names: ClassVar[tuple[str, ...]] = ("a", "b", "c", "d")

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError("a must be positive")
        if not self.d > 0:
            raise ValueError("d must be positive")


ParametricParams = Union[Psf2DParams, PsfAsParams, PsfDhParams]
PARAM_TYPES = {t.kind: t for t in (Psf2DParams, PsfAsParams, PsfDhParams)}


def params_to_vector(params):
    return np.array([getattr(params, n) for n in params.names], dtype=float)


def params_from_vector(kind, vec):
    cls = PARAM_TYPES[kind]
    return cls(**{n: float(v) for n, v in zip(cls.names, vec)})


@dataclass(frozen=True, eq=False)
class PixelMap3D:
    """Trilinearly interpolated correction volume.

    ``values`` has shape ``(nz, ny, nx)``. Node ``(k, j, i)`` sits at
    ``origin + ((i - (nx-1)/2) * pixel_size_xy, (j - (ny-1)/2) * pixel_size_xy,
    (k - (nz-1)/2) * z_spacing)``.
    """

    values: np.ndarray
    pixel_size_xy: float = 100.0
    z_spacing: float = 100.0
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 3 or min(values.shape) < 2:
            raise ValueError("pixel map needs at least 2 nodes per axis")
        if not (self.z_spacing > 0 and self.pixel_size_xy > 0):
            raise ValueError("grid spacings must be positive")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @classmethod
    def zeros(cls, nx=26, ny=26, z_range=1500.0, pixel_size_xy=100.0, z_spacing=100.0):
        nz = int(round(2 * z_range / z_spacing)) + 1
        return cls(np.zeros((nz, ny, nx)), pixel_size_xy, z_spacing)

    @property
    def shape(self):
        return self.values.shape

    def node_coordinates(self):
        """Return the (x, y, z) node positions along each axis in nm."""
        nz, ny, nx = self.shape
        ox, oy, oz = self.origin
        xs = ox + (np.arange(nx) - (nx - 1) / 2) * self.pixel_size_xy
        ys = oy + (np.arange(ny) - (ny - 1) / 2) * self.pixel_size_xy
        zs = oz + (np.arange(nz) - (nz - 1) / 2) * self.z_spacing
        return xs, ys, zs

    def with_values(self, values):
        return replace(self, values=np.asarray(values, dtype=float).reshape(self.shape))


@dataclass(frozen=True)
class PsfModel:
    parametric: ParametricParams
    pixmap: PixelMap3D | None = None

    @property
    def kind(self):
        return self.parametric.kind

    def __call__(self, dx, dy, dz):
        return eval_psf(self, dx, dy, dz)


@dataclass(frozen=True)
class PixelGrid:
    """Camera pixel grid. Pixel ``(row, col)`` is centered at
    ``(x0 + (col + 0.5) * pixel_size, y0 + (row + 0.5) * pixel_size)``."""

    height: int
    width: int
    pixel_size: float = 100.0
    x0: float = 0.0
    y0: float = 0.0
    oversample: int = 1

    def __post_init__(self):
        if not self.pixel_size > 0:
            raise ValueError("pixel size must be positive")
        if self.oversample < 1:
            raise ValueError("oversample must be >= 1")

    @property
    def shape(self):
        return (self.height, self.width)

    def centers(self):
        """Pixel-center coordinates as two ``(height, width)`` arrays (x, y)."""
        xs = self.x0 + (np.arange(self.width) + 0.5) * self.pixel_size
        ys = self.y0 + (np.arange(self.height) + 0.5) * self.pixel_size
        return np.meshgrid(xs, ys)

    def subgrid(self, row0, col0, height, width):
        return replace(
            self,
            height=height,
            width=width,
            x0=self.x0 + col0 * self.pixel_size,
            y0=self.y0 + row0 * self.pixel_size,
        )


# --------------------------------------------------------------------------
# Parametric components


def _parametric_value(params, dx, dy, dz):
    if isinstance(params, PsfAsParams):
        qx = (dz - params.b_x) ** 2 + params.c
        qy = (dz - params.b_y) ** 2 + params.c
        return np.exp(-params.a * dx**2 / qx - params.a * dy**2 / qy)
    if isinstance(params, PsfDhParams):
        phi = params.b * dz + params.c
        sx = params.d * np.cos(phi)
        sy = params.d * np.sin(phi)
        r1 = (dx - sx) ** 2 + (dy - sy) ** 2
        r2 = (dx + sx) ** 2 + (dy + sy) ** 2
        return np.exp(-params.a * r1) + np.exp(-params.a * r2)
    if isinstance(params, Psf2DParams):
        r2 = dx**2 + dy**2
        den = (1.0 + np.abs(dz)) ** 2
        return params.a1 * np.exp(-params.b1 * r2 / den) + params.a2 * np.exp(-params.b2 * r2 / den)
    raise TypeError(f"unknown PSF parameter type {type(params).__name__}")


def eval_parametric(model, dx, dy, dz):
    """Closed-form parametric PSF at offsets ``(dx, dy, dz)`` (broadcasts).

    Both quadratic forms in the double-helix lobes are negative definite.
    """
    params = model.parametric if isinstance(model, PsfModel) else model
    dx, dy, dz = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (dx, dy, dz)))
    return _parametric_value(params, dx, dy, dz)


def parametric_grad(params, dx, dy, dz):
    """Value and partial derivatives of the parametric PSF.

    Returns
    -------
    value : ndarray
    d_offset : ndarray, shape ``(3,) + value.shape``
        Derivatives with respect to ``dx``, ``dy`` and ``dz``.
    d_params : ndarray, shape ``(4,) + value.shape``
        Derivatives with respect to the shape parameters, in ``params.names`` order.
    """
    dx, dy, dz = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (dx, dy, dz)))
    if isinstance(params, PsfAsParams):
        a, c = params.a, params.c
        ux, uy = dz - params.b_x, dz - params.b_y
        qx, qy = ux**2 + c, uy**2 + c
        f = np.exp(-a * dx**2 / qx - a * dy**2 / qy)
        tx, ty = a * dx**2 / qx**2, a * dy**2 / qy**2
        d_off = np.stack([
            f * (-2 * a * dx / qx),
            f * (-2 * a * dy / qy),
            f * (2 * ux * tx + 2 * uy * ty),
        ])
        d_par = np.stack([
            f * (-dx**2 / qx - dy**2 / qy),
            f * (-2 * ux * tx),
            f * (-2 * uy * ty),
            f * (tx + ty),
        ])
        return f, d_off, d_par
    if isinstance(params, PsfDhParams):
        a, d = params.a, params.d
        phi = params.b * dz + params.c
        cos, sin = np.cos(phi), np.sin(phi)
        sx, sy = d * cos, d * sin
        ex1, ey1, ex2, ey2 = dx - sx, dy - sy, dx + sx, dy + sy
        r1, r2 = ex1**2 + ey1**2, ex2**2 + ey2**2
        g1, g2 = np.exp(-a * r1), np.exp(-a * r2)
        f = g1 + g2
        df_dsx = 2 * a * (g1 * ex1 - g2 * ex2)
        df_dsy = 2 * a * (g1 * ey1 - g2 * ey2)
        # chain rule through the lobe positions
        d_phi = -df_dsx * d * sin + df_dsy * d * cos
        d_off = np.stack([
            -2 * a * (g1 * ex1 + g2 * ex2),
            -2 * a * (g1 * ey1 + g2 * ey2),
            d_phi * params.b,
        ])
        d_par = np.stack([
            -(g1 * r1 + g2 * r2),
            d_phi * dz,
            d_phi,
            df_dsx * cos + df_dsy * sin,
        ])
        return f, d_off, d_par
    if isinstance(params, Psf2DParams):
        r2 = dx**2 + dy**2
        s = 1.0 + np.abs(dz)
        den = s**2
        e1 = np.exp(-params.b1 * r2 / den)
        e2 = np.exp(-params.b2 * r2 / den)
        w1, w2 = params.a1 * e1, params.a2 * e2
        f = w1 + w2
        k = w1 * params.b1 + w2 * params.b2
        d_off = np.stack([
            -2 * k * dx / den,
            -2 * k * dy / den,
            2 * k * r2 * np.sign(dz) / s**3,
        ])
        d_par = np.stack([e1, e2, -w1 * r2 / den, -w2 * r2 / den])
        return f, d_off, d_par
    raise TypeError(f"unknown PSF parameter type {type(params).__name__}")


# --------------------------------------------------------------------------
# Pixel map


def _fractional_index(pixmap, dx, dy, dz):
    nz, ny, nx = pixmap.shape
    ox, oy, oz = pixmap.origin
    fx = (dx - ox) / pixmap.pixel_size_xy + (nx - 1) / 2
    fy = (dy - oy) / pixmap.pixel_size_xy + (ny - 1) / 2
    fz = (dz - oz) / pixmap.z_spacing + (nz - 1) / 2
    return fx, fy, fz


def trilinear_weights(pixmap, dx, dy, dz):
    """Corner indices and weights of the trilinear interpolation.

    Returns ``(flat_index, weights, d_weights, inside)`` where ``flat_index``
    and ``weights`` have a trailing axis of 8 corners, ``d_weights`` has a
    leading axis of 3 (derivatives with respect to dx, dy, dz in nm) and
    ``inside`` marks queries within the grid support. Weights are zero outside.
    """
    dx, dy, dz = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (dx, dy, dz)))
    nz, ny, nx = pixmap.shape
    fx, fy, fz = _fractional_index(pixmap, dx, dy, dz)
    inside = (fx >= 0) & (fx <= nx - 1) & (fy >= 0) & (fy <= ny - 1) & (fz >= 0) & (fz <= nz - 1)
    ix = np.clip(np.floor(np.where(inside, fx, 0)), 0, nx - 2).astype(np.intp)
    iy = np.clip(np.floor(np.where(inside, fy, 0)), 0, ny - 2).astype(np.intp)
    iz = np.clip(np.floor(np.where(inside, fz, 0)), 0, nz - 2).astype(np.intp)
    tx = np.where(inside, fx - ix, 0.0)
    ty = np.where(inside, fy - iy, 0.0)
    tz = np.where(inside, fz - iz, 0.0)
    mask = inside.astype(float)

    index, weight, dwx, dwy, dwz = [], [], [], [], []
    for cz in (0, 1):
        wz = tz if cz else 1 - tz
        gz = 1.0 if cz else -1.0
        for cy in (0, 1):
            wy = ty if cy else 1 - ty
            gy = 1.0 if cy else -1.0
            for cx in (0, 1):
                wx = tx if cx else 1 - tx
                gx = 1.0 if cx else -1.0
                index.append(((iz + cz) * ny + (iy + cy)) * nx + (ix + cx))
                weight.append(wx * wy * wz * mask)
                dwx.append(gx * wy * wz * mask / pixmap.pixel_size_xy)
                dwy.append(wx * gy * wz * mask / pixmap.pixel_size_xy)
                dwz.append(wx * wy * gz * mask / pixmap.z_spacing)
    d_weights = np.stack([np.stack(dwx, -1), np.stack(dwy, -1), np.stack(dwz, -1)])
    return np.stack(index, -1), np.stack(weight, -1), d_weights, inside


def eval_pixmap(pixmap, dx, dy, dz):
    """Trilinear interpolation of the pixel map; 0 outside its support."""
    index, weight, _, _ = trilinear_weights(pixmap, dx, dy, dz)
    return np.sum(pixmap.values.ravel()[index] * weight, axis=-1)


def eval_psf(model, dx, dy, dz):
    """Parametric PSF plus pixel map, clamped at 0 from below."""
    value = eval_parametric(model, dx, dy, dz)
    if model.pixmap is not None:
        value = value + eval_pixmap(model.pixmap, dx, dy, dz)
    return np.maximum(value, 0.0)


def psf_grad(model, dx, dy, dz):
    """Value of :func:`eval_psf` with derivatives.

    Returns ``(value, d_offset, d_params, pixmap_terms)``. ``pixmap_terms`` is
    ``None`` without a pixel map, otherwise ``(flat_index, weights)`` giving
    the derivative with respect to each pixel-map node. All derivatives are
    zeroed where the clamp at 0 is active.
    """
    value, d_off, d_par = parametric_grad(model.parametric, dx, dy, dz)
    pix_terms = None
    if model.pixmap is not None:
        index, weight, d_w, _ = trilinear_weights(model.pixmap, dx, dy, dz)
        node = model.pixmap.values.ravel()[index]
        value = value + np.sum(node * weight, axis=-1)
        d_off = d_off + np.sum(node * d_w, axis=-1)
        pix_terms = (index, weight)
    active = value > 0
    value = np.where(active, value, 0.0)
    d_off = d_off * active
    d_par = d_par * active
    if pix_terms is not None:
        pix_terms = (pix_terms[0], pix_terms[1] * active[..., None])
    return value, d_off, d_par, pix_terms


def render_patch(model, x, y, z, photons, grid):
    """Expected image of one emitter at ``(x, y, z)`` nm on ``grid``.

    The PSF is sampled at pixel centers; with ``grid.oversample = k`` each
    pixel is split into ``k x k`` sub-pixels whose samples are averaged.
    """
    if photons < 0:
        raise ValueError("photons must be non-negative")
    k = grid.oversample
    cx, cy = grid.centers()
    if k == 1:
        return photons * eval_psf(model, cx - x, cy - y, -z)
    sub = ((np.arange(k) + 0.5) / k - 0.5) * grid.pixel_size
    ox, oy = np.meshgrid(sub, sub)
    vals = eval_psf(
        model,
        cx[..., None, None] + ox - x,
        cy[..., None, None] + oy - y,
        -z,
    )
    return photons * vals.mean(axis=(-2, -1))

"""
Super-resolution rendering of localization tables.

Each localization is splatted as a unit-mass Gaussian whose per-pixel weight
is the exact integral over the pixel (products of normal CDF differences),
truncated at 4 sigma per axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

TRUNCATION = 4.0


@dataclass(frozen=True)
class RenderSpec:
    pixel_size: float = 10.0
    sigma: float | None = 5.0  # None: use per-row sig_x / sig_y (/ sig_z)
    voxel_size: tuple[float, float, float] = (10.0, 10.0, 20.0)
    clip: float = 2.5
    percentile: float = 99.5
    bounds: tuple[float, float, float, float] | None = None  # x0, x1, y0, y1 nm
    z_bounds: tuple[float, float] | None = None

    def __post_init__(self):
        if not self.pixel_size > 0 or min(self.voxel_size) <= 0:
            raise ValueError("pixel and voxel sizes must be positive")
        if self.sigma is not None and not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not 0 < self.percentile <= 100:
            raise ValueError("percentile must lie in (0, 100]")


def _bounds(values, explicit, pad):
    if explicit is not None:
        return float(explicit[0]), float(explicit[1])
    if len(values) == 0:
        return 0.0, 1.0
    return float(np.min(values) - pad), float(np.max(values) + pad)


def _axis_weights(mu, sigma, lo, step, n_bins):
    """Per-row pixel masses along one axis over a fixed-width window.

    Returns ``(idx, weights)``: ``(n_rows, width)`` bin indices and the
    matching masses (zero where the bin falls outside the grid).
    """
    half = int(np.ceil(TRUNCATION * np.max(sigma) / step)) + 1
    width = 2 * half + 1
    center = np.floor((mu - lo) / step).astype(int)
    start = center - half
    idx = start[:, None] + np.arange(width)[None, :]
    left = lo + idx * step
    a = np.clip(left, mu[:, None] - TRUNCATION * sigma[:, None], mu[:, None] + TRUNCATION * sigma[:, None])
    b = np.clip(left + step, mu[:, None] - TRUNCATION * sigma[:, None], mu[:, None] + TRUNCATION * sigma[:, None])
    w = ndtr((b - mu[:, None]) / sigma[:, None]) - ndtr((a - mu[:, None]) / sigma[:, None])
    w[(idx < 0) | (idx >= n_bins)] = 0.0
    return idx, w


def _row_sigmas(table, spec, names):
    if spec.sigma is not None:
        return [np.full(len(table), float(spec.sigma)) for _ in names]
    missing = [n for n in names if n not in (table.dtype.names or ())]
    if missing:
        raise ValueError(f"per-row sigma rendering needs columns {missing}")
    return [np.asarray(table[n], dtype=float) for n in names]


def _usable(table, sigmas):
    """Rows whose sigmas are finite and positive (failed fits carry inf)."""
    ok = np.ones(len(table), dtype=bool)
    for s in sigmas:
        ok &= np.isfinite(s) & (s > 0)
    return table[ok], [s[ok] for s in sigmas]


def render_2d(table, spec=RenderSpec()):
    """2D histogram of Gaussian splats; returns ``(image, (x0, y0))``.

    Without explicit ``spec.bounds`` the image covers the data plus the
    splat support.
    """
    table, (sx, sy) = _usable(table, _row_sigmas(table, spec, ("sig_x", "sig_y")))
    pad = TRUNCATION * max(np.max(sx, initial=0), np.max(sy, initial=0)) + spec.pixel_size
    x0, x1 = _bounds(table["x"], spec.bounds[:2] if spec.bounds else None, pad)
    y0, y1 = _bounds(table["y"], spec.bounds[2:] if spec.bounds else None, pad)
    nx = max(int(np.ceil((x1 - x0) / spec.pixel_size)), 1)
    ny = max(int(np.ceil((y1 - y0) / spec.pixel_size)), 1)
    image = np.zeros((ny, nx))
    if len(table) == 0:
        return image, (x0, y0)
    ix, wx = _axis_weights(np.asarray(table["x"], float), sx, x0, spec.pixel_size, nx)
    iy, wy = _axis_weights(np.asarray(table["y"], float), sy, y0, spec.pixel_size, ny)
    w = wy[:, :, None] * wx[:, None, :]
    rows = np.broadcast_to(np.clip(iy, 0, ny - 1)[:, :, None], w.shape)
    cols = np.broadcast_to(np.clip(ix, 0, nx - 1)[:, None, :], w.shape)
    np.add.at(image, (rows.ravel(), cols.ravel()), w.ravel())
    return image, (x0, y0)


def render_3d(table, spec=RenderSpec(sigma=None)):
    """3D voxel histogram ``(nz, ny, nx)`` of anisotropic Gaussian splats.

    Uses per-row sigmas unless ``spec.sigma`` is set (then isotropic).
    Returns ``(volume, (x0, y0, z0))``.
    """
    vx, vy, vz = spec.voxel_size
    table, (sx, sy, sz) = _usable(table, _row_sigmas(table, spec, ("sig_x", "sig_y", "sig_z")))
    pad_xy = TRUNCATION * max(np.max(sx, initial=0), np.max(sy, initial=0)) + max(vx, vy)
    pad_z = TRUNCATION * np.max(sz, initial=0) + vz
    x0, x1 = _bounds(table["x"], spec.bounds[:2] if spec.bounds else None, pad_xy)
    y0, y1 = _bounds(table["y"], spec.bounds[2:] if spec.bounds else None, pad_xy)
    z0, z1 = _bounds(table["z"], spec.z_bounds, pad_z)
    nx = max(int(np.ceil((x1 - x0) / vx)), 1)
    ny = max(int(np.ceil((y1 - y0) / vy)), 1)
    nz = max(int(np.ceil((z1 - z0) / vz)), 1)
    volume = np.zeros((nz, ny, nx))
    if len(table) == 0:
        return volume, (x0, y0, z0)
    ix, wx = _axis_weights(np.asarray(table["x"], float), sx, x0, vx, nx)
    iy, wy = _axis_weights(np.asarray(table["y"], float), sy, y0, vy, ny)
    iz, wz = _axis_weights(np.asarray(table["z"], float), sz, z0, vz, nz)
    # one row at a time keeps memory bounded for large windows
    for r in range(len(table)):
        w = wz[r][:, None, None] * wy[r][None, :, None] * wx[r][None, None, :]
        if not w.any():
            continue
        zz = np.clip(iz[r], 0, nz - 1)
        yy = np.clip(iy[r], 0, ny - 1)
        xx = np.clip(ix[r], 0, nx - 1)
        np.add.at(volume, np.ix_(zz, yy, xx), w)
    return volume, (x0, y0, z0)


def max_project(volume, spec=RenderSpec(), normalize=True):
    """Clip voxels at ``spec.clip``, take the maximum over z and scale so the
    ``spec.percentile`` order statistic of the projection becomes 1 (values
    above are clamped to 1)."""
    volume = np.asarray(volume, dtype=float)
    if volume.ndim == 2:
        volume = volume[None]
    if volume.size == 0:
        raise ValueError("empty volume")
    image = np.minimum(volume, spec.clip).max(axis=0)
    if not normalize:
        return image
    top = np.percentile(image, spec.percentile, method="higher")
    if not top > 0:
        top = image.max()
    if not top > 0:
        return np.zeros_like(image)
    return np.minimum(image / top, 1.0)

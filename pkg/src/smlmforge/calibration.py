"""
PSF calibration from bead stacks.

A bead stack images isolated fluorophores while the stage steps through known
axial offsets ``z_k = z0 + k * dz``. Bead lateral positions are constant over
the stack. The fit maximizes the camera likelihood jointly over bead
positions, PSF shape parameters, per-(bead, frame) brightness, one scalar
background and optionally the pixel-map correction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, optimize

from .psf import (
    PixelGrid,
    PixelMap3D,
    PsfModel,
    params_from_vector,
    params_to_vector,
    psf_grad,
)
from .simulator import FrameStack, mean_frame

log = logging.getLogger(__name__)

# per-parameter variable scales for the optimizer
_XY_SCALE = 10.0
_PIXMAP_SCALE = 0.01
_OFFSET_SCALE = 100.0


@dataclass(frozen=True, eq=False)
class BeadStack:
    stack: FrameStack
    z0: float
    dz: float
    camera: object

    def __post_init__(self):
        if self.dz == 0:
            raise ValueError("dz must be non-zero")
        if self.stack.n_frames < 3:
            raise ValueError("a bead stack needs at least 3 frames")

    @property
    def z_offsets(self):
        return self.z0 + self.dz * np.arange(self.stack.n_frames)


@dataclass
class FitOptions:
    window: int = 13
    max_iter: int = 5000
    tol: float = 1e-8
    fit_pixmap: bool = False
    pixmap_reg: float = 1e-3
    free_params: tuple[str, ...] | None = None
    detect_threshold: float = 20.0


@dataclass
class BeadFitResult:
    bead_xy: np.ndarray  # (n_beads, 2) nm
    psf: PsfModel
    brightness: np.ndarray  # (n_beads, n_frames)
    background: float  # counts above baseline
    nll: float
    n_iter: int
    converged: bool
    trace: list = field(default_factory=list)
    residuals: np.ndarray | None = None  # (n_beads,) RMS of (data - model) per bead

    @property
    def params(self):
        return self.psf.parametric


def simulate_bead_stack(psf, bead_xy, z_offsets, brightness, camera, shape, pixel_size=100.0, seed=0):
    """Noisy bead stack with beads at fixed ``bead_xy`` and axial positions ``z_offsets``."""
    z_offsets = np.asarray(z_offsets, dtype=float)
    bead_xy = np.asarray(bead_xy, dtype=float).reshape(-1, 2)
    brightness = np.broadcast_to(np.asarray(brightness, dtype=float), (len(bead_xy), len(z_offsets)))
    grid = PixelGrid(shape[0], shape[1], pixel_size)
    rng = np.random.default_rng(seed)
    frames = []
    for k, z in enumerate(z_offsets):
        em = np.column_stack([bead_xy, np.full(len(bead_xy), z), brightness[:, k]])
        frames.append(camera.sample(mean_frame(em, psf, camera.expected_background(), grid), rng))
    dz = z_offsets[1] - z_offsets[0] if len(z_offsets) > 1 else 1.0
    return BeadStack(FrameStack(np.stack(frames), pixel_size), float(z_offsets[0]), float(dz), camera)


def detect_beads(bead_stack, threshold=20.0, window=7, separation=13):
    """Rough bead positions (nm) from the z-summed stack.

    The sum is smoothed (sigma 2 px) so that multi-lobe PSFs give a single
    peak; local maxima over ``separation x separation`` pixels above
    ``threshold`` robust noise units are refined by an intensity-weighted
    centroid of the raw sum over a ``window x window`` neighbourhood.
    """
    total = bead_stack.stack.frames.astype(float).sum(axis=0)
    total = total - np.median(total)
    smooth = ndimage.gaussian_filter(total, 2.0, mode="nearest")
    noise = 1.4826 * np.median(np.abs(smooth))
    if not noise > 0:
        noise = np.std(smooth) or 1.0
    peaks = (smooth == ndimage.maximum_filter(smooth, size=separation, mode="nearest")) & (smooth > threshold * noise)
    h = window // 2
    ps = bead_stack.stack.pixel_size
    out = []
    for r, c in zip(*np.nonzero(peaks)):
        if r < h or c < h or r >= total.shape[0] - h or c >= total.shape[1] - h:
            continue
        patch = np.clip(total[r - h:r + h + 1, c - h:c + h + 1], 0, None)
        rr, cc = np.mgrid[-h:h + 1, -h:h + 1]
        s = patch.sum()
        out.append(((c + 0.5 + (cc * patch).sum() / s) * ps, (r + 0.5 + (rr * patch).sum() / s) * ps))
    return out


def _windows(bead_stack, bead_xys, window):
    """Pixel slices and data cubes ``(n_frames, w, w)`` around each bead."""
    frames = bead_stack.stack.frames
    ps = bead_stack.stack.pixel_size
    h = window // 2
    out = []
    occupied = np.zeros(frames.shape[1:], dtype=bool)
    for x, y in bead_xys:
        r, c = int(np.floor(y / ps)), int(np.floor(x / ps))
        if r - h < 0 or c - h < 0 or r + h + 1 > frames.shape[1] or c + h + 1 > frames.shape[2]:
            raise ValueError(f"bead at ({x:.0f}, {y:.0f}) nm: fit window leaves the field")
        rows, cols = slice(r - h, r + h + 1), slice(c - h, c + h + 1)
        if occupied[rows, cols].any():
            raise ValueError("bead fit windows overlap")
        occupied[rows, cols] = True
        out.append((rows, cols, frames[:, rows, cols].astype(float)))
    return out


class _BeadProblem:
    """Objective and gradient over a flat parameter vector."""

    def __init__(self, bead_stack, bead_xys, init_psf, opts):
        self.bs = bead_stack
        self.cam = bead_stack.camera
        self.kind = init_psf.kind
        self.names = init_psf.parametric.names
        free = opts.free_params
        if free is None:
            # a1 is degenerate with the free per-frame brightness
            free = tuple(n for n in self.names if not (self.kind == "2d" and n == "a1"))
        self.free = np.array([n in free for n in self.names])
        self.shape0 = params_to_vector(init_psf.parametric)
        self.pixmap0 = init_psf.pixmap
        self.fit_pixmap = opts.fit_pixmap
        if self.fit_pixmap and self.pixmap0 is None:
            self.pixmap0 = PixelMap3D.zeros(pixel_size_xy=bead_stack.stack.pixel_size)
        self.reg = opts.pixmap_reg
        self.wins = _windows(bead_stack, bead_xys, opts.window)
        self.nb = len(bead_xys)
        self.nf = bead_stack.stack.n_frames
        self.z = bead_stack.z_offsets
        self.ps = bead_stack.stack.pixel_size
        self.n_pix = self.pixmap0.values.size if self.fit_pixmap else 0
        self.n_shape = int(self.free.sum())
        self.sizes = [2 * self.nb, self.n_shape, self.nb * self.nf, 1, self.n_pix]
        self.offsets = np.cumsum([0] + self.sizes)

    def pack(self, xy, shape, brightness, background, pixmap_values=None):
        parts = [np.ravel(xy), shape[self.free], np.ravel(brightness), [background]]
        if self.fit_pixmap:
            parts.append(np.ravel(pixmap_values))
        return np.concatenate([np.asarray(p, dtype=float) for p in parts])

    def unpack(self, theta):
        o = self.offsets
        xy = theta[o[0]:o[1]].reshape(self.nb, 2)
        shape = self.shape0.copy()
        shape[self.free] = theta[o[1]:o[2]]
        brightness = theta[o[2]:o[3]].reshape(self.nb, self.nf)
        background = theta[o[3]]
        pix = theta[o[4]:o[5]] if self.fit_pixmap else None
        return xy, shape, brightness, background, pix

    def model(self, shape, pix):
        params = params_from_vector(self.kind, shape)
        pixmap = self.pixmap0.with_values(pix) if self.fit_pixmap else self.pixmap0
        return PsfModel(params, pixmap)

    def scales(self, theta):
        xy, shape, brightness, background, _ = self.unpack(theta)
        s_shape = np.abs(shape[self.free])
        names = np.array(self.names)[self.free]
        for i, n in enumerate(names):
            if n in ("b_x", "b_y"):
                s_shape[i] = max(s_shape[i], _OFFSET_SCALE)
            elif n in ("b", "c") and self.kind == "dh":
                s_shape[i] = max(s_shape[i], 1e-3 if n == "b" else 0.1)
            s_shape[i] = s_shape[i] or 1.0
        parts = [
            np.full(2 * self.nb, _XY_SCALE),
            s_shape,
            np.maximum(np.abs(np.ravel(brightness)), 1.0),
            [max(abs(background), 1.0)],
            np.full(self.n_pix, _PIXMAP_SCALE),
        ]
        return np.concatenate([np.asarray(p, dtype=float) for p in parts])

    def __call__(self, theta, grad=True):
        xy, shape, brightness, background, pix = self.unpack(theta)
        try:
            psf = self.model(shape, pix)
        except ValueError:
            return (np.inf, np.zeros_like(theta)) if grad else np.inf
        g = np.zeros_like(theta)
        o = self.offsets
        nll = 0.0
        zz = -self.z[:, None, None]
        for b, (rows, cols, data) in enumerate(self.wins):
            cx = (np.arange(cols.start, cols.stop) + 0.5) * self.ps
            cy = (np.arange(rows.start, rows.stop) + 0.5) * self.ps
            dx = cx[None, None, :] - xy[b, 0]
            dy = cy[None, :, None] - xy[b, 1]
            f, d_off, d_par, pix_terms = psf_grad(psf, dx, dy, zz)
            alpha = brightness[b][:, None, None]
            mean = self.cam.baseline + background + alpha * f
            ll = self.cam.loglik(data, mean)
            if not np.all(np.isfinite(ll)):
                return (np.inf, g) if grad else np.inf
            nll -= ll.sum()
            if not grad:
                continue
            s = -self.cam.dloglik_dmean(data, mean)  # d nll / d mean
            sa = s * alpha
            g[o[0] + 2 * b] = -np.sum(sa * d_off[0])
            g[o[0] + 2 * b + 1] = -np.sum(sa * d_off[1])
            g[o[1]:o[2]] += np.sum(sa * d_par, axis=(1, 2, 3))[self.free]
            g[o[2] + b * self.nf:o[2] + (b + 1) * self.nf] = np.sum(s * f, axis=(1, 2))
            g[o[3]] += s.sum()
            if self.fit_pixmap:
                idx, w = pix_terms
                g[o[4]:o[5]] += np.bincount(
                    idx.ravel(), weights=(sa[..., None] * w).ravel(), minlength=self.n_pix)
        if self.fit_pixmap:
            nll += self.reg * np.sum(pix**2)
            g[o[4]:o[5]] += 2 * self.reg * pix
        return (nll, g) if grad else nll


def bead_negloglik(bead_stack, bead_xys, psf, brightness, background, window=13, grad=False):
    """Negative camera log-likelihood of a bead stack.

    Parameters
    ----------
    bead_xys : array_like, shape (n_beads, 2)
        Bead lateral positions in nm.
    psf : PsfModel
    brightness : array_like, shape (n_beads, n_frames)
    background : float
        Background in counts above the camera baseline.
    grad : bool
        Also return a dict of gradients with keys ``bead_xy``, ``shape``
        (all parametric parameters, in ``psf.parametric.names`` order),
        ``brightness``, ``background`` and ``pixmap`` (``None`` without one).

    Returns ``inf`` when some mean pixel is not inside the noise model's support.
    """
    opts = FitOptions(window=window, free_params=psf.parametric.names,
                      fit_pixmap=psf.pixmap is not None, pixmap_reg=0.0)
    prob = _BeadProblem(bead_stack, bead_xys, psf, opts)
    theta = prob.pack(bead_xys, prob.shape0, brightness, background,
                      psf.pixmap.values if psf.pixmap is not None else None)
    if not grad:
        return prob(theta, grad=False)
    nll, g = prob(theta)
    xy, shape, bright, bg, pix = prob.unpack(g)
    return nll, {
        "bead_xy": xy,
        "shape": shape,
        "brightness": bright,
        "background": bg,
        "pixmap": None if pix is None else pix.reshape(psf.pixmap.shape),
    }


def _initial_guess(prob):
    """Background from window borders, brightness from window peaks."""
    border = np.concatenate([
        np.concatenate([d[:, 0, :], d[:, -1, :], d[:, :, 0], d[:, :, -1]], axis=1).ravel()
        for _, _, d in prob.wins
    ])
    background = max(np.median(border) - prob.cam.baseline, 1e-3)
    brightness = np.array([
        np.maximum(d.max(axis=(1, 2)) - prob.cam.baseline - background, 1.0) for _, _, d in prob.wins
    ])
    return background, brightness


def fit_psf(bead_stack, init, opts=None, bead_xys=None):
    """Maximum-likelihood PSF calibration.

    Parameters
    ----------
    bead_stack : BeadStack
    init : PsfModel
        Starting shape parameters (and pixel map, if any).
    opts : FitOptions, optional
    bead_xys : array_like, optional
        Rough bead positions; found with :func:`detect_beads` when omitted.

    Uses L-BFGS-B on rescaled variables with box constraints that keep the
    brightness, background and positivity-constrained shape parameters
    valid; stops when the relative objective change drops below
    ``opts.tol`` or after ``opts.max_iter`` iterations.
    """
    opts = opts or FitOptions()
    if bead_xys is None:
        bead_xys = detect_beads(bead_stack, opts.detect_threshold)
    bead_xys = np.asarray(bead_xys, dtype=float).reshape(-1, 2)
    if len(bead_xys) == 0:
        raise ValueError("no beads found")
    prob = _BeadProblem(bead_stack, bead_xys, init, opts)
    background, brightness = _initial_guess(prob)
    pix0 = prob.pixmap0.values if prob.fit_pixmap else None
    theta0 = prob.pack(bead_xys, prob.shape0, brightness, background, pix0)
    scale = prob.scales(theta0)

    lower = np.full(theta0.size, -np.inf)
    o = prob.offsets
    positive = {"2d": ("b1", "b2"), "as": ("a", "c"), "dh": ("a", "d")}[prob.kind]
    names = np.array(prob.names)[prob.free]
    for i, n in enumerate(names):
        if n in positive:
            lower[o[1] + i] = 1e-12
    lower[o[2]:o[3]] = 0.0
    lower[o[3]] = 1e-6
    bounds = list(zip(lower / scale, [np.inf] * theta0.size))

    trace = []
    cache = {}

    def fun(u):
        val, g = prob(u * scale)
        cache["last"] = (u.copy(), val)
        return val, g * scale

    def callback(u):
        if "last" in cache and np.array_equal(cache["last"][0], u):
            trace.append(float(cache["last"][1]))
        else:
            trace.append(float(prob(u * scale, grad=False)))

    f0 = prob(theta0, grad=False)
    trace.append(float(f0))
    res = optimize.minimize(
        fun, theta0 / scale, jac=True, method="L-BFGS-B", bounds=bounds, callback=callback,
        options={"maxiter": opts.max_iter, "ftol": opts.tol, "gtol": 1e-12, "maxcor": 30},
    )
    theta = res.x * scale
    xy, shape, bright, bg, pix = prob.unpack(theta)
    psf = prob.model(shape, pix)
    if not res.success:
        log.warning("PSF fit did not converge: %s", res.message)

    residuals = []
    for b, (rows, cols, data) in enumerate(prob.wins):
        cx = (np.arange(cols.start, cols.stop) + 0.5) * prob.ps
        cy = (np.arange(rows.start, rows.stop) + 0.5) * prob.ps
        f = psf(cx[None, None, :] - xy[b, 0], cy[None, :, None] - xy[b, 1], -prob.z[:, None, None])
        model = prob.cam.baseline + bg + bright[b][:, None, None] * f
        residuals.append(float(np.sqrt(np.mean((data - model) ** 2))))

    return BeadFitResult(
        bead_xy=xy.copy(),
        psf=psf,
        brightness=bright.copy(),
        background=float(bg),
        nll=float(res.fun),
        n_iter=int(res.nit),
        converged=bool(res.success),
        trace=trace,
        residuals=np.array(residuals),
    )

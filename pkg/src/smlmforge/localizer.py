"""
Classical detect-then-fit localizer.

Candidates are local maxima of a smoothed, background-subtracted frame.
Each candidate's region of interest is fit by maximizing the camera
likelihood over ``(x, y, z, photons, background)`` with Levenberg-Marquardt
damped Fisher scoring. Uncertainties are the square roots of the diagonal of
the inverse observed Fisher information (the Hessian of the negative
log-likelihood, by central differences of the analytic gradient).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage, optimize, stats

from ._parallel import ordered_map
from .psf import psf_grad
from .table import empty_locs

PARAM_NAMES = ("x", "y", "z", "photons", "background")
_SCOUT_ITER = 6
_MAX_Z_STEP = 150.0  # nm per iteration


@dataclass(frozen=True)
class LocalizerConfig:
    threshold: float = 4.0  # in robust noise units of the smoothed frame
    smooth_sigma: float = 1.0  # pixels
    roi_size: int = 13
    z_range: float = 600.0  # z starts are spread over +-z_range
    n_z_starts: int = 3
    max_iter: int = 100
    dedup_radius: float = 0.5  # pixels; fits closer than this in one frame are merged
    min_llr: float = 25.0  # NLL gain over a background-only fit needed to keep a fit
    max_emitters: int = 3  # per ROI
    gof_pvalue: float | None = 1e-6  # reject fits whose deviance is this improbable; None disables


@dataclass(frozen=True)
class Candidate:
    frame: int
    row: int
    col: int
    intensity: float
    crowded: bool = False


@dataclass
class RoiFit:
    x: float
    y: float
    z: float
    photons: float
    background: float  # counts above baseline
    sig_x: float
    sig_y: float
    sig_z: float
    converged: bool
    nll: float
    llr: float  # NLL gain over the same model without this emitter
    deviance: float = float("nan")  # 2 (loglik(saturated) - loglik(fit))
    n_pixels: int = 0
    n_iter: int = 0
    n_emitters: int = 1  # emitters in the ROI model this fit belongs to
    truncated: bool = False
    crowded: bool = False
    frame: int = 0
    center_offset: float = 0.0  # nm from the centre of the candidate pixel


def _stabilize(frame, camera):
    """Cube root of the signal above baseline. Gamma-distributed pixels
    become close to normal under it (Wilson-Hilferty), so a threshold in
    robust noise units keeps its nominal false-alarm rate."""
    offset = np.asarray(getattr(camera, "var_map", 0.0), dtype=float) / getattr(camera, "gain", 1.0)
    return np.cbrt(np.maximum(frame - camera.baseline + offset, 0.0))


def detect_candidates(frame, cfg=LocalizerConfig(), frame_index=0, camera=None):
    """Local maxima of the smoothed, median-subtracted frame above
    ``cfg.threshold`` robust noise units. With a ``camera`` the frame is
    cube-root transformed first, which keeps skewed noise from producing
    false candidates."""
    frame = np.asarray(frame, dtype=float)
    if camera is not None:
        frame = _stabilize(frame, camera)
    smooth = ndimage.gaussian_filter(frame, cfg.smooth_sigma, mode="nearest")
    smooth -= np.median(smooth)
    noise = 1.4826 * np.median(np.abs(smooth))
    if not noise > 0:
        return []
    peak = (smooth == ndimage.maximum_filter(smooth, size=3, mode="nearest")) & (smooth > cfg.threshold * noise)
    rows, cols = np.nonzero(peak)
    half = cfg.roi_size / 2
    out = []
    for r, c in zip(rows, cols):
        d = np.hypot(rows - r, cols - c)
        crowded = bool(np.any((d > 0) & (d < half)))
        out.append(Candidate(frame_index, int(r), int(c), float(smooth[r, c]), crowded))
    return out


class _RoiModel:
    """``K`` emitters on a shared flat background inside one ROI.

    Parameter vector: ``[x, y, z, photons] * K + [background]``.
    """

    def __init__(self, data, rows, cols, psf, camera, pixel_size):
        self.data = data
        self.psf = psf
        self.cam = camera.window(rows, cols)
        self.pixel_size = pixel_size
        self.cx = ((np.arange(cols.start, cols.stop) + 0.5) * pixel_size)[None, :]
        self.cy = ((np.arange(rows.start, rows.stop) + 0.5) * pixel_size)[:, None]

    def mean_jac(self, theta):
        k = (len(theta) - 1) // 4
        mean = np.full(self.data.shape, self.cam.baseline + theta[-1])
        jac = np.empty((len(theta),) + self.data.shape)
        for e in range(k):
            x, y, z, n = theta[4 * e: 4 * e + 4]
            f, d_off, _, _ = psf_grad(self.psf, self.cx - x, self.cy - y, -z)
            mean += n * f
            jac[4 * e: 4 * e + 3] = -n * d_off
            jac[4 * e + 3] = f
        jac[-1] = 1.0
        return mean, jac

    def mean(self, theta):
        k = (len(theta) - 1) // 4
        mean = np.full(self.data.shape, self.cam.baseline + theta[-1])
        for e in range(k):
            x, y, z, n = theta[4 * e: 4 * e + 4]
            mean += n * self.psf(self.cx - x, self.cy - y, -z)
        return mean

    def nll(self, theta):
        return -float(np.sum(self.cam.loglik(self.data, self.mean(theta))))

    def background_nll(self):
        """Minimum NLL of the emitter-free model (flat background only)."""
        base = self.cam.baseline
        hi = max(float(self.data.max()) - base, 1.0)
        res = optimize.minimize_scalar(
            lambda b: -float(np.sum(self.cam.loglik(self.data, np.full(self.data.shape, base + b)))),
            bounds=(1e-6, hi), method="bounded", options={"xatol": 1e-6 * hi},
        )
        return float(res.fun)

    def deviance(self, nll):
        # saturated model: mean equals the data, kept just inside the support
        floor = self.cam.baseline + 1e-3
        sat = float(np.sum(self.cam.loglik(self.data, np.maximum(self.data, floor))))
        return max(2.0 * (sat + nll), 0.0)

    def grad(self, theta):
        mean, jac = self.mean_jac(theta)
        s = self.cam.dloglik_dmean(self.data, mean)
        return -np.einsum("pij,ij->p", jac, s)

    def hessian(self, theta):
        """Observed information by central differences of the analytic gradient."""
        steps = np.empty(len(theta))
        steps[0:-1:4] = steps[1:-1:4] = 0.05
        steps[2:-1:4] = 0.5
        steps[3:-1:4] = 1e-4 * np.maximum(theta[3:-1:4], 1.0)
        steps[-1] = 1e-4 * max(theta[-1], 1.0)
        h = np.empty((len(theta), len(theta)))
        for i in range(len(theta)):
            e = np.zeros(len(theta))
            e[i] = steps[i]
            h[i] = (self.grad(theta + e) - self.grad(theta - e)) / (2 * steps[i])
        return 0.5 * (h + h.T)


def _lm_fit(model, theta, lower, upper, max_iter, free):
    """Levenberg-Marquardt on the Fisher-scoring approximation.

    Only parameters flagged in ``free`` move.
    """
    theta = theta.copy()
    nll = model.nll(theta)
    lam = 1e-3
    converged = False
    it = 0
    tol = np.empty(len(theta))
    tol[0:-1:4] = tol[1:-1:4] = 1e-4
    tol[2:-1:4] = 1e-3
    # steps are shrunk so no emitter moves more than a pixel laterally or
    # _MAX_Z_STEP axially; without this a poor start can jump far away
    limit = np.full(len(theta), np.inf)
    limit[0:-1:4] = limit[1:-1:4] = model.pixel_size
    limit[2:-1:4] = _MAX_Z_STEP
    limit = limit[free]
    for it in range(1, max_iter + 1):
        mean, jac = model.mean_jac(theta)
        jac = jac[free]
        s = model.cam.dloglik_dmean(model.data, mean)
        w = model.cam.fisher_mean(mean)
        g = -np.einsum("pij,ij->p", jac, s)
        info = np.einsum("pij,qij,ij->pq", jac, jac, w)
        diag = np.diag(np.maximum(np.diag(info), 1e-12))
        improved = False
        for _ in range(12):
            try:
                step = -np.linalg.solve(info + lam * diag, g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            step /= max(1.0, float(np.max(np.abs(step) / limit)))
            trial = theta.copy()
            trial[free] += step
            trial = np.clip(trial, lower, upper)
            trial_nll = model.nll(trial)
            if trial_nll <= nll:
                improved = True
                break
            lam *= 10
        if not improved:
            converged = True  # no descent direction left at this damping
            break
        delta = np.abs(trial - theta)
        old = nll
        theta, nll = trial, trial_nll
        lam = max(lam / 10, 1e-9)
        tol[3:-1:4] = 1e-7 * theta[3:-1:4] + 1e-9
        tol[-1] = 1e-7 * theta[-1] + 1e-9
        if (delta <= tol).all() or old - nll <= 1e-10 * max(abs(nll), 1.0):
            converged = True
            break
    return theta, nll, converged, it


class _Roi:
    """Window bookkeeping for one candidate."""

    def __init__(self, frame, candidate, psf, camera, roi_size, pixel_size):
        h = roi_size // 2
        r, c = candidate.row, candidate.col
        self.r0, self.r1 = max(r - h, 0), min(r + h + 1, frame.shape[0])
        self.c0, self.c1 = max(c - h, 0), min(c + h + 1, frame.shape[1])
        self.truncated = (self.r1 - self.r0, self.c1 - self.c0) != (roi_size, roi_size)
        self.ps = float(pixel_size)
        self.candidate = candidate
        self.kind = psf.kind
        rows, cols = slice(self.r0, self.r1), slice(self.c0, self.c1)
        self.model = _RoiModel(frame[rows, cols], rows, cols, psf, camera, self.ps)

    def bounds(self, k):
        ps = self.ps
        lo = np.array([(self.c0 - 1) * ps, (self.r0 - 1) * ps, -np.inf, 1e-6])
        hi = np.array([(self.c1 + 1) * ps, (self.r1 + 1) * ps, np.inf, np.inf])
        if self.kind == "2d":
            lo[2] = hi[2] = 0.0
        return np.append(np.tile(lo, k), 1e-6), np.append(np.tile(hi, k), np.inf)

    def free(self, k):
        f = np.ones(4 * k + 1, dtype=bool)
        f[2:-1:4] = self.kind != "2d"
        return f

    def inside(self, x, y):
        """Within the ROI, with half a pixel of slack at its border."""
        lo_x, hi_x = (self.c0 - 0.5) * self.ps, (self.c1 + 0.5) * self.ps
        lo_y, hi_y = (self.r0 - 0.5) * self.ps, (self.r1 + 0.5) * self.ps
        return lo_x <= x <= hi_x and lo_y <= y <= hi_y

    def spot_start(self, signal, z_values):
        """Centroid/peak starts for one emitter from a background-free image."""
        m = self.model
        total = signal.sum()
        if total > 0:
            x0 = float((signal * m.cx).sum() / total)
            y0 = float((signal * m.cy).sum() / total)
        else:
            x0 = (self.candidate.col + 0.5) * self.ps
            y0 = (self.candidate.row + 0.5) * self.ps
        n0 = max(float(signal.max()), 1.0)
        if self.kind == "dh" and total > 0:
            z_values = [_dh_moment_z(signal, m.cx - x0, m.cy - y0, m.psf.parametric)] + list(z_values)
        return [np.array([x0, y0, z, n0]) for z in z_values]


def _dh_moment_z(signal, dx, dy, params):
    """z whose lobe axis matches the principal axis of ``signal``."""
    sxx = (signal * dx**2).sum()
    syy = (signal * dy**2).sum()
    sxy = (signal * dx * dy).sum()
    phi = 0.5 * np.arctan2(2 * sxy, sxx - syy)
    if params.b == 0:
        return 0.0
    # the model evaluates the PSF at dz = -z
    z = (params.c - phi) / params.b
    period = np.pi / abs(params.b)
    return float((z + period / 2) % period - period / 2)


def _z_starts(kind, cfg):
    if kind == "2d" or cfg.n_z_starts <= 1:
        return [0.0]
    return list(np.linspace(-cfg.z_range, cfg.z_range, cfg.n_z_starts))


def _fit_k(roi, starts, cfg):
    """Multi-start fit: short runs from every start, then polish the best."""
    k = (len(starts[0]) - 1) // 4
    lower, upper = roi.bounds(k)
    free = roi.free(k)
    scout = [_lm_fit(roi.model, np.clip(s0, lower, upper), lower, upper, _SCOUT_ITER, free) for s0 in starts]
    theta, nll, conv, it = min(scout, key=lambda r: r[1])
    if not conv:
        theta, nll, conv, more = _lm_fit(roi.model, theta, lower, upper, cfg.max_iter, free)
        it += more
    if roi.kind == "dh":
        theta = _wrap_dh_z(theta, roi.model.psf.parametric)
    return theta, nll, conv, it


def _wrap_dh_z(theta, params):
    """The double-helix image repeats every ``pi / b`` in z; report the
    representative in ``[-period / 2, period / 2)``."""
    if params.b == 0:
        return theta
    period = np.pi / abs(params.b)
    theta = theta.copy()
    theta[2:-1:4] = (theta[2:-1:4] + period / 2) % period - period / 2
    return theta


def _passes_gof(dev, n_pixels, n_params, cfg):
    if cfg.gof_pvalue is None:
        return True
    return stats.chi2.sf(dev, max(n_pixels - n_params, 1)) >= cfg.gof_pvalue


def _emitter_fits(roi, theta, nll, conv, it):
    """Per-emitter results with sigmas from the joint observed information.

    The first emitter must end inside the ROI for the fit to count as
    converged; further emitters that drift outside are left out.
    """
    model = roi.model
    k = (len(theta) - 1) // 4
    sig = np.full((k, 3), np.inf)
    inside = [roi.inside(theta[4 * e], theta[4 * e + 1]) for e in range(k)]
    if conv and inside[0] and np.isfinite(nll):
        free = roi.free(k)
        hess = model.hessian(theta)[np.ix_(free, free)]
        try:
            np.linalg.cholesky(hess)
            var = np.full(len(theta), 0.0)
            var[free] = np.diag(np.linalg.inv(hess))
            sig = np.sqrt(var[:-1].reshape(k, 4)[:, :3])
        except np.linalg.LinAlgError:
            conv = False
    else:
        conv = False
    if not conv:
        sig[:] = np.inf
    llr = np.zeros(k)
    if conv:
        llr[0] = model.background_nll() - nll
        if k > 1:
            # each emitter's own contribution: switch it off, keep the rest
            for e in range(k):
                off = theta.copy()
                off[4 * e + 3] = 0.0
                llr[e] = model.nll(off) - nll
    dev = model.deviance(nll) if conv else float("nan")
    c = roi.candidate
    return [
        RoiFit(
            x=float(theta[4 * e]), y=float(theta[4 * e + 1]), z=float(theta[4 * e + 2]),
            photons=float(theta[4 * e + 3]), background=float(theta[-1]),
            sig_x=float(sig[e, 0]), sig_y=float(sig[e, 1]), sig_z=float(sig[e, 2]),
            converged=bool(conv), nll=float(nll), llr=float(llr[e]), deviance=float(dev),
            n_pixels=int(model.data.size), n_iter=int(it), n_emitters=k,
            truncated=roi.truncated, crowded=c.crowded or k > 1, frame=c.frame,
        )
        for e in range(k)
        if e == 0 or inside[e]
    ]


def fit_roi(frame, candidate, psf, camera, cfg=LocalizerConfig(), pixel_size=100.0, init=None):
    """Maximum-likelihood single-emitter fit in a ``cfg.roi_size`` square ROI.

    ``init`` may give a starting ``(x, y, z, photons, background)``; without
    it the start is the ROI centroid and peak, tried at several z values.
    A fit whose Hessian is not positive definite or whose position leaves
    the ROI is returned with ``converged=False`` and infinite sigmas.
    """
    frame = np.asarray(frame, dtype=float)
    roi = _Roi(frame, candidate, psf, camera, cfg.roi_size, pixel_size)
    data = roi.model.data
    bg0 = max(float(np.percentile(data, 20)) - roi.model.cam.baseline, 1e-3)
    if init is not None:
        starts = [np.asarray(init, dtype=float)]
    else:
        signal = np.clip(data - roi.model.cam.baseline - bg0, 0, None)
        starts = [np.append(s, bg0) for s in roi.spot_start(signal, _z_starts(psf.kind, cfg))]
    return _emitter_fits(roi, *_fit_k(roi, starts, cfg))[0]


def fit_roi_multi(frame, candidate, psf, camera, cfg=LocalizerConfig(), pixel_size=100.0):
    """Fit the candidate's ROI with as few emitters as the data allow.

    Starts with one emitter; while the deviance test rejects the model and
    fewer than ``cfg.max_emitters`` are in use, another emitter is seeded at
    the peak of the smoothed residual and everything is refit jointly.
    Returns the per-emitter fits of the last model tried.
    """
    frame = np.asarray(frame, dtype=float)
    roi = _Roi(frame, candidate, psf, camera, cfg.roi_size, pixel_size)
    model = roi.model
    base = model.cam.baseline
    zs = _z_starts(psf.kind, cfg)
    bg0 = max(float(np.percentile(model.data, 20)) - base, 1e-3)
    signal = np.clip(model.data - base - bg0, 0, None)
    starts = [np.append(s, bg0) for s in roi.spot_start(signal, zs)]
    while True:
        theta, nll, conv, it = _fit_k(roi, starts, cfg)
        k = (len(theta) - 1) // 4
        n_params = int(roi.free(k).sum())
        if not conv or _passes_gof(model.deviance(nll), model.data.size, n_params, cfg) or k >= cfg.max_emitters:
            return _emitter_fits(roi, theta, nll, conv, it)
        resid = ndimage.gaussian_filter(model.data - model.mean(theta), cfg.smooth_sigma, mode="nearest")
        r, c = np.unravel_index(np.argmax(resid), resid.shape)
        x_new = model.cx[0, c]
        y_new = model.cy[r, 0]
        n_new = max(float(resid[r, c]) * 2.0, 1.0)
        starts = [np.concatenate([theta[:-1], [x_new, y_new, z, n_new], theta[-1:]]) for z in zs]


def _fits_well(fit, psf, cfg):
    """Deviance test of the ROI model the fit came from."""
    n_params = fit.n_emitters * (3 if psf.kind == "2d" else 4) + 1
    return _passes_gof(fit.deviance, fit.n_pixels, n_params, cfg)


def _dedup(fits, radius):
    """Collapse fits of the same emitter from overlapping ROIs (or from both
    lobes of a double-helix PSF); the copy closest to its ROI centre wins."""
    kept = []
    for f in sorted(fits, key=lambda f: f.center_offset):
        if all(np.hypot(f.x - k.x, f.y - k.y) > radius for k in kept):
            kept.append(f)
    return sorted(kept, key=lambda f: (f.y, f.x))


def localize_frame(frame, psf, camera, cfg=LocalizerConfig(), frame_index=0, pixel_size=100.0):
    frame = np.asarray(frame, dtype=float)
    good = []
    for cand in detect_candidates(frame, cfg, frame_index, camera):
        cx, cy = (cand.col + 0.5) * pixel_size, (cand.row + 0.5) * pixel_size
        for f in fit_roi_multi(frame, cand, psf, camera, cfg, pixel_size):
            if f.converged and f.llr >= cfg.min_llr and _fits_well(f, psf, cfg):
                f.center_offset = float(np.hypot(f.x - cx, f.y - cy))
                good.append(f)
    return _dedup(good, cfg.dedup_radius * pixel_size)


def fits_to_table(fits):
    out = empty_locs(len(fits))
    for i, f in enumerate(fits):
        out[i] = (f.frame, f.x, f.y, f.z, f.photons, 1.0, f.sig_x, f.sig_y, f.sig_z)
    return out


def localize_stack(stack, psf, camera, cfg=LocalizerConfig(), threads=None):
    """Detect and fit every frame independently.

    Converged fits that beat the background-only model by ``cfg.min_llr``
    become rows with detection probability 1.
    """
    def one(t):
        return localize_frame(stack.frames[t], psf, camera, cfg, t, stack.pixel_size)

    per_frame = ordered_map(one, range(stack.n_frames), threads)
    return fits_to_table([f for fits in per_frame for f in fits])

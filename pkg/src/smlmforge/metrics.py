"""
Detection/localization scores and Fourier ring correlation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

FRC_THRESHOLD = 0.143
ALPHA_LATERAL = 0.5
ALPHA_AXIAL = 1.0
MATCH_RADIUS = 250.0


@dataclass
class MatchResult:
    pred_index: np.ndarray
    truth_index: np.ndarray
    distance: np.ndarray
    dx: np.ndarray
    dy: np.ndarray
    dz: np.ndarray
    n_pred: int
    n_truth: int

    @property
    def tp(self):
        return len(self.pred_index)

    @property
    def fp(self):
        return self.n_pred - self.tp

    @property
    def fn(self):
        return self.n_truth - self.tp


def _frame_slices(frames):
    order = np.argsort(frames, kind="stable")
    uniq, start = np.unique(frames[order], return_index=True)
    stop = np.append(start[1:], len(order))
    return {f: order[a:b] for f, a, b in zip(uniq, start, stop)}


def _match_frame(p_xyz, t_xyz, radius, use_3d):
    ndim = 3 if use_3d else 2
    d = np.linalg.norm(p_xyz[:, None, :ndim] - t_xyz[None, :, :ndim], axis=-1)
    allowed = d <= radius
    if not allowed.any():
        return np.empty(0, int), np.empty(0, int)
    # Any allowed edge is worth more than the total distance of all edges,
    # so the optimum maximizes the number of matches first and then
    # minimizes their summed distance.
    big = radius * (min(d.shape) + 1) + 1.0
    cost = np.where(allowed, d - big, 0.0)
    rows, cols = linear_sum_assignment(cost)
    ok = allowed[rows, cols]
    return rows[ok], cols[ok]


def match_localizations(pred, truth, radius=MATCH_RADIUS, use_3d=False):
    """Per-frame one-to-one matching of predictions to ground truth.

    Within each frame the matching has maximum cardinality among pairs no
    farther apart than ``radius`` (lateral distance, or 3D with
    ``use_3d``), and minimum total distance among those.
    """
    if not radius > 0:
        raise ValueError("radius must be positive")
    pxyz = np.stack([pred["x"], pred["y"], pred["z"]], axis=1)
    txyz = np.stack([truth["x"], truth["y"], truth["z"]], axis=1)
    pf = _frame_slices(np.asarray(pred["frame"]))
    tf = _frame_slices(np.asarray(truth["frame"]))
    pi, ti = [], []
    for f in sorted(set(pf) & set(tf)):
        a, b = pf[f], tf[f]
        r, c = _match_frame(pxyz[a], txyz[b], radius, use_3d)
        pi.append(a[r])
        ti.append(b[c])
    pi = np.concatenate(pi) if pi else np.empty(0, int)
    ti = np.concatenate(ti) if ti else np.empty(0, int)
    delta = pxyz[pi] - txyz[ti]
    ndim = 3 if use_3d else 2
    return MatchResult(
        pred_index=pi,
        truth_index=ti,
        distance=np.linalg.norm(delta[:, :ndim], axis=1),
        dx=delta[:, 0],
        dy=delta[:, 1],
        dz=delta[:, 2],
        n_pred=len(pred),
        n_truth=len(truth),
    )


def jaccard(m):
    """``100 TP / (TP + FP + FN)``; 100 when both sets are empty."""
    denom = m.tp + m.fp + m.fn
    if denom == 0:
        return 100.0
    return 100.0 * m.tp / denom


def rmse(m, mode="lateral"):
    """Root-mean-square error over matched pairs, ``nan`` without matches."""
    if m.tp == 0:
        return float("nan")
    if mode == "lateral":
        sq = m.dx**2 + m.dy**2
    elif mode == "axial":
        sq = m.dz**2
    elif mode == "volume":
        sq = m.dx**2 + m.dy**2 + m.dz**2
    else:
        raise ValueError(f"unknown rmse mode {mode!r}")
    return float(np.sqrt(np.mean(sq)))


def efficiency(jac, rmse_nm, alpha=ALPHA_LATERAL):
    return 100.0 - np.sqrt((100.0 - jac) ** 2 + alpha**2 * rmse_nm**2)


def efficiency_3d(jac, rmse_lateral, rmse_axial, alpha_lateral=ALPHA_LATERAL, alpha_axial=ALPHA_AXIAL):
    return 0.5 * (efficiency(jac, rmse_lateral, alpha_lateral) + efficiency(jac, rmse_axial, alpha_axial))


def evaluate(pred, truth, radius=MATCH_RADIUS, use_3d=False, alpha_lateral=ALPHA_LATERAL, alpha_axial=ALPHA_AXIAL):
    """The full score report as a plain dict."""
    m = match_localizations(pred, truth, radius, use_3d)
    jac = jaccard(m)
    lat, ax, vol = rmse(m, "lateral"), rmse(m, "axial"), rmse(m, "volume")
    return {
        "jaccard": jac,
        "rmse_lateral": lat,
        "rmse_axial": ax,
        "rmse_volume": vol,
        "eff_lateral": float(efficiency(jac, lat, alpha_lateral)),
        "eff_axial": float(efficiency(jac, ax, alpha_axial)),
        "eff_3d": float(efficiency_3d(jac, lat, ax, alpha_lateral, alpha_axial)),
        "n_tp": m.tp,
        "n_fp": m.fp,
        "n_fn": m.fn,
    }


def split_even_odd_blocks(table, block_size):
    """Alternate consecutive blocks of ``block_size`` rows (time order) into two tables."""
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    table = table[np.argsort(table["frame"], kind="stable")]
    block = np.arange(len(table)) // block_size
    return table[block % 2 == 0], table[block % 2 == 1]


@dataclass
class FrcCurve:
    frequencies: np.ndarray  # 1/nm, ring r at r / (n * pixel_size)
    correlation: np.ndarray
    n_samples: np.ndarray


@dataclass
class FrcResolution:
    resolution: float  # nm
    frequency: float  # 1/nm
    crossed: bool  # False: never drops below threshold; value is the Nyquist limit


def _pad_pow2_square(img, n):
    out = np.zeros((n, n))
    out[: img.shape[0], : img.shape[1]] = img
    return out


def frc_curve(image_a, image_b, pixel_size=1.0):
    """Fourier ring correlation between two images.

    Images are zero-padded to a common power-of-two square; rings are one
    reciprocal pixel wide and run from DC to Nyquist. Rings without any
    power get correlation 0.
    """
    a = np.asarray(image_a, dtype=float)
    b = np.asarray(image_b, dtype=float)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError("FRC needs two 2D images of identical shape")
    n = 1 << int(np.ceil(np.log2(max(a.shape))))
    fa = np.fft.fftshift(np.fft.fft2(_pad_pow2_square(a, n)))
    fb = np.fft.fftshift(np.fft.fft2(_pad_pow2_square(b, n)))
    k = np.arange(n) - n // 2
    kx, ky = np.meshgrid(k, k)
    ring = np.rint(np.hypot(kx, ky)).astype(int).ravel()
    n_rings = n // 2 + 1
    sel = ring < n_rings
    ring = ring[sel]
    fa, fb = fa.ravel()[sel], fb.ravel()[sel]
    num = np.bincount(ring, weights=np.real(fa * np.conj(fb)), minlength=n_rings)
    pa = np.bincount(ring, weights=np.abs(fa) ** 2, minlength=n_rings)
    pb = np.bincount(ring, weights=np.abs(fb) ** 2, minlength=n_rings)
    denom = np.sqrt(pa * pb)
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.where(denom > 0, num / denom, 0.0)
    freqs = np.arange(n_rings) / (n * pixel_size)
    return FrcCurve(freqs, corr, np.bincount(ring, minlength=n_rings))


def frc_resolution(curve, threshold=FRC_THRESHOLD):
    """Resolution (nm) where the curve first drops below ``threshold``.

    The crossing frequency is interpolated linearly between the last ring at
    or above the threshold and the first ring below it. A curve that starts
    below the threshold gives an infinite resolution.
    """
    c = np.asarray(curve.correlation, dtype=float)
    f = np.asarray(curve.frequencies, dtype=float)
    if len(c) == 0:
        raise ValueError("empty FRC curve")
    if c[0] < threshold:
        # no correlation even at DC: nothing is resolved
        return FrcResolution(float("inf"), 0.0, True)
    below = np.flatnonzero(c < threshold)
    if len(below) == 0:
        return FrcResolution(1.0 / f[-1], float(f[-1]), False)
    r = below[0]
    frac = (c[r - 1] - threshold) / (c[r - 1] - c[r])
    freq = f[r - 1] + frac * (f[r] - f[r - 1])
    return FrcResolution(1.0 / freq, float(freq), True)

"""
Gamma approximations of EMCCD and sCMOS camera noise.

Mean images are in camera counts and include the baseline, i.e.
``mean = baseline + background + sum(alpha * PSF)``. Each camera exposes the
same small interface used by the simulator, the bead calibration and the
reference localizer: ``sample``, ``loglik``, ``dloglik_dmean`` and
``fisher_mean``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, gammaln, polygamma

# observed pixel values at or below the support edge are pulled to this
# fraction of the scale parameter before taking logs
_SUPPORT_EPS = 1e-6


@dataclass(frozen=True)
class CameraEmccd:
    """EMCCD camera: ``I ~ Gamma((mean - BL) / eta, eta) + BL``, ``eta = 2 EM / EC``."""

    baseline: float = 100.0
    em_gain: float = 300.0
    e_per_count: float = 45.0
    background: float = 50.0

    def __post_init__(self):
        if not (self.em_gain > 0 and self.e_per_count > 0):
            raise ValueError("em_gain and e_per_count must be positive")
        if self.background < 0:
            raise ValueError("background must be non-negative")

    @property
    def eta(self):
        return 2.0 * self.em_gain / self.e_per_count

    def expected_background(self):
        return self.baseline + self.background

    def window(self, rows, cols):
        return self

    def sample(self, mean, rng):
        mean = np.asarray(mean, dtype=float)
        shape = (mean - self.baseline) / self.eta
        if np.any(~(shape > 0)):
            raise ValueError("mean image must exceed the camera baseline everywhere")
        return rng.gamma(shape, self.eta) + self.baseline

    def _shape(self, mean):
        return (np.asarray(mean, dtype=float) - self.baseline) / self.eta

    def loglik(self, y, mean):
        """Per-pixel log density; ``-inf`` where ``mean <= baseline``."""
        k = self._shape(mean)
        eta = self.eta
        x = np.maximum(np.asarray(y, dtype=float) - self.baseline, _SUPPORT_EPS * eta)
        with np.errstate(invalid="ignore", divide="ignore"):
            out = (k - 1) * np.log(x) - x / eta - gammaln(k) - k * np.log(eta)
        return np.where(k > 0, out, -np.inf)

    def dloglik_dmean(self, y, mean):
        k = self._shape(mean)
        eta = self.eta
        x = np.maximum(np.asarray(y, dtype=float) - self.baseline, _SUPPORT_EPS * eta)
        return (np.log(x) - digamma(k) - np.log(eta)) / eta

    def fisher_mean(self, mean):
        """Expected Fisher information about the pixel mean (also ``-d2 loglik``)."""
        return polygamma(1, self._shape(mean)) / self.eta**2

    def variance(self, mean):
        return self.eta * (np.asarray(mean, dtype=float) - self.baseline)


@dataclass(frozen=True, eq=False)
class CameraScmos:
    """sCMOS camera with per-pixel read-noise variance ``var_map`` (counts^2).

    ``I ~ Gamma(mean / eta, eta)`` with ``eta = (var + g (mean - BL)) / mean``,
    which gives mean ``mean`` and variance ``var + g (mean - BL)``.
    """

    baseline: float = 100.0
    gain: float = 1.0
    var_map: np.ndarray | float = 4.0
    background: float = 50.0

    def __post_init__(self):
        if not self.gain > 0:
            raise ValueError("gain must be positive")
        var = np.asarray(self.var_map, dtype=float)
        if np.any(var < 0):
            raise ValueError("read-noise variance must be non-negative")
        object.__setattr__(self, "var_map", var)
        if self.background < 0:
            raise ValueError("background must be non-negative")

    def expected_background(self):
        return self.baseline + self.background

    def window(self, rows, cols):
        if self.var_map.ndim == 0:
            return self
        return CameraScmos(self.baseline, self.gain, self.var_map[rows, cols], self.background)

    def _total_var(self, mean):
        return self.var_map + self.gain * (np.asarray(mean, dtype=float) - self.baseline)

    def eta(self, mean):
        mean = np.asarray(mean, dtype=float)
        return self._total_var(mean) / mean

    def sample(self, mean, rng):
        mean = np.asarray(mean, dtype=float)
        if self.var_map.ndim and self.var_map.shape != mean.shape:
            raise ValueError("var_map shape does not match the frame")
        with np.errstate(divide="ignore", invalid="ignore"):
            eta = self.eta(mean)
        if np.any(~(mean > 0)) or np.any(~(eta > 0)):
            raise ValueError("non-positive mean or eta in sCMOS noise model")
        return rng.gamma(mean / eta, eta)

    def _shape_scale(self, mean):
        mean = np.asarray(mean, dtype=float)
        var = self._total_var(mean)
        with np.errstate(divide="ignore", invalid="ignore"):
            return mean**2 / var, var / mean

    def loglik(self, y, mean):
        k, theta = self._shape_scale(mean)
        valid = (k > 0) & (theta > 0)
        theta_s = np.where(valid, theta, 1.0)
        k_s = np.where(valid, k, 1.0)
        y = np.maximum(np.asarray(y, dtype=float), _SUPPORT_EPS * theta_s)
        out = (k_s - 1) * np.log(y) - y / theta_s - gammaln(k_s) - k_s * np.log(theta_s)
        return np.where(valid, out, -np.inf)

    def _shape_scale_derivs(self, mean):
        mean = np.asarray(mean, dtype=float)
        var = self._total_var(mean)
        g = self.gain
        k = mean**2 / var
        theta = var / mean
        dk = 2 * mean / var - mean**2 * g / var**2
        dtheta = g / mean - var / mean**2
        return k, theta, dk, dtheta

    def dloglik_dmean(self, y, mean):
        k, theta, dk, dtheta = self._shape_scale_derivs(mean)
        y = np.maximum(np.asarray(y, dtype=float), _SUPPORT_EPS * theta)
        return (np.log(y) - digamma(k) - np.log(theta)) * dk + (y / theta**2 - k / theta) * dtheta

    def fisher_mean(self, mean):
        k, theta, dk, dtheta = self._shape_scale_derivs(mean)
        return polygamma(1, k) * dk**2 + 2 * dk * dtheta / theta + k * dtheta**2 / theta**2

    def variance(self, mean):
        return self._total_var(mean)


def camera_from_dict(d):
    d = dict(d)
    kind = d.pop("type", "emccd")
    if kind == "emccd":
        return CameraEmccd(**d)
    if kind == "scmos":
        return CameraScmos(**d)
    raise ValueError(f"unknown camera type {kind!r}")


def camera_to_dict(cam):
    if isinstance(cam, CameraEmccd):
        return {"type": "emccd", "baseline": cam.baseline, "em_gain": cam.em_gain,
                "e_per_count": cam.e_per_count, "background": cam.background}
    var = cam.var_map.tolist() if cam.var_map.ndim else float(cam.var_map)
    return {"type": "scmos", "baseline": cam.baseline, "gain": cam.gain,
            "var_map": var, "background": cam.background}

"""
Training objectives on per-pixel output maps, as plain numpy functions.

Every function that takes maps can also return analytic gradients with
respect to each map channel (``grad=True``), as a dict of arrays with the
same shape as the channels. Log-likelihoods are returned (to be maximized).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, softmax

LOG_2PI = np.log(2 * np.pi)
SIGMA_FLOOR = 0.01
COUNT_VAR_FLOOR = 1e-6
BCE_CLAMP = 1e-7

CHANNELS = ("p", "alpha", "dx", "dy", "dz", "sig_alpha", "sig_x", "sig_y", "sig_z")


@dataclass(frozen=True, eq=False)
class OutputMaps:
    """The nine per-pixel output channels of one frame.

    ``dx``, ``dy`` are in-pixel offsets (nm) from the pixel center, ``dz`` is
    the absolute axial position (nm); sigmas are standard deviations in nm
    (``sig_alpha`` in brightness units).
    """

    p: np.ndarray
    alpha: np.ndarray
    dx: np.ndarray
    dy: np.ndarray
    dz: np.ndarray
    sig_alpha: np.ndarray
    sig_x: np.ndarray
    sig_y: np.ndarray
    sig_z: np.ndarray
    pixel_size: float = 100.0

    def __post_init__(self):
        shape = np.shape(self.p)
        for name in CHANNELS:
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != shape:
                arr = np.broadcast_to(arr, shape).copy()
            object.__setattr__(self, name, arr)
        if len(shape) != 2:
            raise ValueError("output maps must be 2D")

    @classmethod
    def from_raw(cls, pixel_size=100.0, sigma_floor=SIGMA_FLOOR, alpha_scale=1.0, **channels):
        """Build maps from raw network-style outputs, adding the sigma floor.

        The floor is given in pixel units for the spatial sigmas and in units
        of ``alpha_scale`` for the brightness sigma.
        """
        ch = dict(channels)
        for name in ("sig_x", "sig_y", "sig_z"):
            ch[name] = np.asarray(ch[name], dtype=float) + sigma_floor * pixel_size
        ch["sig_alpha"] = np.asarray(ch["sig_alpha"], dtype=float) + sigma_floor * alpha_scale
        return cls(pixel_size=pixel_size, **ch)

    @property
    def shape(self):
        return self.p.shape

    def replace(self, **changes):
        ch = {name: getattr(self, name) for name in CHANNELS}
        ch.update(changes)
        return OutputMaps(pixel_size=self.pixel_size, **ch)

    def pixel_centers(self):
        h, w = self.shape
        cx = (np.arange(w) + 0.5) * self.pixel_size
        cy = (np.arange(h) + 0.5) * self.pixel_size
        return np.meshgrid(cx, cy)

    def means(self, use_brightness=False):
        """Component means ``(K, D)`` in row-major pixel order."""
        cx, cy = self.pixel_centers()
        cols = [cx + self.dx, cy + self.dy, self.dz]
        if use_brightness:
            cols.append(self.alpha)
        return np.stack([c.ravel() for c in cols], axis=1)

    def sigmas(self, use_brightness=False):
        cols = [self.sig_x, self.sig_y, self.sig_z]
        if use_brightness:
            cols.append(self.sig_alpha)
        return np.stack([c.ravel() for c in cols], axis=1)


@dataclass(frozen=True, eq=False)
class GroundTruthSet:
    """True emitters of one frame: ``positions`` ``(N, 3)`` nm and brightness ``(N,)``."""

    positions: np.ndarray
    brightness: np.ndarray | None = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        object.__setattr__(self, "positions", pos)
        if self.brightness is not None:
            object.__setattr__(self, "brightness", np.asarray(self.brightness, dtype=float).reshape(-1))

    @property
    def count(self):
        return len(self.positions)

    def vectors(self, use_brightness=False):
        if not use_brightness:
            return self.positions
        if self.brightness is None:
            raise ValueError("brightness dimension requested but truth has no brightness")
        return np.column_stack([self.positions, self.brightness])

    def indicators(self, shape, pixel_size):
        """Per-pixel emitter counts ``S_k``, each emitter assigned to its containing pixel."""
        h, w = shape
        cols = np.floor(self.positions[:, 0] / pixel_size).astype(int)
        rows = np.floor(self.positions[:, 1] / pixel_size).astype(int)
        ok = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
        s = np.zeros(shape)
        np.add.at(s, (rows[ok], cols[ok]), 1.0)
        return s


def _zero_grads(shape):
    return {name: np.zeros(shape) for name in CHANNELS}


def _gauss_logpdf(x, mu, sigma):
    """Diagonal Gaussian log density summed over the last axis."""
    z = (x - mu) / sigma
    return -0.5 * np.sum(z**2 + LOG_2PI + 2 * np.log(sigma), axis=-1)


def gmm_loglik(maps, truth, use_brightness=False, grad=False):
    """Mixture log-likelihood ``sum_i log sum_k (p_k / sum p) N(X_i | mu_k, Sigma_k)``.

    Returns ``-inf`` when all ``p_k`` are zero but there are true emitters, and
    0 for an empty truth set.
    """
    shape = maps.shape
    X = truth.vectors(use_brightness)
    if len(X) == 0:
        return (0.0, _zero_grads(shape)) if grad else 0.0
    p = maps.p.ravel()
    total = p.sum()
    if not total > 0:
        return (-np.inf, _zero_grads(shape)) if grad else -np.inf
    mu = maps.means(use_brightness)
    sig = maps.sigmas(use_brightness)
    with np.errstate(divide="ignore"):
        log_w = np.log(p) - np.log(total)
    diff = X[:, None, :] - mu[None, :, :]  # (N, K, D)
    log_n = -0.5 * np.sum((diff / sig) ** 2 + LOG_2PI + 2 * np.log(sig), axis=-1)
    log_mix = logsumexp(log_w + log_n, axis=1)  # (N,)
    value = float(log_mix.sum())
    if not grad:
        return value

    resp = np.exp(log_w + log_n - log_mix[:, None])  # (N, K)
    # r_ik / p_k written without dividing by p_k, so p_k = 0 is fine
    d_p = np.exp(log_n - np.log(total) - log_mix[:, None]).sum(0) - len(X) / total
    d_mu = np.einsum("nk,nkd->kd", resp, diff / sig**2)
    d_sig = np.einsum("nk,nkd->kd", resp, diff**2 / sig**3 - 1 / sig)
    g = _zero_grads(shape)
    g["p"] = d_p.reshape(shape)
    for d, name in enumerate(("dx", "dy", "dz")):
        g[name] = d_mu[:, d].reshape(shape)
        g["sig_" + name[1]] = d_sig[:, d].reshape(shape)
    if use_brightness:
        g["alpha"] = d_mu[:, 3].reshape(shape)
        g["sig_alpha"] = d_sig[:, 3].reshape(shape)
    return value, g


def count_moments(p):
    """Mean and (floored) variance of the Poisson-binomial count, plus a
    flag telling whether the variance floor was applied."""
    p = np.asarray(p, dtype=float).ravel()
    mean = p.sum()
    var = np.sum(p - p**2)
    degenerate = not var > COUNT_VAR_FLOOR
    return mean, max(var, COUNT_VAR_FLOOR), degenerate


def count_loglik(p, count, grad=False):
    """Gaussian surrogate ``log N(count | sum p, sum p - p^2)`` of the count likelihood."""
    p = np.asarray(p, dtype=float)
    mean, var, degenerate = count_moments(p)
    resid = count - mean
    value = float(-0.5 * (np.log(2 * np.pi * var) + resid**2 / var))
    if not grad:
        return value
    d_mean = resid / var
    d_var = 0.0 if degenerate else -0.5 / var + 0.5 * resid**2 / var**2
    return value, d_mean + d_var * (1 - 2 * p)


def decode_loss(maps, truth, use_brightness=False, grad=False):
    """``gmm_loglik + S * count_loglik`` with ``S`` the true emitter count."""
    S = truth.count
    if not grad:
        return gmm_loglik(maps, truth, use_brightness) + S * count_loglik(maps.p, S)
    v_gmm, g = gmm_loglik(maps, truth, use_brightness, grad=True)
    v_cnt, g_cnt = count_loglik(maps.p, S, grad=True)
    g["p"] = g["p"] + S * g_cnt
    return v_gmm + S * v_cnt, g


def context_consistency(maps_prev, maps_t, maps_next, s_prev, s_t, s_next, grad=False):
    """Log-likelihood of each pixel's offsets under its neighbours in time.

    ``sum_k S_t S_{t-1} log N(mu_t | mu_{t-1}, Sigma_{t-1})
    + S_t S_{t+1} log N(mu_t | mu_{t+1}, Sigma_{t+1})`` with
    ``mu = (dx, dy, dz)``. Subtract from the objective to use it as a penalty.

    With ``grad=True`` returns ``(value, (g_prev, g_t, g_next))``.
    """
    def stack(m, names):
        return np.stack([getattr(m, n) for n in names], axis=-1)

    off = ("dx", "dy", "dz")
    sig = ("sig_x", "sig_y", "sig_z")
    mu_t = stack(maps_t, off)
    value = 0.0
    grads = [_zero_grads(maps_t.shape) for _ in range(3)]
    for j, (m, s) in ((0, (maps_prev, s_prev)), (2, (maps_next, s_next))):
        w = np.asarray(s_t, dtype=float) * np.asarray(s, dtype=float)
        mu_o, sg_o = stack(m, off), stack(m, sig)
        diff = mu_t - mu_o
        log_n = _gauss_logpdf(mu_t, mu_o, sg_o)
        value += float(np.sum(w * log_n))
        if grad:
            d_mu_t = -w[..., None] * diff / sg_o**2
            d_sig = w[..., None] * (diff**2 / sg_o**3 - 1 / sg_o)
            for d in range(3):
                grads[1][off[d]] += d_mu_t[..., d]
                grads[j][off[d]] -= d_mu_t[..., d]
                grads[j][sig[d]] += d_sig[..., d]
    if grad:
        return value, tuple(grads)
    return value


def bernoulli_crossentropy(p, s, grad=False):
    """``sum_k S_k log p_k + (1 - S_k) log(1 - p_k)`` with p clamped to [1e-7, 1 - 1e-7]."""
    p = np.asarray(p, dtype=float)
    s = np.asarray(s, dtype=float)
    if p.shape != s.shape:
        raise ValueError("probability and indicator maps differ in shape")
    pc = np.clip(p, BCE_CLAMP, 1 - BCE_CLAMP)
    value = float(np.sum(s * np.log(pc) + (1 - s) * np.log1p(-pc)))
    if not grad:
        return value
    inside = (p > BCE_CLAMP) & (p < 1 - BCE_CLAMP)
    return value, np.where(inside, s / pc - (1 - s) / (1 - pc), 0.0)


def _log_ratios(log_p_joint, log_q):
    log_p_joint = np.asarray(log_p_joint, dtype=float)
    log_q = np.asarray(log_q, dtype=float)
    if log_p_joint.shape != log_q.shape or log_q.size == 0:
        raise ValueError("need equally sized, non-empty sample lists")
    return log_p_joint - log_q


def importance_weights(log_p_joint, log_q):
    """Self-normalized importance weights ``softmax(log p(d, h_j) - log q(h_j | d))``."""
    return softmax(_log_ratios(log_p_joint, log_q))


def iw_bound(log_p_joint, log_q):
    """Importance-weighted bound ``log((1/J) sum_j w_j)``; the ELBO term for J = 1."""
    log_w = _log_ratios(log_p_joint, log_q)
    return float(logsumexp(log_w) - np.log(log_w.size))


def rws_wake_objective(log_p_joint, log_q, grad=False):
    """Wake-phase surrogate ``sum_j w~_j log q_j`` with the weights held constant.

    Its gradient with respect to ``log_q`` is the weight vector itself.
    """
    weights = importance_weights(log_p_joint, log_q)
    value = float(np.dot(weights, np.asarray(log_q, dtype=float)))
    if grad:
        return value, weights
    return value

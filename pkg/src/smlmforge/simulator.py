"""
Forward model: blinking emitters rendered through a PSF and a camera.

Tracks are drawn from the blinking prior (per-pixel activation probability
``p_on``, geometric lifetimes with per-frame deactivation probability
``p_off``), rendered into mean images and corrupted by Gamma camera noise.
Noise for frame ``t`` is drawn from its own stream seeded by ``(seed, t)`` so
serial and threaded runs give identical stacks.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ._parallel import ordered_map
from .psf import PixelGrid, render_patch
from .table import empty_truth


@dataclass(frozen=True)
class PriorConfig:
    p_on: float = 1e-4
    p_off: float = 0.5
    z_sigma: float = 300.0  # 0 puts every emitter in the focal plane
    max_brightness: float = 5000.0
    width: int = 64
    height: int = 64
    n_frames: int = 100
    focal_plane_z: float = 0.0
    pixel_size: float = 100.0
    brightness_range: tuple[float, float] = (0.1, 1.0)
    constant_brightness: bool = False

    def __post_init__(self):
        if not 0 <= self.p_on <= 1:
            raise ValueError("p_on must lie in [0, 1]")
        if not 0 < self.p_off <= 1:
            raise ValueError("p_off must lie in (0, 1]")
        if not self.z_sigma >= 0:
            raise ValueError("z_sigma must be non-negative")
        if not self.max_brightness > 0:
            raise ValueError("max_brightness must be positive")
        lo, hi = self.brightness_range
        if not 0 < lo <= hi:
            raise ValueError("brightness_range must satisfy 0 < lo <= hi")
        object.__setattr__(self, "brightness_range", (float(lo), float(hi)))

    @property
    def grid(self):
        return PixelGrid(self.height, self.width, self.pixel_size)


@dataclass(frozen=True, eq=False)
class EmitterTrack:
    """One fluorophore's on-interval ``[t_start, t_end]`` (inclusive).

    The position at frame ``t_start + k`` is
    ``(x + k * drift_x, y, z + k * drift_z)``; drift is zero unless
    :func:`apply_lls_drift` was applied.
    """

    id: int
    t_start: int
    t_end: int
    x: float
    y: float
    z: float
    photons_per_frame: np.ndarray
    drift_x: float = 0.0
    drift_z: float = 0.0

    def __post_init__(self):
        if self.t_end < self.t_start:
            raise ValueError("t_end must not precede t_start")
        photons = np.asarray(self.photons_per_frame, dtype=float)
        if len(photons) != self.n_frames:
            raise ValueError("need one photon value per active frame")
        object.__setattr__(self, "photons_per_frame", photons)

    @property
    def n_frames(self):
        return self.t_end - self.t_start + 1

    def frames(self):
        return np.arange(self.t_start, self.t_end + 1)

    def positions(self):
        """``(n_frames, 3)`` array of per-frame positions in nm."""
        k = np.arange(self.n_frames)
        return np.stack([
            self.x + k * self.drift_x,
            np.full(self.n_frames, self.y),
            self.z + k * self.drift_z,
        ], axis=1)


@dataclass(frozen=True, eq=False)
class FrameStack:
    frames: np.ndarray
    pixel_size: float = 100.0
    camera: str = ""

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float32)
        if frames.ndim != 3:
            raise ValueError("frames must be (n_frames, height, width)")
        object.__setattr__(self, "frames", frames)

    @property
    def n_frames(self):
        return self.frames.shape[0]

    @property
    def shape(self):
        return self.frames.shape[1:]

    @property
    def grid(self):
        return PixelGrid(self.shape[0], self.shape[1], self.pixel_size)


def sample_tracks(cfg, rng):
    """Draw emitter tracks from the blinking prior."""
    n_pix = cfg.width * cfg.height
    lo, hi = cfg.brightness_range
    tracks = []
    for t in range(cfg.n_frames):
        n_new = rng.binomial(n_pix, cfg.p_on)
        if n_new == 0:
            continue
        pix = np.sort(rng.choice(n_pix, size=n_new, replace=False))
        rows, cols = np.divmod(pix, cfg.width)
        lifetimes = rng.geometric(cfg.p_off, size=n_new)
        xs = (cols + rng.random(n_new)) * cfg.pixel_size
        ys = (rows + rng.random(n_new)) * cfg.pixel_size
        zs = rng.normal(cfg.focal_plane_z, cfg.z_sigma, size=n_new)
        for i in range(n_new):
            t_end = min(t + int(lifetimes[i]) - 1, cfg.n_frames - 1)
            n_on = t_end - t + 1
            if cfg.constant_brightness:
                photons = np.full(n_on, rng.uniform(lo, hi) * cfg.max_brightness)
            else:
                photons = rng.uniform(lo, hi, size=n_on) * cfg.max_brightness
            tracks.append(EmitterTrack(len(tracks), t, t_end, xs[i], ys[i], zs[i], photons))
    return tracks


def apply_lls_drift(tracks, dx_per_frame, dz_per_frame):
    """Shift each track by ``k * (dx, 0, dz)`` on its ``k``-th active frame."""
    return [
        replace(tr, drift_x=tr.drift_x + dx_per_frame, drift_z=tr.drift_z + dz_per_frame)
        for tr in tracks
    ]


def truth_table(tracks):
    """One row per (track, active frame), sorted by frame then id."""
    n = sum(tr.n_frames for tr in tracks)
    out = empty_truth(n)
    i = 0
    for tr in tracks:
        j = i + tr.n_frames
        pos = tr.positions()
        out["frame"][i:j] = tr.frames()
        out["id"][i:j] = tr.id
        out["x"][i:j], out["y"][i:j], out["z"][i:j] = pos.T
        out["photons"][i:j] = tr.photons_per_frame
        i = j
    return out[np.lexsort((out["id"], out["frame"]))]


def emitters_by_frame(truth, n_frames):
    """Split a truth table into per-frame ``(n, 4)`` arrays of x, y, z, photons."""
    cols = np.stack([truth["x"], truth["y"], truth["z"], truth["photons"]], axis=1)
    bounds = np.searchsorted(truth["frame"], np.arange(n_frames + 1))
    return [cols[bounds[t]:bounds[t + 1]] for t in range(n_frames)]


def mean_frame(emitters, psf, background, grid, render_radius=None):
    """Expected image: the emitters' PSFs plus a constant background.

    Parameters
    ----------
    emitters : array_like, shape (n, 4)
        Rows of ``x, y, z, photons`` (nm, nm, nm, counts).
    background : float
        Constant added to every pixel, in counts (baseline included).
    render_radius : int, optional
        Evaluate each PSF only within this many pixels of the emitter.
        ``None`` renders over the whole grid.
    """
    image = np.zeros(grid.shape)
    for x, y, z, photons in np.asarray(emitters, dtype=float).reshape(-1, 4):
        if render_radius is None:
            image += render_patch(psf, x, y, z, photons, grid)
            continue
        col = int(np.floor((x - grid.x0) / grid.pixel_size))
        row = int(np.floor((y - grid.y0) / grid.pixel_size))
        r0, r1 = max(row - render_radius, 0), min(row + render_radius + 1, grid.height)
        c0, c1 = max(col - render_radius, 0), min(col + render_radius + 1, grid.width)
        if r0 >= r1 or c0 >= c1:
            continue
        sub = grid.subgrid(r0, c0, r1 - r0, c1 - c0)
        image[r0:r1, c0:c1] += render_patch(psf, x, y, z, photons, sub)
    return image + background


def sample_emccd(mean, camera, rng):
    return camera.sample(mean, rng)


def sample_scmos(mean, camera, rng):
    return camera.sample(mean, rng)


def frame_rng(seed, frame):
    return np.random.default_rng([int(seed), 1, int(frame)])


def simulate_stack(cfg, psf, camera, seed, threads=None, lls_drift=None, render_radius=None):
    """Simulate a frame stack and its ground truth.

    Returns
    -------
    stack : FrameStack
    truth : ndarray of ``TRUTH_DTYPE``
    """
    tracks = sample_tracks(cfg, np.random.default_rng(int(seed)))
    if lls_drift is not None:
        tracks = apply_lls_drift(tracks, *lls_drift)
    truth = truth_table(tracks)
    per_frame = emitters_by_frame(truth, cfg.n_frames)
    grid = cfg.grid
    bg = camera.expected_background()

    def one_frame(t):
        mean = mean_frame(per_frame[t], psf, bg, grid, render_radius)
        return camera.sample(mean, frame_rng(seed, t))

    frames = ordered_map(one_frame, range(cfg.n_frames), threads)
    if frames:
        frames = np.stack(frames)
    else:
        frames = np.zeros((0, cfg.height, cfg.width))
    tag = type(camera).__name__.replace("Camera", "").lower()
    return FrameStack(frames, cfg.pixel_size, tag), truth

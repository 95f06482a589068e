"""
Turning probability maps into localizations and cleaning localization tables.
"""

from __future__ import annotations

import math
import warnings

import numpy as np
from scipy import ndimage

from .table import empty_locs, sort_by_frame, var_tot

NMS_PEAK_THRESHOLD = 0.3
NMS_FINAL_THRESHOLD = 0.7
CDF_MIN_BIN = 10

_RING = np.ones((3, 3), dtype=bool)
_RING[1, 1] = False
_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=float)


def nms_detect(p, peak_threshold=NMS_PEAK_THRESHOLD, final_threshold=NMS_FINAL_THRESHOLD):
    """Detections from a probability map.

    A candidate is a pixel above ``peak_threshold`` that is strictly greater
    than all 8 neighbours (plateaus give no candidate). Its score is its own
    probability plus that of its 4 edge neighbours; candidates scoring above
    ``final_threshold`` are kept. Neighbour mass is read, not removed, so two
    adjacent candidates may share it.

    Returns
    -------
    pixels : ndarray, shape (n, 2)
        ``(row, col)`` of each detection, in row-major order.
    scores : ndarray, shape (n,)
    """
    p = np.asarray(p, dtype=float)
    neighbour_max = ndimage.maximum_filter(p, footprint=_RING, mode="constant", cval=-np.inf)
    candidate = (p > peak_threshold) & (p > neighbour_max)
    aggregate = ndimage.correlate(p, _CROSS, mode="constant", cval=0.0)
    keep = candidate & (aggregate > final_threshold)
    rows, cols = np.nonzero(keep)
    return np.stack([rows, cols], axis=1), aggregate[rows, cols]


def maps_to_table(maps, pixels, scores, frame=0):
    """One localization per detected pixel from the maps' offset, brightness
    and sigma channels. ``prob`` is the aggregated score clamped to 1."""
    pixels = np.asarray(pixels, dtype=int).reshape(-1, 2)
    rows, cols = pixels[:, 0], pixels[:, 1]
    out = empty_locs(len(pixels))
    ps = maps.pixel_size
    out["frame"] = frame
    out["x"] = (cols + 0.5) * ps + maps.dx[rows, cols]
    out["y"] = (rows + 0.5) * ps + maps.dy[rows, cols]
    out["z"] = maps.dz[rows, cols]
    out["photons"] = maps.alpha[rows, cols]
    out["prob"] = np.minimum(np.asarray(scores, dtype=float), 1.0)
    out["sig_x"] = maps.sig_x[rows, cols]
    out["sig_y"] = maps.sig_y[rows, cols]
    out["sig_z"] = maps.sig_z[rows, cols]
    return out


def _mid_ecdf(values):
    """Empirical CDF evaluated at each value, ties mapped to the middle of
    their step so the result lies strictly inside (0, 1)."""
    s = np.sort(values)
    below = np.searchsorted(s, values, side="left")
    upto = np.searchsorted(s, values, side="right")
    return (below + upto) / (2.0 * len(values))


def cdf_debias(table, n_bins=20, pixel_size=100.0):
    """Flatten the distribution of lateral in-pixel offsets.

    Rows are split into ``n_bins`` equal-count bins by ``var_tot``; within a
    bin each lateral offset is replaced by ``(F(offset) - 0.5) * pixel_size``
    where ``F`` is the bin's empirical CDF. ``z`` and all other columns are
    untouched. Bins with fewer than 10 rows are left as they are (with a
    warning).
    """
    if len(table) == 0:
        raise ValueError("cannot de-bias an empty table")
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    out = table.copy()
    order = np.argsort(var_tot(table), kind="stable")
    skipped = []
    for b, idx in enumerate(np.array_split(order, n_bins)):
        if len(idx) < CDF_MIN_BIN:
            if len(idx):
                skipped.append(b)
            continue
        for axis in ("x", "y"):
            v = table[axis][idx]
            center = (np.floor(v / pixel_size) + 0.5) * pixel_size
            offset = v - center
            out[axis][idx] = center + (_mid_ecdf(offset) - 0.5) * pixel_size
    if skipped:
        warnings.warn(f"cdf_debias: bins {skipped} have < {CDF_MIN_BIN} rows; left unchanged")
    return out


def filter_by_sigma(table, drop_fraction):
    """Drop the ``ceil(drop_fraction * n)`` rows with the largest ``var_tot``."""
    if not 0 <= drop_fraction < 1:
        raise ValueError("drop_fraction must lie in [0, 1)")
    n = len(table)
    n_drop = math.ceil(drop_fraction * n)
    if n_drop == 0:
        return table.copy()
    keep = np.sort(np.argsort(var_tot(table), kind="stable")[: n - n_drop])
    return table[keep]


def _link_chains(table, radius):
    """Greedy frame-to-frame linking; returns a chain label per row."""
    labels = np.full(len(table), -1)
    frames = table["frame"]
    xy = np.stack([table["x"], table["y"]], axis=1)
    bounds = np.flatnonzero(np.diff(frames)) + 1
    groups = np.split(np.arange(len(table)), bounds)
    prev_idx = np.array([], dtype=int)
    prev_frame = None
    n_chains = 0
    for idx in groups:
        if len(idx) == 0:
            continue
        frame = frames[idx[0]]
        if prev_frame is not None and frame == prev_frame + 1 and len(prev_idx):
            d = np.linalg.norm(xy[prev_idx][:, None, :] - xy[idx][None, :, :], axis=-1)
            pairs = np.argwhere(d <= radius)
            # closest pairs first; ties by row order
            pairs = pairs[np.lexsort((pairs[:, 1], pairs[:, 0], d[pairs[:, 0], pairs[:, 1]]))]
            used_prev, used_cur = set(), set()
            for i, j in pairs:
                if i in used_prev or j in used_cur:
                    continue
                used_prev.add(i)
                used_cur.add(j)
                labels[idx[j]] = labels[prev_idx[i]]
        for j in idx:
            if labels[j] < 0:
                labels[j] = n_chains
                n_chains += 1
        prev_idx, prev_frame = idx, frame
    return labels, n_chains


def _merge(table, labels, n_chains):
    out = empty_locs(n_chains)
    first = np.full(n_chains, len(table))
    np.minimum.at(first, labels, np.arange(len(table)))
    out["frame"] = table["frame"][first]
    out["prob"] = table["prob"][first]
    np.add.at(out["photons"], labels, table["photons"])
    for axis, sig in (("x", "sig_x"), ("y", "sig_y"), ("z", "sig_z")):
        s = table[sig]
        if np.all(s > 0):
            w = 1.0 / s**2
            wsum = np.zeros(n_chains)
            num = np.zeros(n_chains)
            np.add.at(wsum, labels, w)
            np.add.at(num, labels, w * table[axis])
            out[axis] = num / wsum
            out[sig] = 1.0 / np.sqrt(wsum)
        else:
            # no usable uncertainties: plain mean, sigma of the first row
            cnt = np.bincount(labels, minlength=n_chains)
            out[axis] = np.bincount(labels, weights=table[axis], minlength=n_chains) / cnt
            out[sig] = s[first]
    return out[np.argsort(first, kind="stable")]


def group_localizations(table, radius):
    """Merge localizations of one emitter across consecutive frames.

    Rows in frame ``t`` and ``t+1`` within ``radius`` (lateral, nm) are linked
    greedily by smallest distance. Each chain becomes one row at its first
    frame with inverse-variance weighted coordinates, ``(sum sigma^-2)^-1/2``
    sigmas and summed photons. Linking is repeated on the merged table until
    nothing changes, so the result is a fixed point of the operation.
    """
    if not radius > 0:
        raise ValueError("radius must be positive")
    current = sort_by_frame(table)
    while True:
        labels, n_chains = _link_chains(current, radius)
        if n_chains == len(current):
            return current
        current = sort_by_frame(_merge(current, labels, n_chains))

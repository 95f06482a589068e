"""Localization and ground-truth tables as numpy structured arrays."""

import numpy as np

LOC_DTYPE = [
    ("frame", "i8"),
    ("x", "f8"),
    ("y", "f8"),
    ("z", "f8"),
    ("photons", "f8"),
    ("prob", "f8"),
    ("sig_x", "f8"),
    ("sig_y", "f8"),
    ("sig_z", "f8"),
]
TRUTH_DTYPE = [
    ("frame", "i8"),
    ("id", "i8"),
    ("x", "f8"),
    ("y", "f8"),
    ("z", "f8"),
    ("photons", "f8"),
]


def empty_locs(n=0):
    return np.zeros(n, dtype=LOC_DTYPE)


def empty_truth(n=0):
    return np.zeros(n, dtype=TRUTH_DTYPE)


def var_tot(table):
    """``sqrt(sig_x**2 + sig_y**2 + sig_z**2)`` per row."""
    return np.sqrt(table["sig_x"] ** 2 + table["sig_y"] ** 2 + table["sig_z"] ** 2)


def truth_to_locs(truth):
    """Promote a ground-truth table to the localization layout (prob 1, sigma 0)."""
    out = empty_locs(len(truth))
    for name in ("frame", "x", "y", "z", "photons"):
        out[name] = truth[name]
    out["prob"] = 1.0
    return out


def sort_by_frame(table):
    return table[np.argsort(table["frame"], kind="stable")]

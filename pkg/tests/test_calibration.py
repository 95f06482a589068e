import dataclasses
import math

import numpy as np
import pytest

from smlmforge.calibration import (
    BeadStack,
    FitOptions,
    bead_negloglik,
    detect_beads,
    fit_psf,
    simulate_bead_stack,
)
from smlmforge.noise import CameraEmccd
from smlmforge.psf import PsfAsParams, PsfDhParams, PsfModel, params_to_vector
from smlmforge.simulator import FrameStack

CAM = CameraEmccd(background=20.0)
AS = PsfModel(PsfAsParams.from_widths(120.0, 400.0))
DH = PsfModel(PsfDhParams(a=1e-4, b=math.pi / 1000, c=0.0, d=300.0))
Z = np.arange(-600.0, 601.0, 50.0)


def _stack(psf=AS, xy=((1630.0, 1570.0),), brightness=20000.0, shape=(32, 32), seed=0):
    return simulate_bead_stack(psf, xy, Z, brightness, CAM, shape, seed=seed)


def _perturbed(psf, factor):
    vec = params_to_vector(psf.parametric) * factor
    return PsfModel(type(psf.parametric)(*vec))


def test_bead_stack_validation():
    with pytest.raises(ValueError):
        BeadStack(FrameStack(np.zeros((5, 8, 8))), 0.0, 0.0, CAM)
    with pytest.raises(ValueError):
        BeadStack(FrameStack(np.zeros((2, 8, 8))), 0.0, 10.0, CAM)
    assert np.array_equal(BeadStack(FrameStack(np.zeros((3, 8, 8))), -100.0, 50.0, CAM).z_offsets, [-100, -50, 0])


def test_detect_single_bead():
    xy = detect_beads(_stack())
    assert len(xy) == 1
    assert np.hypot(xy[0][0] - 1630.0, xy[0][1] - 1570.0) < 50.0


def test_detect_two_beads():
    truth = np.array([[1050.0, 1550.0], [2050.0, 1550.0]])
    xy = np.array(sorted(detect_beads(_stack(xy=truth, shape=(32, 32)))))
    assert xy.shape == (2, 2)
    assert np.all(np.hypot(*(xy - truth).T) < 50.0)


def test_detect_blank_stack():
    blank = _stack(brightness=0.0)
    assert detect_beads(blank, threshold=1e6) == []


def test_negloglik_minimal_at_truth():
    bs = _stack()
    bright = np.full((1, len(Z)), 20000.0)
    xy = [[1630.0, 1570.0]]
    base = bead_negloglik(bs, xy, AS, bright, 20.0)
    assert np.isfinite(base)
    names = AS.parametric.names
    for i, n in enumerate(names):
        vec = params_to_vector(AS.parametric)
        vec[i] *= 1.1
        worse = PsfModel(PsfAsParams(*vec))
        assert bead_negloglik(bs, xy, worse, bright, 20.0) > base, n
    assert bead_negloglik(bs, [[1630.0 * 1.1, 1570.0]], AS, bright, 20.0) > base
    assert bead_negloglik(bs, xy, AS, bright * 1.1, 20.0) > base
    assert bead_negloglik(bs, xy, AS, bright, 22.0) > base


def test_negloglik_factorizes_over_beads():
    one = _stack(shape=(32, 32))
    frames = np.concatenate([one.stack.frames, one.stack.frames], axis=2)
    two = BeadStack(FrameStack(frames), one.z0, one.dz, CAM)
    bright = np.full((1, len(Z)), 20000.0)
    single = bead_negloglik(one, [[1630.0, 1570.0]], AS, bright, 20.0)
    double = bead_negloglik(two, [[1630.0, 1570.0], [1630.0 + 3200.0, 1570.0]], AS, np.vstack([bright, bright]), 20.0)
    assert double == pytest.approx(2 * single, rel=1e-12)


def test_negloglik_infinite_outside_support():
    bs = _stack()
    assert bead_negloglik(bs, [[1630.0, 1570.0]], AS, np.zeros((1, len(Z))), -CAM.background - 1.0) == np.inf


@pytest.mark.parametrize("psf", [AS, DH], ids=["as", "dh"])
def test_negloglik_gradient(psf, rng):
    bs = _stack(psf=psf)
    for _ in range(3):
        xy = np.array([[1630.0, 1570.0]]) + rng.normal(0, 20, (1, 2))
        model = _perturbed(psf, 1 + rng.uniform(-0.05, 0.05, 4))
        bright = 20000.0 * rng.uniform(0.8, 1.2, (1, len(Z)))
        bg = 20.0 * rng.uniform(0.8, 1.2)
        nll, g = bead_negloglik(bs, xy, model, bright, bg, grad=True)

        def f(xy=xy, model=model, bright=bright, bg=bg):
            return bead_negloglik(bs, xy, model, bright, bg)

        checks = []
        for k in range(2):
            h = 1e-3
            e = np.zeros_like(xy)
            e[0, k] = h
            checks.append(((f(xy=xy + e) - f(xy=xy - e)) / (2 * h), g["bead_xy"][0, k]))
        vec = params_to_vector(model.parametric)
        for i in range(4):
            h = 1e-5 * abs(vec[i]) if vec[i] != 0 else 1e-6
            up, dn = vec.copy(), vec.copy()
            up[i] += h
            dn[i] -= h
            m_up, m_dn = PsfModel(type(model.parametric)(*up)), PsfModel(type(model.parametric)(*dn))
            checks.append(((f(model=m_up) - f(model=m_dn)) / (2 * h), g["shape"][i]))
        e = np.zeros_like(bright)
        e[0, 7] = 1e-2
        checks.append(((f(bright=bright + e) - f(bright=bright - e)) / 2e-2, g["brightness"][0, 7]))
        checks.append(((f(bg=bg + 1e-4) - f(bg=bg - 1e-4)) / 2e-4, g["background"]))
        for fd, an in checks:
            assert an == pytest.approx(fd, rel=1e-4, abs=1e-6)


def test_fit_recovers_astigmatic_bead():
    bs = _stack()
    init = _perturbed(AS, np.array([1.05, 0.95, 1.05, 0.95]))
    res = fit_psf(bs, init, bead_xys=[[1600.0, 1600.0]])
    assert res.converged
    assert np.hypot(*(res.bead_xy[0] - [1630.0, 1570.0])) < 1.0
    fitted, true = params_to_vector(res.params), params_to_vector(AS.parametric)
    assert np.all(np.abs(fitted / true - 1) < 0.02)
    trace = np.array(res.trace)
    assert np.all(np.diff(trace) <= 1e-9 * np.abs(trace[:-1]))
    assert res.residuals.shape == (1,)


def test_fit_from_truth_does_not_get_worse():
    bs = _stack(seed=4)
    res = fit_psf(bs, AS, bead_xys=[[1630.0, 1570.0]])
    assert res.trace[-1] <= res.trace[0]
    assert res.nll <= res.trace[0]


def test_fit_recovers_double_helix_radius():
    bs = _stack(psf=DH, seed=2)
    init = PsfModel(dataclasses.replace(DH.parametric, d=280.0, a=1.1e-4))
    res = fit_psf(bs, init)
    assert res.params.d == pytest.approx(300.0, rel=0.02)
    assert np.hypot(*(res.bead_xy[0] - [1630.0, 1570.0])) < 1.0


def test_fit_error_shrinks_with_brightness():
    init = _perturbed(AS, np.array([1.05, 0.95, 1.05, 0.95]))
    errs = []
    for b in (500.0, 5000.0, 50000.0):
        e = []
        for seed in range(3):
            res = fit_psf(_stack(brightness=b, seed=seed), init, bead_xys=[[1600.0, 1600.0]])
            e.append(np.max(np.abs(params_to_vector(res.params) / params_to_vector(AS.parametric) - 1)))
        errs.append(np.mean(e))
    assert errs[0] > errs[1] > errs[2]


def test_fit_with_pixmap_runs_and_stays_small():
    bs = _stack(seed=3)
    res = fit_psf(bs, AS, FitOptions(fit_pixmap=True, max_iter=200), bead_xys=[[1630.0, 1570.0]])
    assert res.psf.pixmap is not None
    assert np.abs(res.psf.pixmap.values).max() < 0.1
    assert np.hypot(*(res.bead_xy[0] - [1630.0, 1570.0])) < 2.0


def test_overlapping_windows_rejected():
    bs = _stack(shape=(32, 32))
    with pytest.raises(ValueError, match="overlap"):
        fit_psf(bs, AS, bead_xys=[[1600.0, 1600.0], [1900.0, 1600.0]])
    with pytest.raises(ValueError):
        fit_psf(bs, AS, bead_xys=[[100.0, 100.0]])

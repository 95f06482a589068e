import math

import numpy as np
import pytest

from smlmforge.localizer import (
    Candidate,
    LocalizerConfig,
    detect_candidates,
    fit_roi,
    fit_roi_multi,
    fits_to_table,
    localize_frame,
    localize_stack,
)
from smlmforge.metrics import evaluate
from smlmforge.noise import CameraEmccd, CameraScmos
from smlmforge.psf import PixelGrid, Psf2DParams, PsfAsParams, PsfDhParams, PsfModel
from smlmforge.simulator import FrameStack, PriorConfig, mean_frame, simulate_stack
from smlmforge.table import truth_to_locs

AS = PsfModel(PsfAsParams.from_widths(120.0, 400.0))
CAM = CameraEmccd()
GRID = PixelGrid(21, 21, 100.0)
TRUE = (1040.0, 1070.0, 100.0, 5000.0)


def frame_with(emitters, rng, grid=GRID, cam=CAM, psf=AS):
    return cam.sample(mean_frame(emitters, psf, cam.expected_background(), grid), rng)


def test_background_frame_rarely_triggers(rng):
    cfg = LocalizerConfig(threshold=6.0)
    mean = np.full((32, 32), CAM.expected_background())
    empty = sum(not detect_candidates(CAM.sample(mean, rng), cfg, camera=CAM) for _ in range(100))
    assert empty >= 99


def test_single_emitter_one_candidate(rng):
    cands = detect_candidates(frame_with([TRUE], rng), camera=CAM)
    assert len(cands) == 1
    assert abs(cands[0].col - 10) <= 1 and abs(cands[0].row - 10) <= 1
    assert not cands[0].crowded


def test_two_emitters_two_candidates(rng):
    grid = PixelGrid(32, 24, 100.0)
    f = frame_with([[950.0, 1050.0, 0.0, 5000.0], [2150.0, 1050.0, 0.0, 5000.0]], rng, grid)
    cands = detect_candidates(f, camera=CAM)
    assert sorted(c.col for c in cands) == [9, 21]


def test_flat_frame_has_no_candidates():
    assert detect_candidates(np.full((10, 10), 150.0)) == []


def test_fit_high_snr_single_emitter(rng):
    fit = fit_roi(frame_with([TRUE], rng), Candidate(0, 10, 10, 1.0), AS, CAM)
    assert fit.converged
    assert abs(fit.x - TRUE[0]) < 10 and abs(fit.y - TRUE[1]) < 10 and abs(fit.z - TRUE[2]) < 60
    assert fit.photons == pytest.approx(TRUE[3], rel=0.1)
    assert fit.background == pytest.approx(CAM.background, rel=0.2)
    assert 0 < fit.sig_x < 10 and 0 < fit.sig_y < 10 and 0 < fit.sig_z < 40
    assert fit.llr > 1000


def test_fit_from_truth_is_no_worse(rng):
    f = frame_with([TRUE], rng)
    init = np.array([*TRUE, CAM.background])
    fit = fit_roi(f, Candidate(0, 10, 10, 1.0), AS, CAM, cfg=LocalizerConfig(max_iter=1), init=init)
    start_nll = fit.nll
    refit = fit_roi(f, Candidate(0, 10, 10, 1.0), AS, CAM, init=init)
    assert refit.converged and refit.nll <= start_nll + 1e-9


def _repeat_fits(photons, n, rng):
    em = [(TRUE[0], TRUE[1], TRUE[2], photons)]
    mean = mean_frame(em, AS, CAM.expected_background(), GRID)
    fits = [fit_roi(CAM.sample(mean, rng), Candidate(0, 10, 10, 1.0), AS, CAM) for _ in range(n)]
    assert all(f.converged for f in fits)
    return np.array([(f.x, f.y, f.z) for f in fits]), np.array([(f.sig_x, f.sig_y, f.sig_z) for f in fits])


def test_uncertainty_is_calibrated(rng):
    est, sig = _repeat_fits(5000.0, 200, rng)
    ratio = est.std(axis=0, ddof=1) / sig.mean(axis=0)
    assert np.all((ratio > 0.75) & (ratio < 1.33)), ratio


def test_precision_scales_with_photons(rng):
    lo, _ = _repeat_fits(2000.0, 150, rng)
    hi, _ = _repeat_fits(8000.0, 150, rng)
    ratio = lo[:, :2].std(axis=0, ddof=1) / hi[:, :2].std(axis=0, ddof=1)
    # background noise makes the gain a bit larger than sqrt(4)
    assert np.all((ratio > 2 * 0.85) & (ratio < 2 * 1.3)), ratio


def test_translation_equivariance(rng):
    seed = int(rng.integers(1 << 30))
    a = fit_roi(frame_with([TRUE], np.random.default_rng(seed)), Candidate(0, 10, 10, 1.0), AS, CAM)
    shifted = (TRUE[0] + 100.0, TRUE[1] + 100.0, *TRUE[2:])
    b = fit_roi(frame_with([shifted], np.random.default_rng(seed)), Candidate(0, 11, 11, 1.0), AS, CAM)
    assert abs(b.x - a.x - 100.0) < 2 * a.sig_x
    assert abs(b.y - a.y - 100.0) < 2 * a.sig_y


def test_roi_at_border_is_truncated(rng):
    em = [(120.0, 130.0, 0.0, 5000.0)]
    fit = fit_roi(frame_with(em, rng), Candidate(0, 1, 1, 1.0), AS, CAM)
    assert fit.truncated
    assert fit.converged and abs(fit.x - 120.0) < 20 and abs(fit.y - 130.0) < 20


def test_failed_fit_reports_infinite_sigma(rng):
    mean = np.full(GRID.shape, CAM.expected_background())
    fit = fit_roi(CAM.sample(mean, rng), Candidate(0, 10, 10, 1.0), AS, CAM)
    if not fit.converged:
        assert math.isinf(fit.sig_x) and math.isinf(fit.sig_y)
    assert fit.llr < 25


def test_close_pair_is_split(rng):
    em = [(1000.0, 1050.0, 0.0, 5000.0), (1250.0, 1050.0, 0.0, 5000.0)]
    fits = [f for f in fit_roi_multi(frame_with(em, rng), Candidate(0, 10, 11, 1.0), AS, CAM) if f.converged]
    assert len(fits) == 2
    xs = sorted(f.x for f in fits)
    assert abs(xs[0] - 1000.0) < 20 and abs(xs[1] - 1250.0) < 20


@pytest.mark.parametrize("psf,z", [
    (PsfModel(PsfDhParams(a=1e-4, b=math.pi / 1000, c=0.0, d=300.0)), 150.0),
    (PsfModel(Psf2DParams(a1=1.0, a2=0.0, b1=1 / (2 * 120.0**2), b2=1 / (2 * 250.0**2))), 0.0),
], ids=["dh", "2d"])
def test_other_psfs_localize(psf, z, rng):
    grid = PixelGrid(30, 30, 100.0)
    f = frame_with([(1530.0, 1480.0, z, 5000.0)], rng, grid, psf=psf)
    fits = localize_frame(f, psf, CAM)
    assert len(fits) == 1
    assert abs(fits[0].x - 1530.0) < 15 and abs(fits[0].y - 1480.0) < 15
    if psf.kind == "dh":
        assert abs(fits[0].z - z) < 50


def test_scmos_camera(rng):
    cam = CameraScmos(baseline=100.0, gain=1.0, var_map=rng.uniform(2, 10, GRID.shape), background=30.0)
    fits = localize_frame(frame_with([TRUE], rng, cam=cam), AS, cam)
    assert len(fits) == 1 and abs(fits[0].x - TRUE[0]) < 10


def test_localize_empty_stack():
    stack = FrameStack(np.zeros((0, 16, 16), dtype=np.float32))
    out = localize_stack(stack, AS, CAM)
    assert len(out) == 0


def test_localize_stack_sparse_and_deterministic():
    cfg = PriorConfig(p_on=1e-4, p_off=0.5, width=48, height=48, n_frames=40, brightness_range=(1.0, 1.0))
    stack, truth = simulate_stack(cfg, AS, CAM, seed=11)
    a = localize_stack(stack, AS, CAM)
    b = localize_stack(stack, AS, CAM, threads=3)
    assert np.array_equal(a, b)
    assert np.all(np.isfinite(a["x"])) and np.all(np.isfinite(a["sig_x"]))
    assert np.all(a["prob"] == 1.0)
    rep = evaluate(a, truth_to_locs(truth))
    assert rep["jaccard"] > 90 and rep["rmse_lateral"] < 15


def test_fits_to_table_layout(rng):
    fits = localize_frame(frame_with([TRUE], rng), AS, CAM, frame_index=4)
    t = fits_to_table(fits)
    assert t["frame"].tolist() == [4] and t["prob"].tolist() == [1.0]

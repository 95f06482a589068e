import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from smlmforge.noise import CameraEmccd, CameraScmos, camera_from_dict, camera_to_dict


def test_emccd_eta():
    assert CameraEmccd(em_gain=300, e_per_count=45).eta == pytest.approx(13.333333333333334, rel=1e-15)


def test_emccd_moments(rng):
    cam = CameraEmccd()
    mean = np.full(1_000_000, 180.0)
    s = cam.sample(mean, rng)
    assert s.mean() == pytest.approx(180.0, rel=5e-3)
    assert s.var() == pytest.approx(cam.eta * 80.0, rel=1e-2)
    assert s.min() > cam.baseline


def test_scmos_moments(rng):
    cam = CameraScmos(baseline=100.0, gain=2.0, var_map=9.0)
    s = cam.sample(np.full(1_000_000, 160.0), rng)
    assert s.mean() == pytest.approx(160.0, rel=5e-3)
    assert s.var() == pytest.approx(9.0 + 2.0 * 60.0, rel=1e-2)


def test_scmos_limit_without_read_noise(rng):
    cam = CameraScmos(baseline=0.0, gain=1.5, var_map=0.0)
    s = cam.sample(np.full(1_000_000, 40.0), rng)
    assert s.var() == pytest.approx(1.5 * 40.0, rel=1e-2)


def test_sampling_rejects_invalid_means(rng):
    with pytest.raises(ValueError):
        CameraEmccd().sample(np.array([100.0, 150.0]), rng)
    with pytest.raises(ValueError):
        CameraScmos().sample(np.array([0.0, 150.0]), rng)
    # eta <= 0: mean below baseline with no read noise
    with pytest.raises(ValueError):
        CameraScmos(baseline=100.0, var_map=0.0).sample(np.array([50.0]), rng)
    with pytest.raises(ValueError):
        CameraScmos(var_map=np.ones((2, 2))).sample(np.full((3, 3), 150.0), rng)


def test_invalid_cameras():
    with pytest.raises(ValueError):
        CameraEmccd(em_gain=0.0)
    with pytest.raises(ValueError):
        CameraEmccd(background=-1.0)
    with pytest.raises(ValueError):
        CameraScmos(gain=0.0)
    with pytest.raises(ValueError):
        CameraScmos(var_map=np.array([1.0, -1.0]))


def test_emccd_loglik_matches_scipy_gamma():
    cam = CameraEmccd()
    y = np.array([101.0, 150.0, 400.0, 1200.0])
    m = np.array([120.0, 150.0, 300.0, 1000.0])
    ref = stats.gamma.logpdf(y - cam.baseline, (m - cam.baseline) / cam.eta, scale=cam.eta)
    assert np.allclose(cam.loglik(y, m), ref, rtol=1e-12)
    assert cam.loglik(150.0, 100.0) == -np.inf


def test_scmos_loglik_matches_scipy_gamma():
    cam = CameraScmos(baseline=100.0, gain=1.3, var_map=np.array([2.0, 5.0, 0.5]))
    y = np.array([140.0, 160.0, 130.0])
    m = np.array([150.0, 170.0, 125.0])
    var = cam.var_map + 1.3 * (m - 100.0)
    ref = stats.gamma.logpdf(y, m**2 / var, scale=var / m)
    assert np.allclose(cam.loglik(y, m), ref, rtol=1e-12)


@pytest.mark.parametrize("cam", [CameraEmccd(), CameraScmos(gain=1.7, var_map=3.0)], ids=["emccd", "scmos"])
@given(st.floats(110, 2000), st.floats(0.5, 2.0))
def test_score_matches_finite_differences(cam, mean, ratio):
    y = cam.baseline + (mean - cam.baseline) * ratio
    h = 1e-5 * (mean - cam.baseline)
    fd = (cam.loglik(y, mean + h) - cam.loglik(y, mean - h)) / (2 * h)
    assert cam.dloglik_dmean(y, mean) == pytest.approx(fd, rel=1e-5, abs=1e-9)


@pytest.mark.parametrize("cam", [CameraEmccd(), CameraScmos(gain=1.7, var_map=3.0)], ids=["emccd", "scmos"])
def test_fisher_information_is_score_variance(cam, rng):
    mean = 180.0
    y = cam.sample(np.full(400_000, mean), rng)
    score = cam.dloglik_dmean(y, mean)
    assert abs(score.mean()) < 5 * score.std() / np.sqrt(len(y))
    assert cam.fisher_mean(mean) == pytest.approx(np.mean(score**2), rel=2e-2)


def test_scmos_window_slices_variance_map():
    var = np.arange(16.0).reshape(4, 4)
    cam = CameraScmos(var_map=var)
    w = cam.window(slice(1, 3), slice(2, 4))
    assert np.array_equal(w.var_map, var[1:3, 2:4])
    assert CameraEmccd().window(slice(0, 1), slice(0, 1)) == CameraEmccd()


def test_camera_dict_round_trip():
    for cam in (CameraEmccd(baseline=90, em_gain=100, e_per_count=10, background=5),
                CameraScmos(baseline=0, gain=2.0, var_map=np.ones((2, 3)), background=7)):
        back = camera_from_dict(camera_to_dict(cam))
        assert type(back) is type(cam)
        assert camera_to_dict(back) == camera_to_dict(cam)
    with pytest.raises(ValueError):
        camera_from_dict({"type": "ccd"})


def test_expected_background_includes_baseline():
    assert CameraEmccd(baseline=100, background=50).expected_background() == 150
    assert CameraScmos(baseline=100, background=20).expected_background() == 120

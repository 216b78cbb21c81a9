import numpy as np
import pytest

from misreg import loopsim as L
from misreg.errors import InputError, InstabilityError

P = L.LoopParams.from_rate(1000.0, 0.5, 0.0, 1)


def test_params_validation():
    with pytest.raises(InputError):
        L.LoopParams.from_rate(0.0, 0.5)
    with pytest.raises(InputError):
        L.LoopParams.from_rate(100.0, 0.5, 1.0)
    assert P.nyquist == pytest.approx(500.0)


def test_hold_low_frequency_limit():
    assert L.wfs_tf(np.array([0.0, 1e-9]), P) == pytest.approx([1.0, 1.0])


def test_rejection_plus_complementary_is_one():
    f = np.linspace(1, 500, 50)
    mu = L.open_loop_tf(f, P)
    assert np.allclose(L.rejection_tf(f, P) + mu / (1 + mu), 1.0)


def test_rho0_closed_form_and_domain():
    f = np.linspace(1, 500, 40)
    mu = np.conj(L.open_loop_tf(f, P))
    assert np.allclose(L.rho0(f, P), 2 * np.imag(mu / (1 + mu)))
    with pytest.raises(InputError):
        L.rho0(np.array([0.0]), P)
    with pytest.raises(InputError):
        L.rho0(np.array([600.0]), P)


def test_rho0_peak_moves_up_with_gain():
    # a faster loop pushes the correlation bump to higher frequency and makes it taller
    f = np.linspace(0.5, 250, 2000)
    lo = L.rho0(f, L.LoopParams.from_rate(500, 0.19))
    hi = L.rho0(f, L.LoopParams.from_rate(500, 0.4))
    assert f[np.argmax(hi)] > 1.5 * f[np.argmax(lo)]
    assert hi.max() > lo.max()
    # and flattens it at low f
    assert hi[0] < lo[0]


def test_frequency_response_matches_analytic():
    f = np.array([20.0, 150.0, 400.0])
    rej, _ = L.frequency_response(P, f, n_frames=2048)
    assert np.allclose(np.abs(rej), np.abs(L.rejection_tf(f, P)), rtol=0.01)


def test_leaky_integrator_fixed_point():
    p = L.LoopParams.from_rate(1000, 0.3, 0.05, 1)
    cmd, _ = L.integrate_loop(np.zeros((1, 1)), np.ones((600, 1)), p)
    assert cmd[-1, 0] == pytest.approx(0.3 / 0.05, rel=1e-6)


def test_instability_detected():
    u = np.random.default_rng(0).standard_normal((3000, 1))
    with pytest.raises(InstabilityError) as err:
        L.integrate_loop(np.ones((1, 1)), u, L.LoopParams.from_rate(1000, 2.5))
    assert err.value.frame is not None and err.value.frame > 0


def test_coupling_rotation_orthogonal():
    r = L.coupling_rotation(0.3)
    assert np.allclose(r @ r.T, np.eye(2))
    assert np.arctan2(r[1, 0], r[0, 0]) == pytest.approx(0.3)


def test_screen_structure_function_matches_von_karman():
    scr = L.make_frozen_flow(0.14, 25.0, (0, 0), 256, 3, pixel_scale=0.02, frame_period=1e-3)
    s = np.mean([L.make_frozen_flow(0.14, 25.0, (0, 0), 256, k, pixel_scale=0.02, frame_period=1e-3).screen
                 for k in range(6)], axis=0)
    assert s.shape == scr.screen.shape
    for lag in (2, 4, 8):
        d = np.mean([
            np.mean((sc.screen[:, lag:] - sc.screen[:, :-lag]) ** 2)
            for sc in (L.make_frozen_flow(0.14, 25.0, (0, 0), 256, k, pixel_scale=0.02, frame_period=1e-3)
                       for k in range(6))
        ])
        # a 5 m periodic screen loses some large-scale power; small lags stay within 15%
        assert d == pytest.approx(float(L.von_karman_structure(lag * 0.02, 0.14, 25.0)), rel=0.15)


def test_frozen_flow_translates():
    scr = L.make_frozen_flow(0.14, 25.0, (2.0, -1.0), 64, 1, pixel_scale=0.01, frame_period=0.005)
    f = scr.frames(0, 3)
    # 2 m/s * 5 ms = 1 pixel per frame in x, -0.5 in y: check x after 2 frames with y one pixel back
    assert np.allclose(f[2], np.roll(scr.screen, (-1, 2), axis=(0, 1)), atol=1e-10)
    w = scr.frames(1, 2, (10, 20))
    assert np.allclose(w, f[1:3, 10:30, 10:30], atol=1e-12)


def test_screen_size_check():
    with pytest.raises(InputError):
        L.make_frozen_flow(0.14, 25.0, (1, 0), 64, 0, pixel_scale=0.01, frame_period=1e-3, pupil_pixels=40)


def test_run_loop_noise_only_is_deterministic(chara):
    from misreg.experiments import ClosedLoopRig

    rig = ClosedLoopRig(chara, n_frames=256)
    a = rig.telemetry((0.2, 0), 5).commands
    b = rig.telemetry((0.2, 0), 5).commands
    assert np.array_equal(a, b) and a.shape == (256, chara.grid.n_act)


def test_fourier_mode_loop_shape():
    cmd = L.run_fourier_mode_loop(P, 0.1, 500, 0)
    assert cmd.shape == (500, 2) and np.all(np.isfinite(cmd))

import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from misreg import estimator2d as e2
from misreg.errors import InputError, NoOverlapError
from misreg.experiments import OpenLoopRig
from misreg.forward_model import Misreg, build_modal_im
from misreg.geometry import SubapertureGrid, ValidMask
from misreg.forward_model import ModalIM


def _im(sx, sy, mask):
    n = mask.shape[0]
    return ModalIM(sx, sy, ValidMask(mask, 0.5), SubapertureGrid(n, 1.0, mask, float(n)))


def _brute(a, b, d):
    ny, nx = a.shape[-2:]
    out = 0.0
    for y in range(ny):
        for x in range(nx):
            ys, xs = y - d[0], x - d[1]
            if 0 <= ys < ny and 0 <= xs < nx:
                out += float((a[..., y, x] * b[..., ys, xs]).sum())
    return out


def test_correlate_fft_matches_brute(rng):
    a = rng.standard_normal((2, 5, 6))
    b = rng.standard_normal((2, 5, 6))
    c = e2.correlate_fft(a, b)
    assert c.shape == (9, 11)
    for d in [(0, 0), (1, -2), (-4, 5), (3, 3)]:
        assert c[4 + d[0], 5 + d[1]] == pytest.approx(_brute(a, b, d), abs=1e-10)


def test_fft_map_matches_direct_oracle(rng):
    mask = np.ones((8, 8), bool)
    mask[0, 0] = mask[7, 3] = False
    meas = _im(rng.standard_normal((3, 8, 8)), rng.standard_normal((3, 8, 8)), mask)
    ref = _im(rng.standard_normal((3, 8, 8)), rng.standard_normal((3, 8, 8)), np.ones((8, 8), bool))
    cm = e2.correlation_map(meas, ref, 3)
    direct = e2.direct_map(meas, ref, 3)
    assert np.max(np.abs(cm.values - direct)) <= 1e-10 * np.max(np.abs(direct))


def test_upsampled_map_matches_integer_lags(chara):
    ref = build_modal_im(chara.basis, chara.sub, n_modes_used=6)
    meas = build_modal_im(chara.basis, chara.sub, (0.4, -0.3), n_modes_used=6)
    c1 = e2.correlation_map(meas, ref, 2, 1)
    c4 = e2.correlation_map(meas, ref, 2, 4)
    assert c4.values.shape == (17, 17)
    assert np.allclose(c4.values[::4, ::4], c1.values, atol=1e-10)


@pytest.mark.parametrize("shift", [(0, 0), (1, 0), (-2, 1), (2, -2)])
def test_integer_shift_recovered_exactly(sim20, shift):
    rig = OpenLoopRig(sim20, n_modes=10, radius=4)
    assert rig.estimate(shift) == Misreg(*shift)


def test_fractional_shift_with_upsampling(sim20):
    rig = OpenLoopRig(sim20, n_modes=20, radius=2, upsample=8)
    p = rig.estimate((0.6, -0.35))
    assert abs(p.dx - 0.6) <= 0.125 and abs(p.dy + 0.35) <= 0.125


def test_map_symmetry_under_swapped_roles(sim20):
    # swapping which IM is shifted mirrors the peak
    rig = OpenLoopRig(sim20, n_modes=10, radius=3)
    a = build_modal_im(sim20.basis, sim20.sub, (1, 2), n_modes_used=10)
    b = build_modal_im(sim20.basis, sim20.sub, (0, 0), n_modes_used=10)
    assert e2.correlation_map(a, b, 3).peak == Misreg(1, 2)
    assert e2.correlation_map(b, a, 3).peak == Misreg(-1, -2)
    assert rig.reference.n_modes == 10


def test_boundary_peak_warns(sim20):
    rig = OpenLoopRig(sim20, n_modes=10, radius=2)
    cm = rig.correlation_map((3, 3))
    assert cm.boundary
    with pytest.warns(e2.BoundaryPeakWarning):
        e2.estimate_shift(cm)
    inner = OpenLoopRig(sim20, n_modes=10, radius=4).correlation_map((1, 0))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        e2.estimate_shift(inner)


def test_noise_robustness_trend(sim20):
    errs = {}
    for snr in (20.0, 2.0):
        rig = OpenLoopRig(sim20, n_modes=35, snr=snr, radius=2, upsample=4)
        errs[snr] = np.mean([abs(rig.estimate((0.5, 0), seed).dx - 0.5) for seed in range(6)])
    assert errs[20.0] <= errs[2.0] + 1e-12
    assert errs[20.0] <= 0.125


def test_tie_break_prefers_smallest_shift():
    mask = np.ones((6, 6), bool)
    zero = np.zeros((1, 6, 6))
    im = _im(zero, zero, mask)
    cm = e2.correlation_map(im, _im(zero + 1.0, zero + 1.0, mask), 2)
    assert cm.peak == Misreg(0.0, 0.0)


def test_input_errors(sim20):
    a = build_modal_im(sim20.basis, sim20.sub, n_modes_used=2)
    b = build_modal_im(sim20.basis, sim20.sub, n_modes_used=3)
    with pytest.raises(InputError):
        e2.correlation_map(a, b)
    with pytest.raises(InputError):
        e2.correlation_map(a, a, 11)
    with pytest.raises(InputError):
        e2.correlation_map(a, a, 2, 17)


def test_no_overlap():
    m1 = np.zeros((6, 6), bool)
    m1[0, 0] = True
    m2 = np.zeros((6, 6), bool)
    m2[5, 5] = True
    x = np.ones((1, 6, 6))
    with pytest.raises(NoOverlapError):
        e2.correlation_map(_im(x, x, m1), _im(x, x, m2), 1)


def test_csv_dump(sim20):
    cm = OpenLoopRig(sim20, n_modes=4, radius=1, upsample=2).correlation_map((0, 0))
    lines = cm.to_csv().strip().splitlines()
    assert lines[0] == "dx_delta,dy_delta,alpha" and len(lines) == 1 + 25


@settings(max_examples=20, deadline=None)
@given(st.integers(-3, 3), st.integers(-3, 3), st.floats(0.1, 10.0))
def test_scale_invariance_of_peak(dx, dy, gain):
    rng = np.random.default_rng(abs(dx * 7 + dy))
    base = rng.standard_normal((2, 2, 12, 12))
    mask = np.ones((12, 12), bool)
    ref = _im(base[0], base[1], mask)
    shifted = np.roll(base, (dy, dx), axis=(-2, -1))
    meas = _im(gain * shifted[0], gain * shifted[1], mask)
    cm = e2.correlation_map(meas, ref, 4)
    assert cm.peak == Misreg(dx, dy)
    assert cm.peak_value == pytest.approx(gain, rel=1e-9)

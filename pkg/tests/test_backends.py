import numpy as np
import pytest

from misreg import _kernels, loopsim


@pytest.fixture
def numpy_backend():
    prev = _kernels.backend()
    yield
    _kernels.set_backend(prev)


def _both(fn):
    out = {}
    for name in ("numpy", "numba"):
        _kernels.set_backend(name)
        out[name] = fn()
    return out["numpy"], out["numba"]


@pytest.mark.skipif(not _kernels.HAVE_NUMBA, reason="numba not installed")
def test_window_slopes_agree(numpy_backend, rng):
    phi = rng.standard_normal((3, 33, 33))
    a, b = _both(lambda: _kernels.window_slopes(phi, 8, 4, 0.1))
    assert np.allclose(a[0], b[0], atol=1e-12) and np.allclose(a[1], b[1], atol=1e-12)


@pytest.mark.skipif(not _kernels.HAVE_NUMBA, reason="numba not installed")
def test_closed_loop_agrees(numpy_backend, rng):
    p = loopsim.LoopParams.from_rate(1000, 0.4, 0.01, 3)
    b = np.eye(3) + 0.05 * rng.standard_normal((3, 3))
    u = rng.standard_normal((600, 3))
    a, c = _both(lambda: loopsim.integrate_loop(b, u, p))
    assert np.allclose(a[0], c[0], atol=1e-10) and np.allclose(a[1], c[1], atol=1e-10)


@pytest.mark.skipif(not _kernels.HAVE_NUMBA, reason="numba not installed")
def test_sliding_mean_agrees(numpy_backend, rng):
    x = rng.standard_normal(200)
    x[[3, 50, 51]] = np.nan
    a, b = _both(lambda: _kernels.sliding_mean(x, 7))
    assert np.allclose(a, b, equal_nan=True)


def test_sliding_mean_oracle(numpy_backend):
    _kernels.set_backend("numpy")
    x = np.arange(10.0)
    out = _kernels.sliding_mean(x, 2)
    assert out[0] == pytest.approx(1.0) and out[5] == pytest.approx(5.0) and out[9] == pytest.approx(8.0)


def test_unknown_backend():
    with pytest.raises(ValueError):
        _kernels.set_backend("cuda")

"""Open-loop estimator: weighted modal cross-correlation of 2D interaction matrices.

For each trial shift ``delta`` the scalar ``alpha(delta)`` is the least-squares
gain mapping the shifted reference IM onto the measured one, over the
subapertures valid in both. The shift maximizing ``alpha`` is the estimate.

Both slope channels count as separate modes in the sums.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InputError, NoOverlapError
from .forward_model import Misreg, ModalIM

DEN_CLAMP = 1e-6  # relative to the largest denominator
MAX_UPSAMPLE = 16


class BoundaryPeakWarning(UserWarning):
    """The maximum sits on the edge of the search window."""


@dataclass(frozen=True)
class CorrMap:
    values: np.ndarray  # (N, N) alpha on the delta lattice, rows = dy, cols = dx
    numerator: np.ndarray
    denominator: np.ndarray
    search_radius: int
    upsample: int
    peak: Misreg
    peak_value: float
    boundary: bool

    @property
    def offsets(self) -> np.ndarray:
        """Lattice coordinates along either axis, in subapertures."""
        n = self.values.shape[0]
        return (np.arange(n) - (n - 1) // 2) / self.upsample

    def to_csv(self) -> str:
        off = self.offsets
        lines = ["dx_delta,dy_delta,alpha"]
        for i, dy in enumerate(off):
            for j, dx in enumerate(off):
                lines.append(f"{dx:.6g},{dy:.6g},{self.values[i, j]:.17g}")
        return "\n".join(lines) + "\n"


def correlate_fft(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``c(d) = sum_m sum_x a_m(x) b_m(x - d)`` for all lags, summed over the stack.

    Inputs are ``(n_y, n_x)`` maps or ``(m, n_y, n_x)`` stacks. The output has
    shape ``(2 n_y - 1, 2 n_x - 1)`` with zero lag at the center.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise InputError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    ny, nx = a.shape[-2:]
    shape = (2 * ny - 1, 2 * nx - 1)
    spec = (np.fft.rfft2(a, s=shape) * np.conj(np.fft.rfft2(b, s=shape))).sum(axis=0)
    c = np.fft.irfft2(spec, s=shape)
    return np.fft.fftshift(c)


def _interp_matrix(p: int, lags: np.ndarray) -> np.ndarray:
    # trigonometric interpolation of a p-periodic sequence (p odd) at real lags
    k = np.fft.fftfreq(p, 1.0 / p)
    return np.exp(2j * np.pi * np.outer(lags, k) / p) / p


def _upsampled(a: np.ndarray, b: np.ndarray, lags: np.ndarray) -> np.ndarray:
    # correlation of a and b at fractional lags: shift b as a band-limited
    # signal on the zero-padded (odd) period
    ny, nx = a.shape[-2:]
    py, px = 2 * ny - 1, 2 * nx - 1
    spec = (np.fft.fft2(a, s=(py, px)) * np.conj(np.fft.fft2(b, s=(py, px)))).sum(axis=0)
    ey = _interp_matrix(py, lags)
    ex = _interp_matrix(px, lags)
    return (ey @ spec @ ex.T).real


def _stack(im: ModalIM) -> np.ndarray:
    return im.stacked()


def correlation_map(
    measured: ModalIM,
    reference: ModalIM,
    radius: int | None = None,
    upsample: int = 1,
) -> CorrMap:
    """``alpha(delta)`` on the lattice ``|dx|, |dy| <= radius`` with step ``1/upsample``.

    ``measured`` carries ``w_valid`` (its mask); ``reference`` carries ``w_wfs``.
    """
    mx, rx = _stack(measured), _stack(reference)
    if mx.shape != rx.shape:
        raise InputError(f"measured {mx.shape} and reference {rx.shape} IMs differ in shape")
    n = mx.shape[-1]
    if mx.shape[-2] != n:
        raise InputError("slope maps must be square")
    if radius is None:
        radius = n // 4
    radius = int(radius)
    if not 0 <= radius <= n // 2:
        raise InputError(f"radius must lie in [0, {n // 2}]")
    upsample = int(upsample)
    if not 1 <= upsample <= MAX_UPSAMPLE:
        raise InputError(f"upsample must lie in [1, {MAX_UPSAMPLE}]")

    wv = measured.mask.astype(float)
    ww = reference.mask.astype(float)
    a = wv * mx
    b = ww * rx
    b2 = ww * rx**2
    wv_stack = np.broadcast_to(wv, mx.shape)

    if upsample == 1:
        num_full = correlate_fft(a, b)
        den_full = correlate_fft(wv_stack, b2)
        c = n - 1
        sl = slice(c - radius, c + radius + 1)
        num = num_full[sl, sl]
        den = den_full[sl, sl]
    else:
        lags = np.arange(-radius * upsample, radius * upsample + 1) / upsample
        num = _upsampled(a, b, lags)
        den = _upsampled(wv_stack, b2, lags)

    dmax = float(den.max()) if den.size else 0.0
    # FFT round-off leaves ~1e-16 residue where nothing overlaps
    if not dmax > 1e-12 * float(b2.sum()):
        raise NoOverlapError("valid and model masks do not overlap inside the search window")
    ok = den >= DEN_CLAMP * dmax
    values = num / np.maximum(den, DEN_CLAMP * dmax)
    peak, peak_value = _argmax(values, ok, upsample)
    boundary = max(abs(peak.dx), abs(peak.dy)) >= radius - 0.5 / upsample
    return CorrMap(values, num, den, radius, upsample, peak, peak_value, bool(boundary and radius > 0))


def _argmax(values: np.ndarray, ok: np.ndarray, upsample: int) -> tuple[Misreg, float]:
    n = values.shape[0]
    off = (np.arange(n) - (n - 1) // 2) / upsample
    masked = np.where(ok, values, -np.inf)
    best = masked.max()
    tol = 1e-12 * max(abs(best), 1e-300)
    rows, cols = np.nonzero(masked >= best - tol)
    cand = sorted(zip(off[cols], off[rows]), key=lambda d: (math.hypot(*d), d[0], d[1]))
    dx, dy = cand[0]
    return Misreg(float(dx), float(dy)), float(best)


def estimate_shift(cmap: CorrMap) -> Misreg:
    """Peak of the correlation map, in subapertures. Warns when it hits the edge."""
    if cmap.boundary:
        warnings.warn(
            f"peak {cmap.peak} lies on the search boundary (radius {cmap.search_radius}); "
            "the true shift may be larger",
            BoundaryPeakWarning,
            stacklevel=2,
        )
    return cmap.peak


def direct_map(measured: ModalIM, reference: ModalIM, radius: int) -> np.ndarray:
    """Brute-force ``alpha`` at integer shifts, for checking the FFT path."""
    mx, rx = _stack(measured), _stack(reference)
    wv, ww = measured.mask, reference.mask
    n = mx.shape[-1]
    out = np.zeros((2 * radius + 1, 2 * radius + 1))
    for iy, dy in enumerate(range(-radius, radius + 1)):
        for ix, dx in enumerate(range(-radius, radius + 1)):
            num = den = 0.0
            for y in range(n):
                for x in range(n):
                    ys, xs = y - dy, x - dx
                    if not (0 <= ys < n and 0 <= xs < n) or not wv[y, x] or not ww[ys, xs]:
                        continue
                    r = rx[:, ys, xs]
                    num += float(mx[:, y, x] @ r)
                    den += float(r @ r)
            out[iy, ix] = num / den if den > 0 else np.nan
    return out

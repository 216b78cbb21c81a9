"""Closed-loop estimator: misregistration from the telemetry of a running loop.

A shift ``delta`` couples the cosine and sine parts of every spatial
frequency ``k`` of the DM commands with ``theta = 2 pi k.delta``. The
imaginary part of their normalized cross-spectrum then follows
``theta * rho0(f)``; a linear fit over the controlled frequencies gives
``delta``.

Conventions: the spatial DFT uses the pupil center as origin, ``c1`` is its
real part and ``c2`` its imaginary part, temporal spectra use numpy's
``exp(-2i pi f t)`` kernel. With these, ``rho_cl ~ +theta rho0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import linalg

from . import _kernels
from .errors import DegenerateFitError, InputError
from .forward_model import Misreg
from .geometry import Projector
from .loopsim import LoopParams, Telemetry, rho0

MIN_SEGMENT = 16
SMOOTH_HALF = 25

# Correlation, at lags of 1 and 2 bins, of the Im-coherence noise under a
# Hann taper: the squared bin-to-bin correlation of Hann-windowed spectra
# (-2/3 and 1/6).
HANN_LAG_CORR = (4.0 / 9.0, 1.0 / 36.0)


@dataclass(frozen=True)
class SpectralSeries:
    k_grid: np.ndarray  # (K, 2) in 1/m, half-plane, DC excluded
    c1: np.ndarray  # (n_segments, K, F) complex temporal spectra
    c2: np.ndarray
    f_grid: np.ndarray  # (F,) Hz, includes 0
    frame_rate: float
    segment_len: int
    window: str = "hann"

    @property
    def n_segments(self) -> int:
        return self.c1.shape[0]


@dataclass(frozen=True)
class SpectralCorr:
    rho_cl: np.ndarray  # (K, F+) on f > 0; NaN where excluded
    k_grid: np.ndarray
    f_grid: np.ndarray  # (F+,) Hz, f > 0
    k_ctrl_mask: np.ndarray  # (K,) bool
    n_segments: int
    window: str = "hann"
    excluded: np.ndarray = field(default=None, repr=False)  # (K, F+) zero-power cells

    def __post_init__(self):
        if self.excluded is None:
            object.__setattr__(self, "excluded", ~np.isfinite(self.rho_cl))

    def restrict(self, k_ctrl_mask: np.ndarray) -> "SpectralCorr":
        return replace(self, k_ctrl_mask=np.asarray(k_ctrl_mask, bool))


@dataclass(frozen=True)
class CorrelationCurve:
    f_grid: np.ndarray
    raw: np.ndarray
    smoothed: np.ndarray


@dataclass(frozen=True)
class ShiftEstimate:
    delta: Misreg  # in sub_pitch_delta units
    covariance: np.ndarray  # (2, 2) in Delta^2
    residual_rms: float
    rho2d: np.ndarray  # (K,)
    rhot: CorrelationCurve
    k_grid: np.ndarray
    k_ctrl_mask: np.ndarray
    n_cells: int

    def sigma(self) -> float:
        """Mahalanobis norm of the estimate under its own covariance."""
        d = self.delta.as_array()
        try:
            return float(math.sqrt(max(d @ np.linalg.solve(self.covariance, d), 0.0)))
        except np.linalg.LinAlgError:
            return math.inf


# --------------------------------------------------------------------------
# Spatial decomposition


def half_plane_indices(n: int) -> np.ndarray:
    """Integer DFT indices ``(ix, iy)`` of the half-plane, Nyquist rows dropped."""
    top = (n - 1) // 2
    out = [(0, iy) for iy in range(1, top + 1)]
    out += [(ix, iy) for ix in range(1, top + 1) for iy in range(-top, top + 1)]
    return np.array(out, dtype=int)


def fourier_operator(proj: Projector, k_max: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Complex map from commands to raster DFT coefficients on the half-plane.

    Returns ``(k_grid, M)`` with ``M`` of shape ``(K, n_act)``.
    """
    n = proj.raster_n
    length = n * proj.pixel_size
    idx = half_plane_indices(n)
    k = idx / length
    if k_max is not None:
        keep = np.hypot(k[:, 0], k[:, 1]) <= k_max * (1 + 1e-12)
        idx, k = idx[keep], k[keep]
    x = proj.pixel_centers()
    ex = np.exp(-2j * np.pi * k[:, 0:1] * x[None, :])  # (K, n) over columns
    ey = np.exp(-2j * np.pi * k[:, 1:2] * x[None, :])  # over rows
    w = proj.weights.toarray().reshape(n, n, -1)  # [row, col, act]
    m = np.einsum("kr,kc,rca->ka", ey, ex, w, optimize=True)
    return k, m


def spatial_coefficients(commands: np.ndarray, proj: Projector, k_max: float | None = None):
    """Per-frame ``(c1, c2)`` of the projected command rasters, ``(T, K)`` each."""
    k, m = fourier_operator(proj, k_max)
    c = np.asarray(commands, dtype=float) @ m.T
    return k, c.real, c.imag


def _segments(x: np.ndarray, seg: int, step: int) -> np.ndarray:
    # x: (T, K) -> (n_seg, K, seg)
    return sliding_window_view(x, seg, axis=0)[::step]


def welch_spectra(x: np.ndarray, segment_len: int, overlap: float, window: str = "hann") -> np.ndarray:
    """Windowed, mean-removed temporal FFT of each segment: ``(n_seg, K, F)``."""
    step = max(1, int(round(segment_len * (1.0 - overlap))))
    segs = _segments(x, segment_len, step)
    segs = segs - segs.mean(axis=-1, keepdims=True)
    if window == "hann":
        segs = segs * np.hanning(segment_len + 1)[:-1]
    elif window != "boxcar":
        raise InputError(f"unknown window {window!r}")
    return np.fft.rfft(segs, axis=-1)


def series_from_channels(
    c1: np.ndarray, c2: np.ndarray, k_grid: np.ndarray, frame_rate: float,
    segment_len: int = 512, overlap: float = 0.5, window: str = "hann",
) -> SpectralSeries:
    """Welch-segment spatial coefficient series ``(T, K)``."""
    c1 = np.asarray(c1, dtype=float).reshape(len(c1), -1)
    c2 = np.asarray(c2, dtype=float).reshape(len(c2), -1)
    if segment_len < MIN_SEGMENT:
        raise InputError(f"segment_len must be >= {MIN_SEGMENT}")
    if segment_len > c1.shape[0]:
        raise InputError("segment_len exceeds the telemetry length")
    if not 0.0 <= overlap <= 0.9:
        raise InputError("overlap must lie in [0, 0.9]")
    f = np.fft.rfftfreq(segment_len, 1.0 / frame_rate)
    return SpectralSeries(
        np.asarray(k_grid, float).reshape(-1, 2),
        welch_spectra(c1, segment_len, overlap, window),
        welch_spectra(c2, segment_len, overlap, window),
        f, float(frame_rate), int(segment_len), window,
    )


def decompose(
    t: Telemetry,
    proj: Projector,
    segment_len: int = 512,
    overlap: float = 0.5,
    *,
    k_max: float | None = None,
    window: str = "hann",
) -> SpectralSeries:
    """Symmetric/antisymmetric spatial channels of the telemetry, Welch-segmented."""
    if proj.n_act != t.n_act:
        raise InputError("projector and telemetry disagree on the actuator count")
    k, c1, c2 = spatial_coefficients(t.commands, proj, k_max)
    return series_from_channels(c1, c2, k, t.frame_rate, segment_len, overlap, window)


# --------------------------------------------------------------------------
# Correlation and fit


def empirical_corr(s: SpectralSeries, *, literal: bool = False, segments: slice | np.ndarray | None = None) -> SpectralCorr:
    """Imaginary part of the normalized c1/c2 cross-spectrum on ``f > 0``.

    By default the cross- and auto-spectra are averaged over segments before
    normalizing (a coherence estimate). ``literal`` instead normalizes each
    segment and averages the ratios. Cells with zero power in either channel
    are NaN and flagged in ``excluded``.
    """
    if s.n_segments < 1:
        raise InputError("need at least one segment")
    pos = s.f_grid > 0
    c1 = s.c1[..., pos] if segments is None else s.c1[segments][..., pos]
    c2 = s.c2[..., pos] if segments is None else s.c2[segments][..., pos]
    cross = c1 * np.conj(c2)
    p1 = np.abs(c1) ** 2
    p2 = np.abs(c2) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        if literal:
            r = np.imag(cross) / np.sqrt(p1 * p2)
            dead = ~np.isfinite(r)
            rho = np.where(dead, 0.0, r).sum(0) / np.maximum((~dead).sum(0), 1)
            rho = np.where((~dead).any(0), rho, np.nan)
        else:
            den = np.sqrt(p1.mean(0) * p2.mean(0))
            rho = np.imag(cross.mean(0)) / den
            rho[~(den > 0)] = np.nan
    k_all = np.ones(s.k_grid.shape[0], bool)
    return SpectralCorr(rho, s.k_grid, s.f_grid[pos], k_all, c1.shape[0], s.window)


def control_radius(n_mod: int, pupil_diameter: float) -> float:
    return math.sqrt(n_mod / math.pi) / pupil_diameter


def control_space(p: LoopParams | int, pupil_diameter: float, k_grid: np.ndarray) -> np.ndarray:
    """``|k| <= sqrt(n_mod / pi) / D``: the disc holding ``n_mod`` Fourier modes."""
    n_mod = p if isinstance(p, (int, np.integer)) else p.n_mod
    if n_mod < 1:
        raise InputError("n_mod must be >= 1")
    k_grid = np.asarray(k_grid, float).reshape(-1, 2)
    kn = np.hypot(k_grid[:, 0], k_grid[:, 1])
    mask = kn <= control_radius(n_mod, pupil_diameter) * (1 + 1e-12)
    if not mask.any():
        mask = kn <= kn.min() * (1 + 1e-12)
    return mask


def _lag_corr(window: str):
    return HANN_LAG_CORR if window == "hann" else ()


def _fit_cells(c: SpectralCorr, rho0_curve, f_min: float):
    rho0_curve = np.asarray(rho0_curve, dtype=float)
    if rho0_curve.shape != c.f_grid.shape:
        raise InputError("rho0 curve must be sampled on the correlation f grid")
    fsel = c.f_grid > f_min
    ksel = np.asarray(c.k_ctrl_mask, bool)
    rho = c.rho_cl[np.ix_(ksel, fsel)]
    return ksel, fsel, rho, rho0_curve[fsel]


def _solve(k, w, rho, ok):
    kk = np.einsum("ki,kj->kij", k, k)
    wsq = np.where(ok, w[None, :] ** 2, 0.0).sum(1)  # per k
    normal = np.einsum("k,kij->ij", wsq, kk)
    rhs = (np.where(ok, rho * w[None, :], 0.0).sum(1)[:, None] * k).sum(0)
    if not np.trace(normal) > 0 or np.linalg.cond(normal) > 1e12:
        raise DegenerateFitError("spatial frequencies are collinear or carry no signal")
    return np.linalg.solve(normal, rhs), normal, kk


def fit_shift(
    c: SpectralCorr,
    rho0_curve,
    sub_pitch_delta: float,
    *,
    f_min: float = 0.0,
    clip: float | None = None,
    smooth_half: int = SMOOTH_HALF,
) -> ShiftEstimate:
    """Least-squares ``delta`` from ``rho_cl(k, f) ~ 2 pi rho0(f) k.delta``.

    The covariance is the residual variance propagated through the normal
    equations, corrected for the bin-to-bin correlation a tapered window
    introduces along f. With ``clip``, cells whose residual exceeds ``clip``
    robust standard deviations (1.4826 MAD) are dropped and the fit repeated
    until the cell set is stable; frozen-flow wind lands on a sparse set of
    such cells near ``f = |k.v|``.
    """
    ksel, fsel, rho, r0 = _fit_cells(c, rho0_curve, f_min)
    if ksel.sum() < 3:
        raise InputError("need at least 3 spatial frequencies in the control space")
    k = c.k_grid[ksel]
    ok = np.isfinite(rho)
    w = 2.0 * np.pi * r0
    delta, normal, kk = _solve(k, w, rho, ok)
    if clip is not None:
        for _ in range(20):
            resid = rho - w[None, :] * (k @ delta)[:, None]
            r = resid[ok]
            scale = 1.4826 * np.median(np.abs(r - np.median(r)))
            keep = np.isfinite(rho) & (np.abs(np.nan_to_num(resid)) <= clip * scale)
            if np.array_equal(keep, ok):
                break
            ok = keep
            delta, normal, kk = _solve(k, w, rho, ok)
    pred = w[None, :] * (k @ delta)[:, None]
    resid = np.where(ok, rho - pred, 0.0)
    n_cells = int(ok.sum())
    dof = max(n_cells - 2, 1)
    s2 = float((resid**2).sum() / dof)
    # sandwich A^T Sigma A for stationary correlation along f within each k
    meat = normal.copy()
    wz = np.where(ok, w[None, :], 0.0)
    for lag, r in enumerate(_lag_corr(c.window), start=1):
        cross = (wz[:, lag:] * wz[:, :-lag]).sum(1)
        meat += 2.0 * r * np.einsum("k,kij->ij", cross, kk)
    inv = np.linalg.inv(normal)
    cov = s2 * inv @ meat @ inv
    cov = 0.5 * (cov + cov.T) / sub_pitch_delta**2
    est = Misreg(float(delta[0] / sub_pitch_delta), float(delta[1] / sub_pitch_delta))
    full_r0 = np.asarray(rho0_curve, float)
    rho2d = coupling_map(c, full_r0, f_min=f_min)
    curve = correlation_curve(c, est, sub_pitch_delta, smooth_half=smooth_half)
    return ShiftEstimate(est, cov, math.sqrt(s2), rho2d, curve, c.k_grid, ksel, n_cells)


def coupling_map(c: SpectralCorr, rho0_curve, *, f_min: float = 0.0) -> np.ndarray:
    """Per-k projection of ``rho_cl`` onto ``rho0``: the coupling coefficient ``theta(k)``."""
    rho0_curve = np.asarray(rho0_curve, dtype=float)
    fsel = c.f_grid > f_min
    rho = c.rho_cl[:, fsel]
    r0 = rho0_curve[fsel][None, :]
    ok = np.isfinite(rho)
    num = np.where(ok, rho * r0, 0.0).sum(1)
    den = np.where(ok, r0**2, 0.0).sum(1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den > 0, num / den, np.nan)


def correlation_curve(
    c: SpectralCorr, delta: Misreg, sub_pitch_delta: float, *, smooth_half: int = SMOOTH_HALF
) -> CorrelationCurve:
    """Per-f projection of ``rho_cl`` onto ``2 pi k.delta`` over the control space."""
    ksel = np.asarray(c.k_ctrl_mask, bool)
    kd = c.k_grid[ksel] @ (delta.as_array() * sub_pitch_delta)
    rho = c.rho_cl[ksel]
    ok = np.isfinite(rho)
    num = np.where(ok, rho * kd[:, None], 0.0).sum(0)
    den = 2.0 * np.pi * np.where(ok, kd[:, None] ** 2, 0.0).sum(0)
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = np.where(den > 0, num / den, np.nan)
    return CorrelationCurve(c.f_grid, raw, _kernels.sliding_mean(raw, smooth_half))


def plane_fit(k_grid: np.ndarray, values: np.ndarray) -> tuple[np.ndarray, float]:
    """Least-squares ``values ~ 2 pi k.d``; returns ``(d, rms residual)``."""
    k = np.asarray(k_grid, float).reshape(-1, 2)
    v = np.asarray(values, float)
    ok = np.isfinite(v)
    a = 2.0 * np.pi * k[ok]
    d, *_ = linalg.lstsq(a, v[ok])
    return d, float(np.sqrt(np.mean((v[ok] - a @ d) ** 2)))


def estimate_channels(
    k_grid: np.ndarray,
    c1: np.ndarray,
    c2: np.ndarray,
    params: LoopParams,
    control_diameter: float,
    sub_pitch_delta: float,
    *,
    segment_len: int = 512,
    overlap: float = 0.5,
    f_min: float = 0.0,
    window: str = "hann",
    literal: bool = False,
    clip: float | None = None,
) -> ShiftEstimate:
    """Shift from precomputed spatial channels ``(T, K)``, sampled at the loop rate."""
    s = series_from_channels(c1, c2, k_grid, params.frame_rate, segment_len, overlap, window)
    corr = empirical_corr(s, literal=literal)
    corr = corr.restrict(control_space(params, control_diameter, corr.k_grid))
    return fit_shift(corr, rho0(corr.f_grid, params), sub_pitch_delta, f_min=f_min, clip=clip)


def estimate(
    t: Telemetry,
    proj: Projector,
    control_diameter: float,
    sub_pitch_delta: float,
    *,
    segment_len: int = 512,
    overlap: float = 0.5,
    f_min: float = 0.0,
    window: str = "hann",
    literal: bool = False,
    clip: float | None = None,
) -> ShiftEstimate:
    """Telemetry in, shift out: decompose, correlate, fit over the control space.

    ``control_diameter`` sets the control-space radius; pass the DM clear
    aperture, over which the controlled modes are spread. ``f_min`` drops
    low temporal frequencies (wind), ``clip`` enables robust cell rejection
    in :func:`fit_shift`.
    """
    if proj.n_act != t.n_act:
        raise InputError("projector and telemetry disagree on the actuator count")
    k_ctrl = control_radius(t.params.n_mod, control_diameter)
    k, c1, c2 = spatial_coefficients(t.commands, proj, 1.5 * k_ctrl)
    return estimate_channels(
        k, c1, c2, t.params, control_diameter, sub_pitch_delta,
        segment_len=segment_len, overlap=overlap, f_min=f_min, window=window, literal=literal, clip=clip,
    )

"""Closed-loop AO simulation: transfer functions, frozen-flow turbulence, loop runs.

The loop is simulated in continuous time on a grid of ``n_sub`` steps per
frame so that the WFS exposure, controller latency and DM hold behave
exactly like the analytic S, C and A transfer functions (an ordinary
one-sample-per-frame recursion cannot represent half-frame delays).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from . import _kernels
from .errors import InputError, InstabilityError
from .forward_model import ZERO, Misreg, ModalBasis, _as_misreg, window_slopes, zonal_slopes
from .geometry import ActuatorGrid, SubapertureGrid, compute_valid_mask, subaperture_flux

INTERP_HALF = 16  # taps on each side of the band-limited sub-frame interpolator
INTERP_BETA = 8.0


@dataclass(frozen=True)
class LoopParams:
    tau_wfs: float
    tau_rtc: float
    tau_lat: float
    tau_dm: float
    g_int: float
    g_leak: float = 0.0
    n_mod: int = 1

    def __post_init__(self):
        for name in ("tau_wfs", "tau_rtc", "tau_lat", "tau_dm"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise InputError(f"{name} must be positive")
        if not 0 < self.g_int:
            raise InputError("g_int must be positive")
        if not 0 <= self.g_leak < 1:
            raise InputError("g_leak must lie in [0, 1)")
        if self.n_mod < 1:
            raise InputError("n_mod must be >= 1")

    @classmethod
    def from_rate(cls, loop_hz: float, g_int: float, g_leak: float = 0.0, n_mod: int = 1) -> "LoopParams":
        """All characteristic times equal to one frame."""
        if loop_hz <= 0:
            raise InputError("loop_hz must be positive")
        tau = 1.0 / loop_hz
        return cls(tau, tau, tau, tau, float(g_int), float(g_leak), int(n_mod))

    @property
    def frame_rate(self) -> float:
        return 1.0 / self.tau_rtc

    @property
    def nyquist(self) -> float:
        return 0.5 / self.tau_rtc


# --------------------------------------------------------------------------
# Transfer functions


def _hold(f, tau):
    f = np.asarray(f, dtype=float)
    x = 2j * np.pi * tau * f
    small = np.abs(x) < 1e-8
    safe = np.where(small, 1.0, x)
    return np.where(small, 1.0 - x / 2.0, (1.0 - np.exp(-safe)) / safe)


def wfs_tf(f, p: LoopParams):
    """WFS exposure: ``(1 - exp(-2i pi tau f)) / (2i pi tau f)``."""
    return _hold(f, p.tau_wfs)


def dm_tf(f, p: LoopParams):
    return _hold(f, p.tau_dm)


def controller_tf(f, p: LoopParams):
    f = np.asarray(f, dtype=float)
    num = p.g_int * np.exp(-2j * np.pi * p.tau_lat * f)
    den = 1.0 - (1.0 - p.g_leak) * np.exp(-2j * np.pi * p.tau_rtc * f)
    with np.errstate(divide="ignore", invalid="ignore"):
        return num / den


def open_loop_tf(f, p: LoopParams):
    """``mu = A C S``."""
    return dm_tf(f, p) * controller_tf(f, p) * wfs_tf(f, p)


def rejection_tf(f, p: LoopParams):
    return 1.0 / (1.0 + open_loop_tf(f, p))


def rho0(f, p: LoopParams):
    """Small-shift imaginary correlation curve ``2 Im(conj(mu) / (1 + conj(mu)))``."""
    f = np.asarray(f, dtype=float)
    if np.any(f <= 0) or np.any(f > p.nyquist * (1 + 1e-12)):
        raise InputError("rho0 is defined on (0, Nyquist]")
    mu = np.conj(open_loop_tf(f, p))
    den = 1.0 + mu
    if np.any(np.abs(den) < 1e-12):
        raise InstabilityError("|1 + mu| vanishes: loop gain too high")
    return 2.0 * np.imag(mu / den)


# --------------------------------------------------------------------------
# Frozen-flow turbulence


def von_karman_psd(kappa, r0: float, L0: float):
    """Phase PSD in rad^2 m^2 for spatial frequency ``kappa`` in cycles/m."""
    return 0.023 * r0 ** (-5.0 / 3.0) * (np.asarray(kappa) ** 2 + 1.0 / L0**2) ** (-11.0 / 6.0)


def von_karman_structure(r, r0: float, L0: float):
    """Analytic phase structure function of the von Karman spectrum."""
    r = np.asarray(r, dtype=float)
    x = 2.0 * np.pi * np.maximum(r, 1e-300) / L0
    c = 2.0 ** (-1.0 / 6.0) * special.gamma(5.0 / 6.0)
    return 0.17253 * (L0 / r0) ** (5.0 / 3.0) * (1.0 - x ** (5.0 / 6.0) * special.kv(5.0 / 6.0, x) / c)


@dataclass(frozen=True)
class FrozenFlowScreen:
    r0: float
    L0: float
    v: tuple[float, float]
    pixel_scale: float
    frame_period: float
    screen: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return self.screen.shape[0]

    @property
    def rms(self) -> float:
        return float(self.screen.std())

    def _spectrum(self):
        spec = getattr(self, "_spec_cache", None)
        if spec is None:
            spec = np.fft.rfft2(self.screen)
            object.__setattr__(self, "_spec_cache", spec)
        return spec

    def frames(self, start: int, count: int, window: tuple[int, int] | None = None) -> np.ndarray:
        """Screens at frames ``start .. start + count - 1``, translated by ``v t``.

        ``window=(offset, m)`` returns only the ``m x m`` block at
        ``[offset:offset+m]`` on both axes, which is cheaper to synthesize.
        """
        n = self.size
        off, m = (0, n) if window is None else window
        t = (start + np.arange(count)) * self.frame_period
        sx = self.v[0] * t / self.pixel_scale
        sy = self.v[1] * t / self.pixel_scale
        # separable Fourier shift
        ex = np.exp(-2j * np.pi * np.fft.rfftfreq(n)[None, :] * sx[:, None])
        ey = np.exp(-2j * np.pi * np.fft.fftfreq(n)[None, :] * sy[:, None])
        spec = self._spectrum()[None] * ex[:, None, :] * ey[:, :, None]
        rows = np.fft.ifft(spec, axis=1)[:, off : off + m]
        return np.fft.irfft(rows, n=n, axis=2)[:, :, off : off + m]

    def frame(self, t: int) -> np.ndarray:
        return self.frames(t, 1)[0]


def make_frozen_flow(
    r0: float,
    L0: float,
    v,
    size: int,
    seed: int,
    *,
    pixel_scale: float,
    frame_period: float,
    pupil_pixels: int | None = None,
) -> FrozenFlowScreen:
    """Periodic von Karman screen by Fourier synthesis.

    ``size`` is the side in pixels; when ``pupil_pixels`` is given the screen
    must be at least twice as large.
    """
    if r0 <= 0 or L0 <= 0:
        raise InputError("r0 and L0 must be positive")
    if pixel_scale <= 0 or frame_period <= 0:
        raise InputError("pixel_scale and frame_period must be positive")
    if pupil_pixels is not None and size < 2 * pupil_pixels:
        raise InputError("screen must be at least twice the pupil")
    rng = np.random.default_rng(seed)
    df = 1.0 / (size * pixel_scale)
    fx = np.fft.fftfreq(size, pixel_scale)
    kappa = np.hypot(*np.meshgrid(fx, fx))
    amp = np.sqrt(von_karman_psd(kappa, r0, L0)) * df
    amp[0, 0] = 0.0
    noise = rng.standard_normal((size, size)) + 1j * rng.standard_normal((size, size))
    screen = np.real(np.fft.ifft2(noise * amp)) * size * size
    screen -= screen.mean()
    vx, vy = (float(c) for c in v)
    return FrozenFlowScreen(float(r0), float(L0), (vx, vy), float(pixel_scale), float(frame_period), screen)


# --------------------------------------------------------------------------
# Loop integration


def interp_table(n_sub: int, half: int = INTERP_HALF, beta: float = INTERP_BETA) -> np.ndarray:
    """Kaiser-windowed sinc rows mapping frame samples onto sub-frame phases.

    Row ``p`` evaluates the band-limited signal at ``p / n_sub`` frames past
    the current frame; row 0 is the identity.
    """
    t = np.arange(2 * half)
    x = np.arange(n_sub)[:, None] / n_sub - (t[None, :] - half + 1)
    win = np.i0(beta * np.sqrt(np.clip(1.0 - (x / half) ** 2, 0.0, None))) / np.i0(beta)
    table = np.sinc(x) * win
    table /= table.sum(axis=1, keepdims=True)
    table[0] = 0.0
    table[0, half - 1] = 1.0
    return table


def _steps(tau: float, p: LoopParams, n_sub: int, name: str) -> int:
    s = tau / p.tau_rtc * n_sub
    k = int(round(s))
    if k < 1 or abs(s - k) > 1e-6 * max(1.0, s):
        raise InputError(f"{name} must be a multiple of tau_rtc / n_sub")
    return k


def integrate_loop(
    b: np.ndarray,
    u: np.ndarray,
    p: LoopParams,
    *,
    n_sub: int = 8,
    diverge_ratio: float = 1e3,
    warmup: int = 64,
) -> tuple[np.ndarray, np.ndarray]:
    """Close the loop around the coupling matrix ``b`` driven by ``u``.

    ``u`` is ``(T, n)``: the measurement-level input (already seen through the
    WFS) sampled at frame rate. Returns frame-sampled commands and
    measurements. Raises :class:`InstabilityError` on divergence.
    """
    u = np.atleast_2d(np.asarray(u, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    n_frames = u.shape[0]
    if b.shape != (u.shape[1], u.shape[1]):
        raise InputError("coupling matrix does not match the input width")
    if n_sub < 1:
        raise InputError("n_sub must be >= 1")
    table = interp_table(n_sub)
    half = table.shape[1] // 2
    padded = np.concatenate([np.zeros((half, u.shape[1])), u, np.zeros((half, u.shape[1]))])
    cmd, meas, bad = _kernels.closed_loop(
        b, padded, table, p.g_int, p.g_leak, n_sub,
        _steps(p.tau_rtc, p, n_sub, "tau_rtc"), _steps(p.tau_lat, p, n_sub, "tau_lat"),
        _steps(p.tau_wfs, p, n_sub, "tau_wfs"), _steps(p.tau_dm, p, n_sub, "tau_dm"),
        n_frames, diverge_ratio, warmup,
    )
    if bad >= 0:
        raise InstabilityError(f"loop diverged at frame {bad}", frame=int(bad))
    return cmd, meas


def apply_tf(x: np.ndarray, tf, frame_rate: float) -> np.ndarray:
    """Filter a frame-rate series (time along axis 0) by ``tf(f)`` circularly."""
    n = x.shape[0]
    f = np.fft.rfftfreq(n, 1.0 / frame_rate)
    spec = np.fft.rfft(x, axis=0)
    return np.fft.irfft(spec * tf(f).reshape((-1,) + (1,) * (x.ndim - 1)), n=n, axis=0)


def coupling_rotation(theta: float) -> np.ndarray:
    """How a lateral shift mixes the (cosine, sine) pair of one spatial frequency.

    A pattern ``a cos(2 pi k.x) + b sin(2 pi k.x)`` seen shifted by ``delta``
    has coefficients ``R(theta) (a, b)`` with ``theta = 2 pi k.delta``.
    """
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def run_fourier_mode_loop(
    p: LoopParams, theta: float, n_frames: int, seed: int, *, noise_sigma: float = 1.0, n_sub: int = 8
) -> np.ndarray:
    """Noise-driven loop on the cosine/sine pair of a single spatial frequency.

    Returns the ``(T, 2)`` command history of the two channels.
    """
    rng = np.random.default_rng(seed)
    u = noise_sigma * rng.standard_normal((n_frames, 2))
    cmd, _ = integrate_loop(coupling_rotation(theta), u, p, n_sub=n_sub)
    return cmd


def frequency_response(p: LoopParams, freqs, *, n_frames: int = 4096, n_sub: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Measured closed-loop rejection and complementary responses at ``freqs``.

    A unit complex exponential drives a scalar loop; the steady-state ratio
    of measurement (resp. DM contribution) to input is obtained by lock-in
    over the second half of the run.
    """
    freqs = np.atleast_1d(np.asarray(freqs, dtype=float))
    t = np.arange(n_frames) * p.tau_rtc
    rej = np.empty(freqs.size, complex)
    comp = np.empty(freqs.size, complex)
    keep = slice(n_frames // 2, None)
    for i, f in enumerate(freqs):
        # real inputs: run cosine and sine separately, combine into the complex response
        out_m = []
        for phase in (0.0, -0.5 * np.pi):
            u = np.cos(2 * np.pi * f * t + phase)[:, None]
            _, meas = integrate_loop(np.ones((1, 1)), u, p, n_sub=n_sub)
            out_m.append(meas[:, 0])
        m = out_m[0] + 1j * out_m[1]
        ref = np.exp(2j * np.pi * f * t)
        rej[i] = np.vdot(ref[keep], m[keep]) / np.vdot(ref[keep], ref[keep])
        comp[i] = 1.0 - rej[i]
    return rej, comp


# --------------------------------------------------------------------------
# Full spatial loop


@dataclass(frozen=True)
class Telemetry:
    commands: np.ndarray  # (T, n_act)
    params: LoopParams
    frame_rate: float
    injected_misreg: Misreg = ZERO
    modal: np.ndarray | None = field(default=None, repr=False)  # (T, n_mod)
    residual: np.ndarray | None = field(default=None, repr=False)  # modal measurements
    drive: np.ndarray | None = field(default=None, repr=False)  # modal open-loop input

    def __post_init__(self):
        if self.commands.ndim != 2 or self.commands.shape[0] < 2:
            raise InputError("telemetry needs at least 2 frames")
        if abs(self.frame_rate - self.params.frame_rate) > 1e-9 * self.frame_rate:
            raise InputError("frame_rate must equal 1 / tau_rtc")

    @property
    def n_frames(self) -> int:
        return self.commands.shape[0]

    @property
    def n_act(self) -> int:
        return self.commands.shape[1]


@dataclass(frozen=True)
class LoopSystem:
    """Geometry plus the command matrix of a simulated AO loop."""

    basis: ModalBasis
    sub: SubapertureGrid
    oversample: int
    valid: np.ndarray  # the RTC's slope selection (reference valid mask)
    d_ref: np.ndarray  # (2 n_valid, n_mod)
    reconstructor: np.ndarray  # (n_mod, 2 n_valid)

    @property
    def n_mod(self) -> int:
        return self.d_ref.shape[1]

    @property
    def grid(self) -> ActuatorGrid:
        return self.basis.grid

    def slopes_matrix(self, shift=ZERO) -> np.ndarray:
        """Modal slopes over the RTC's valid subapertures under ``shift``."""
        sx, sy = zonal_slopes(self.grid, self.sub, self.basis.modes[: self.n_mod], shift, self.oversample)
        return np.concatenate([sx[:, self.valid], sy[:, self.valid]], axis=1).T

    def coupling(self, shift=ZERO) -> np.ndarray:
        return self.reconstructor @ self.slopes_matrix(shift)


def build_loop_system(
    basis: ModalBasis,
    sub: SubapertureGrid,
    n_mod: int,
    *,
    reference_shift=ZERO,
    oversample: int = 4,
    flux_threshold: float = 0.5,
) -> LoopSystem:
    """Command matrix from the noiseless IM at ``reference_shift`` (the RTC's model)."""
    if n_mod > basis.n_modes:
        raise InputError(f"n_mod={n_mod} exceeds basis size {basis.n_modes}")
    ref = _as_misreg(reference_shift)
    valid = compute_valid_mask(subaperture_flux(sub, (ref.dx, ref.dy)), flux_threshold, sub.wfs_mask).valid
    sys0 = LoopSystem(basis.subset(n_mod), sub, oversample, valid, np.zeros((0, n_mod)), np.zeros((n_mod, 0)))
    d = sys0.slopes_matrix(ref)
    r = np.linalg.pinv(d)
    return LoopSystem(basis.subset(n_mod), sub, oversample, valid, d, r)


def turbulence_slopes(system: LoopSystem, screen: FrozenFlowScreen, n_frames: int, chunk: int = 64) -> np.ndarray:
    """WFS slopes of the moving screen over the RTC's valid subapertures, ``(T, 2 n_valid)``."""
    sub, q = system.sub, system.oversample
    m = sub.n_side * q + 1
    if abs(screen.pixel_scale * q - sub.sub_pitch_delta) > 1e-9 * sub.sub_pitch_delta:
        raise InputError("screen pixel must equal sub_pitch_delta / oversample")
    if screen.size < m:
        raise InputError("screen smaller than the pupil")
    start = (screen.size - m) // 2
    out = np.empty((n_frames, 2 * int(system.valid.sum())))
    for i0 in range(0, n_frames, chunk):
        cnt = min(chunk, n_frames - i0)
        phi = screen.frames(i0, cnt, (start, m))
        sx, sy = window_slopes(phi, sub.n_side, q, sub.sub_pitch_delta)
        out[i0 : i0 + cnt] = np.concatenate([sx[:, system.valid], sy[:, system.valid]], axis=1)
    return out


def loop_drive(
    system: LoopSystem,
    params: LoopParams,
    n_frames: int,
    *,
    noise_sigma: float = 0.0,
    screen: FrozenFlowScreen | None = None,
    seed: int = 0,
) -> np.ndarray:
    """Modal open-loop input ``R (S * turbulence slopes + noise)``, ``(T, n_mod)``."""
    drive = np.zeros((n_frames, system.n_mod))
    if screen is not None:
        turb = turbulence_slopes(system, screen, n_frames) @ system.reconstructor.T
        drive += apply_tf(turb, lambda f: wfs_tf(f, params), params.frame_rate)
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        n_slopes = system.d_ref.shape[0]
        drive += (noise_sigma * rng.standard_normal((n_frames, n_slopes))) @ system.reconstructor.T
    return drive


def run_loop(
    system: LoopSystem,
    params: LoopParams,
    misreg=ZERO,
    noise_sigma: float = 0.0,
    screen: FrozenFlowScreen | None = None,
    n_frames: int = 4096,
    seed: int = 0,
    *,
    n_sub: int = 8,
    coupling: np.ndarray | None = None,
    drive: np.ndarray | None = None,
) -> Telemetry:
    """Simulate the closed loop with the DM seen through ``misreg``.

    Turbulence and slope noise enter at the WFS; the loop is closed on the
    ``n_mod`` controlled modes through the reference command matrix.
    ``coupling`` overrides the modal coupling matrix ``R D(misreg)``;
    ``drive`` adds a precomputed modal input (see :func:`loop_drive`).
    """
    if n_frames < 2:
        raise InputError("need at least 2 frames")
    if params.n_mod != system.n_mod:
        raise InputError("params.n_mod differs from the command matrix size")
    misreg = _as_misreg(misreg)
    b = system.coupling(misreg) if coupling is None else np.asarray(coupling, dtype=float)
    u = loop_drive(system, params, n_frames, noise_sigma=noise_sigma, screen=screen, seed=seed)
    if drive is not None:
        if drive.shape != u.shape:
            raise InputError("drive has the wrong shape")
        u = u + drive
    modal, residual = integrate_loop(b, u, params, n_sub=n_sub)
    commands = modal @ system.basis.modes
    return Telemetry(commands, params, params.frame_rate, misreg, modal, residual, u)

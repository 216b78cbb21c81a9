"""Simulation rigs tying presets, the loop simulator and both estimators together.

These back the CLI and the acceptance suite: each rig owns the cached pieces
(reference IM, command matrix, turbulence drive, Fourier operator) so that
corrective loops and sweeps only pay for what changes between calls.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import cl_estimator, estimator2d, loopsim
from .errors import InputError
from .forward_model import ZERO, Misreg, ModalBasis, ModalIM, _as_misreg, build_modal_im, slope_rms
from .presets import System

SCREEN_OVERSAMPLE = 4  # screen pixels per subaperture, as the WFS model samples


def rotate_dm(system: System, angle_deg: float) -> System:
    """Same system with the DM lattice rotated by ``angle_deg`` in the WFS frame.

    Commands, modes and the projector stay in the DM's own frame, so a WFS
    shift shows up rotated by ``-angle_deg`` in the estimators.
    """
    a = math.radians(angle_deg)
    r = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    grid = dataclasses.replace(system.grid, positions=system.grid.positions @ r.T)
    basis = ModalBasis(system.basis.modes, grid, system.basis.eigenvalues)
    return dataclasses.replace(system, grid=grid, basis=basis)


def _fft_size(n: int) -> int:
    # smallest 2^a or 3 * 2^a >= n
    p = 1 << max(0, math.ceil(math.log2(n)))
    return p * 3 // 4 if p * 3 // 4 >= n and p >= 4 else p


def make_screen(system: System, seed: int, *, size: int | None = None, wind=None) -> loopsim.FrozenFlowScreen:
    """Von Karman frozen-flow screen sampled for the preset's WFS."""
    p = system.preset
    pupil = system.sub.n_side * SCREEN_OVERSAMPLE + 1
    if size is None:
        size = _fft_size(2 * pupil)
    return loopsim.make_frozen_flow(
        p.r0, p.L0, p.wind if wind is None else wind, size, seed,
        pixel_scale=system.delta / SCREEN_OVERSAMPLE, frame_period=system.params.tau_rtc, pupil_pixels=pupil,
    )


def wind_band(system: System, wind=None) -> float:
    """Largest ``|k.v|`` over the control space, in Hz."""
    v = np.asarray(system.preset.wind if wind is None else wind, float)
    return cl_estimator.control_radius(system.params.n_mod, system.grid.clear_aperture_diameter) * float(np.hypot(*v))


@dataclass
class ClosedLoopRig:
    system: System
    noise_sigma: float = 1.0
    n_frames: int = 4096
    turbulence: bool = False
    screen_seed: int = 0
    segment_len: int = 512
    overlap: float = 0.5
    f_min: float = 0.0
    clip: float | None = None
    n_sub: int = 8
    _loop: loopsim.LoopSystem | None = field(default=None, init=False, repr=False)
    _drive: np.ndarray | None = field(default=None, init=False, repr=False)
    _fourier: tuple | None = field(default=None, init=False, repr=False)

    @property
    def loop(self) -> loopsim.LoopSystem:
        if self._loop is None:
            s = self.system
            self._loop = loopsim.build_loop_system(s.basis, s.sub, s.params.n_mod)
        return self._loop

    @property
    def control_diameter(self) -> float:
        return self.system.grid.clear_aperture_diameter

    def drive(self) -> np.ndarray | None:
        """Turbulence part of the loop input, shared by every run of this rig."""
        if not self.turbulence:
            return None
        if self._drive is None:
            screen = make_screen(self.system, self.screen_seed)
            self._drive = loopsim.loop_drive(self.loop, self.system.params, self.n_frames, screen=screen)
        return self._drive

    def telemetry(self, misreg=ZERO, seed: int = 0) -> loopsim.Telemetry:
        return loopsim.run_loop(
            self.loop, self.system.params, _as_misreg(misreg), self.noise_sigma,
            n_frames=self.n_frames, seed=seed, n_sub=self.n_sub, drive=self.drive(),
        )

    def _operator(self):
        if self._fourier is None:
            k_max = 1.5 * cl_estimator.control_radius(self.system.params.n_mod, self.control_diameter)
            self._fourier = cl_estimator.fourier_operator(self.system.projector, k_max)
        return self._fourier

    def channels(self, commands: np.ndarray):
        k, m = self._operator()
        c = np.asarray(commands, float) @ m.T
        return k, c.real, c.imag

    def estimate_commands(self, commands: np.ndarray, **kw) -> cl_estimator.ShiftEstimate:
        k, c1, c2 = self.channels(commands)
        opts = dict(segment_len=self.segment_len, overlap=self.overlap, f_min=self.f_min, clip=self.clip)
        opts.update(kw)
        return cl_estimator.estimate_channels(
            k, c1, c2, self.system.params, self.control_diameter, self.system.delta, **opts
        )

    def estimate(self, misreg=ZERO, seed: int = 0) -> cl_estimator.ShiftEstimate:
        return self.estimate_commands(self.telemetry(misreg, seed).commands)

    def batch_estimates(self, misreg, seed: int, batches: int, batch_len: int, stride: int):
        """Estimates on ``batches`` windows of ``batch_len`` frames, ``stride`` apart."""
        from .alignment import batch_starts

        tel = self.telemetry(misreg, seed)
        k, c1, c2 = self.channels(tel.commands)
        out = []
        for s0 in batch_starts(tel.n_frames, batches, batch_len, stride):
            sl = slice(s0, s0 + batch_len)
            out.append(cl_estimator.estimate_channels(
                k, c1[sl], c2[sl], self.system.params, self.control_diameter, self.system.delta,
                segment_len=min(self.segment_len, batch_len), overlap=self.overlap, f_min=self.f_min, clip=self.clip,
            ))
        return out

    def corrective_estimator(self, seed0: int = 0):
        return lambda residual, i: self.estimate(residual, seed0 + i).delta


@dataclass
class OpenLoopRig:
    system: System
    n_modes: int | None = None
    snr: float | None = None  # per-slope S/N; None for noiseless
    radius: int | None = None
    upsample: int = 1
    _ref: ModalIM | None = field(default=None, init=False, repr=False)

    @property
    def modes_used(self) -> int:
        return self.system.basis.n_modes if self.n_modes is None else self.n_modes

    @property
    def reference(self) -> ModalIM:
        if self._ref is None:
            self._ref = build_modal_im(self.system.basis, self.system.sub, ZERO, n_modes_used=self.modes_used)
        return self._ref

    def noise_sigma(self) -> float:
        if self.snr is None:
            return 0.0
        if not self.snr > 0:
            raise InputError("snr must be positive")
        return slope_rms(self.reference) / self.snr

    def measure(self, misreg, seed: int = 0) -> ModalIM:
        return build_modal_im(
            self.system.basis, self.system.sub, _as_misreg(misreg), self.noise_sigma(),
            self.modes_used, seed=seed,
        )

    def correlation_map(self, misreg, seed: int = 0) -> estimator2d.CorrMap:
        return estimator2d.correlation_map(self.measure(misreg, seed), self.reference, self.radius, self.upsample)

    def estimate(self, misreg, seed: int = 0) -> Misreg:
        return self.correlation_map(misreg, seed).peak

    def corrective_estimator(self, seed0: int = 0):
        return lambda residual, i: self.estimate(residual, seed0 + i)

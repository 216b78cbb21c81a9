"""Modal basis, geometric Shack-Hartmann model and modal interaction matrices.

Shift convention: a misregistration ``Misreg(dx, dy)`` displaces the DM (and
the pupil it carries) by ``(+dx, +dy)`` subapertures in the WFS frame, so a
DM pattern ``phi(x)`` is seen by the WFS as ``phi(x - delta)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np
from scipy import ndimage, sparse

from . import _kernels
from .errors import InputError
from .geometry import (
    ActuatorGrid,
    SubapertureGrid,
    ValidMask,
    compute_valid_mask,
    influence_matrix,
    subaperture_flux,
)

PhaseLike = Union[Callable[[np.ndarray, np.ndarray], np.ndarray], np.ndarray]


@dataclass(frozen=True)
class Misreg:
    dx: float = 0.0
    dy: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.dx) and np.isfinite(self.dy)):
            raise InputError("misregistration must be finite")

    @classmethod
    def parse(cls, text: str) -> "Misreg":
        try:
            dx, dy = (float(v) for v in text.split(","))
        except ValueError as exc:
            raise InputError(f"cannot parse shift {text!r}; expected 'dx,dy'") from exc
        return cls(dx, dy)

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy])

    def __add__(self, other: "Misreg") -> "Misreg":
        return Misreg(self.dx + other.dx, self.dy + other.dy)

    def __sub__(self, other: "Misreg") -> "Misreg":
        return Misreg(self.dx - other.dx, self.dy - other.dy)

    def scaled(self, k: float) -> "Misreg":
        return Misreg(self.dx * k, self.dy * k)

    def norm(self) -> float:
        return float(np.hypot(self.dx, self.dy))


ZERO = Misreg(0.0, 0.0)


def _as_misreg(shift) -> Misreg:
    if isinstance(shift, Misreg):
        return shift
    dx, dy = shift
    return Misreg(float(dx), float(dy))


@dataclass(frozen=True)
class ModalBasis:
    modes: np.ndarray  # (n_modes, n_act), orthonormal rows
    grid: ActuatorGrid
    eigenvalues: np.ndarray

    @property
    def n_modes(self) -> int:
        return self.modes.shape[0]

    def subset(self, n: int) -> "ModalBasis":
        if n > self.n_modes:
            raise InputError(f"basis holds only {self.n_modes} modes")
        return ModalBasis(self.modes[:n], self.grid, self.eigenvalues[:n])


@dataclass(frozen=True)
class ModalIM:
    slopes_x: np.ndarray  # (n_modes, n_side, n_side)
    slopes_y: np.ndarray
    valid: ValidMask
    grid: SubapertureGrid

    @property
    def n_modes(self) -> int:
        return self.slopes_x.shape[0]

    @property
    def n_side(self) -> int:
        return self.slopes_x.shape[1]

    @property
    def mask(self) -> np.ndarray:
        return self.valid.valid

    def stacked(self) -> np.ndarray:
        """Slope maps with the x/y channels as extra modes: ``(2 n_modes, n, n)``."""
        return np.concatenate([self.slopes_x, self.slopes_y], axis=0)


def build_kl_basis(grid: ActuatorGrid, n_modes: int, r0_over_D: float = 0.1) -> ModalBasis:
    """Karhunen-Loeve modes of Kolmogorov turbulence sampled on the actuators.

    The phase covariance is ``-D(r)/2`` with ``D(r) = 6.88 (r/r0)^(5/3)``,
    double-centered to project out piston. Eigenvectors are sorted by
    decreasing variance; the tip/tilt pair is rotated onto the x/y ramps.
    """
    n_act = grid.n_act
    if n_modes > n_act - 1:
        raise InputError(f"at most {n_act - 1} piston-free modes on {n_act} actuators")
    if n_modes < 1:
        raise InputError("n_modes must be >= 1")
    pos = grid.positions
    r0 = r0_over_D * grid.clear_aperture_diameter
    r = np.hypot(pos[:, None, 0] - pos[None, :, 0], pos[:, None, 1] - pos[None, :, 1])
    cov = -0.5 * 6.88 * (r / r0) ** (5.0 / 3.0)
    cov -= cov.mean(axis=0, keepdims=True)
    cov -= cov.mean(axis=1, keepdims=True)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    modes = vecs[:, :n_modes].T.copy()
    # deterministic sign: largest-magnitude entry positive
    idx = np.argmax(np.abs(modes), axis=1)
    modes *= np.sign(modes[np.arange(n_modes), idx])[:, None]
    if n_modes >= 2:
        # orthogonal Procrustes inside the (near-degenerate) tip/tilt pair
        ramps = pos - pos.mean(axis=0)
        ramps /= np.linalg.norm(ramps, axis=0)
        u, _, vt = np.linalg.svd(modes[:2] @ ramps)
        modes[:2] = vt.T @ u.T @ modes[:2]
    return ModalBasis(modes, grid, vals[:n_modes])


def sampling_points(sub: SubapertureGrid, shift=ZERO, oversample: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """1D coordinates of the sub-subaperture lattice, pulled back by ``shift``.

    The WFS window edges sit at ``(k / q - n / 2) * Delta``; subtracting the
    shift gives where those windows land on the (displaced) DM.
    """
    shift = _as_misreg(shift)
    n, d, q = sub.n_side, sub.sub_pitch_delta, oversample
    base = (np.arange(n * q + 1) / q - n / 2.0) * d
    return base - shift.dx * d, base - shift.dy * d


def window_slopes(phi: np.ndarray, n_side: int, oversample: int, delta: float) -> tuple[np.ndarray, np.ndarray]:
    """Average gradient over each subaperture window of a sampled phase.

    ``phi`` has shape ``(..., n q + 1, n q + 1)`` on the lattice returned by
    :func:`sampling_points`.
    """
    return _kernels.window_slopes(np.ascontiguousarray(phi, dtype=float), n_side, oversample, delta)


def sh_slopes(
    phase: PhaseLike,
    sub: SubapertureGrid,
    shift=ZERO,
    *,
    pixel_size: float | None = None,
    oversample: int = 4,
) -> tuple[np.ndarray, np.ndarray]:
    """Geometric SH slopes of a phase seen through displaced subapertures.

    ``phase`` is either a vectorized callable ``phase(x, y)`` or a raster
    centered on the optical axis with pixels of ``pixel_size`` meters. Rasters
    are interpolated bilinearly and must resolve at least 4 pixels per
    subaperture.
    """
    if oversample < 1:
        raise InputError("oversample must be >= 1")
    xs, ys = sampling_points(sub, shift, oversample)
    if callable(phase):
        xx, yy = np.meshgrid(xs, ys)
        phi = np.asarray(phase(xx, yy), dtype=float)
    else:
        raster = np.asarray(phase, dtype=float)
        if pixel_size is None:
            raise InputError("pixel_size is required for raster input")
        if sub.sub_pitch_delta / pixel_size < 4 - 1e-9:
            raise InputError("phase raster must sample each subaperture with >= 4 pixels")
        ny, nx = raster.shape
        col = xs / pixel_size + (nx - 1) / 2.0
        row = ys / pixel_size + (ny - 1) / 2.0
        rr, cc = np.meshgrid(row, col, indexing="ij")
        phi = ndimage.map_coordinates(raster, [rr, cc], order=1, mode="nearest")
    sx, sy = window_slopes(phi, sub.n_side, oversample, sub.sub_pitch_delta)
    mask = sub.wfs_mask
    return np.where(mask, sx, 0.0), np.where(mask, sy, 0.0)


def surface_operator(grid: ActuatorGrid, sub: SubapertureGrid, shift=ZERO, oversample: int = 4) -> sparse.csr_matrix:
    """Sparse map from commands to the DM surface on the shifted sampling lattice."""
    xs, ys = sampling_points(sub, shift, oversample)
    xx, yy = np.meshgrid(xs, ys)
    return influence_matrix(grid, np.column_stack([xx.ravel(), yy.ravel()]))


def zonal_slopes(
    grid: ActuatorGrid, sub: SubapertureGrid, commands: np.ndarray, shift=ZERO, oversample: int = 4
) -> tuple[np.ndarray, np.ndarray]:
    """SH slopes of DM command vectors (rows of ``commands``) under ``shift``.

    Returns two ``(n_vec, n_side, n_side)`` stacks, unmasked.
    """
    commands = np.atleast_2d(np.asarray(commands, dtype=float))
    surf = surface_operator(grid, sub, shift, oversample)
    m = sub.n_side * oversample + 1
    phi = (surf @ commands.T).T.reshape(-1, m, m)
    return window_slopes(phi, sub.n_side, oversample, sub.sub_pitch_delta)


def build_modal_im(
    basis: ModalBasis,
    sub: SubapertureGrid,
    shift=ZERO,
    noise_sigma: float = 0.0,
    n_modes_used: int | None = None,
    *,
    seed: int = 0,
    flux_threshold: float = 0.5,
    oversample: int = 4,
) -> ModalIM:
    """Modal IM of the first ``n_modes_used`` modes seen under ``shift``.

    The DM influence functions are evaluated directly on the displaced
    sampling windows, so fractional shifts are exact. Noise is i.i.d.
    Gaussian per valid slope, drawn from a per-mode stream keyed on
    ``(seed, mode)``.
    """
    n_used = basis.n_modes if n_modes_used is None else n_modes_used
    if n_used > basis.n_modes:
        raise InputError(f"n_modes_used={n_used} exceeds basis size {basis.n_modes}")
    shift = _as_misreg(shift)
    sx, sy = zonal_slopes(basis.grid, sub, basis.modes[:n_used], shift, oversample)
    valid = compute_valid_mask(subaperture_flux(sub, (shift.dx, shift.dy)), flux_threshold, sub.wfs_mask)
    mask = valid.valid
    if noise_sigma > 0:
        for m in range(n_used):
            rng = np.random.default_rng([seed, m])
            sx[m] += noise_sigma * rng.standard_normal(mask.shape)
            sy[m] += noise_sigma * rng.standard_normal(mask.shape)
    sx = np.where(mask, sx, 0.0)
    sy = np.where(mask, sy, 0.0)
    return ModalIM(sx, sy, valid, sub)


def slope_rms(im: ModalIM) -> float:
    """RMS of the slopes over valid subapertures, both channels, all modes."""
    m = im.mask
    vals = np.concatenate([im.slopes_x[:, m].ravel(), im.slopes_y[:, m].ravel()])
    return float(np.sqrt(np.mean(vals**2)))

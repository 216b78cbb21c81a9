"""DM actuator layouts, Shack-Hartmann subaperture grids and command projectors.

Coordinates are in meters with the optical axis at the origin. 2D maps are
indexed ``[row, col] = [y, x]`` with x increasing along columns.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from .errors import DegenerateGeometryError, EmptyMaskError, InputError

CARTESIAN = "cartesian"
HEXAGONAL = "hexagonal"

# Gaussian influence kernel: FWHM of one actuator pitch.
FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))
KERNEL_TRUNCATION = 4.0  # in units of sigma


@dataclass(frozen=True)
class ActuatorGrid:
    layout: str
    positions: np.ndarray  # (n_act, 2) x, y in meters
    pitch: float
    clear_aperture_diameter: float

    def __post_init__(self):
        pos = np.ascontiguousarray(self.positions, dtype=float).reshape(-1, 2)
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        if self.layout not in (CARTESIAN, HEXAGONAL):
            raise InputError(f"unknown actuator layout {self.layout!r}")
        if self.pitch <= 0:
            raise InputError("pitch must be positive")

    @property
    def n_act(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True)
class SubapertureGrid:
    n_side: int
    sub_pitch_delta: float
    wfs_mask: np.ndarray
    pupil_diameter: float
    central_obscuration: float = 0.0

    def __post_init__(self):
        mask = np.asarray(self.wfs_mask, dtype=bool).copy()
        if mask.shape != (self.n_side, self.n_side):
            raise InputError("wfs_mask shape does not match n_side")
        if self.sub_pitch_delta <= 0:
            raise InputError("sub_pitch_delta must be positive")
        mask.setflags(write=False)
        object.__setattr__(self, "wfs_mask", mask)

    @property
    def n_valid(self) -> int:
        return int(self.wfs_mask.sum())

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        """1D subaperture center coordinates along x (and y), in meters."""
        c = (np.arange(self.n_side) - (self.n_side - 1) / 2.0) * self.sub_pitch_delta
        return c, c


@dataclass(frozen=True)
class ValidMask:
    valid: np.ndarray
    flux_threshold: float


@dataclass(frozen=True)
class Projector:
    """Sparse linear map from actuator commands to a low-resolution raster."""

    raster_n: int
    weights: sparse.csr_matrix  # (raster_n**2, n_act)
    pixels_per_actuator: float
    pixel_size: float
    pupil: np.ndarray = field(repr=False)  # (raster_n, raster_n) bool

    @property
    def n_act(self) -> int:
        return self.weights.shape[1]

    def pixel_centers(self) -> np.ndarray:
        return _raster_centers(self.raster_n, self.pixel_size)


def _raster_centers(n: int, pixel_size: float) -> np.ndarray:
    return (np.arange(n) - (n - 1) / 2.0) * pixel_size


def build_cartesian_grid(n_side: int, pitch: float, aperture_diameter: float) -> ActuatorGrid:
    """Square lattice of ``n_side**2`` sites clipped to a centered disc.

    The lattice is symmetric about the origin, so odd ``n_side`` puts an
    actuator on axis and even ``n_side`` gives half-integer coordinates.
    """
    if n_side < 2:
        raise InputError("n_side must be >= 2")
    if pitch <= 0:
        raise InputError("pitch must be positive")
    c = (np.arange(n_side) - (n_side - 1) / 2.0) * pitch
    xx, yy = np.meshgrid(c, c)
    keep = np.hypot(xx, yy) <= aperture_diameter / 2.0 * (1 + 1e-12)
    if not keep.any():
        raise DegenerateGeometryError("aperture selects no actuator")
    pos = np.column_stack([xx[keep], yy[keep]])
    return ActuatorGrid(CARTESIAN, pos, float(pitch), float(aperture_diameter))


def lattice_offset(grid: ActuatorGrid) -> np.ndarray:
    """Offset (in pitch units) of the lattice origin for Cartesian grids."""
    frac = grid.positions[0] / grid.pitch
    return frac - np.round(frac)


def build_hex_grid(n_rings: int, pitch: float, drop_center: bool = False) -> ActuatorGrid:
    """Hexagonal rings around a central actuator.

    Ring r holds 6r actuators, so the full grid has ``1 + 3 n (n + 1)`` sites.
    ``drop_center`` removes the central one (61 -> 60 for four rings).
    """
    if n_rings < 1:
        raise InputError("n_rings must be >= 1")
    if pitch <= 0:
        raise InputError("pitch must be positive")
    pts = [] if drop_center else [(0.0, 0.0)]
    corners = [np.array([math.cos(math.pi / 3 * s), math.sin(math.pi / 3 * s)]) for s in range(6)]
    for r in range(1, n_rings + 1):
        for s in range(6):
            a, b = corners[s], corners[(s + 1) % 6]
            for t in range(r):
                p = (a * (r - t) + b * t) * pitch
                pts.append((p[0], p[1]))
    aperture = (2 * n_rings + 1) * pitch
    return ActuatorGrid(HEXAGONAL, np.array(pts), float(pitch), float(aperture))


def build_subaperture_grid(
    n_side: int, pupil_diameter: float, central_obscuration: float = 0.0
) -> SubapertureGrid:
    if n_side < 4:
        raise InputError("n_side must be >= 4")
    if not 0.0 <= central_obscuration < 1.0:
        raise InputError("central obscuration must lie in [0, 1)")
    delta = pupil_diameter / n_side
    c = (np.arange(n_side) - (n_side - 1) / 2.0) * delta
    rr = np.hypot(*np.meshgrid(c, c))
    radius = pupil_diameter / 2.0
    mask = (rr > central_obscuration * radius) & (rr <= radius * (1 + 1e-12))
    return SubapertureGrid(n_side, delta, mask, float(pupil_diameter), float(central_obscuration))


def subaperture_flux(sub: SubapertureGrid, shift=(0.0, 0.0), oversample: int = 8) -> np.ndarray:
    """Fraction of each subaperture window lit by the annular pupil.

    The pupil is displaced by ``shift`` (in subaperture units) with respect to
    the WFS, i.e. it moves together with the DM.
    """
    n, d = sub.n_side, sub.sub_pitch_delta
    u = (np.arange(oversample) + 0.5) / oversample - 0.5
    c = (np.arange(n) - (n - 1) / 2.0)
    fine_x = ((c[:, None] + u[None, :]).ravel() - shift[0]) * d
    fine_y = ((c[:, None] + u[None, :]).ravel() - shift[1]) * d
    rr = np.hypot(*np.meshgrid(fine_x, fine_y))
    radius = sub.pupil_diameter / 2.0
    lit = (rr <= radius) & (rr > sub.central_obscuration * radius)
    return lit.reshape(n, oversample, n, oversample).mean(axis=(1, 3))


def compute_valid_mask(flux: np.ndarray, threshold_frac: float = 0.5, wfs_mask=None) -> ValidMask:
    """Keep subapertures receiving at least ``threshold_frac`` of the median flux.

    The median is taken over ``wfs_mask`` (all cells if omitted) and the
    result is restricted to it.
    """
    flux = np.asarray(flux, dtype=float)
    if np.any(flux < 0):
        raise InputError("flux must be non-negative")
    region = np.ones(flux.shape, bool) if wfs_mask is None else np.asarray(wfs_mask, bool)
    if not np.any(flux[region] > 0):
        raise EmptyMaskError("no illuminated subaperture")
    med = np.median(flux[region])
    valid = region & (flux >= threshold_frac * med) & (flux > 0)
    if not valid.any():
        raise EmptyMaskError("flux threshold rejects every subaperture")
    return ValidMask(valid, float(threshold_frac))


def influence_matrix(grid: ActuatorGrid, points: np.ndarray) -> sparse.csr_matrix:
    """Normalized Gaussian influence weights of every actuator at ``points``.

    Row p is ``K(p - a_j) / max(sum_j K(p - a_j), 1)``: a partition of unity
    wherever the kernels overlap enough, the bare kernel at the fringe.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    sigma = FWHM_TO_SIGMA * grid.pitch
    cutoff = KERNEL_TRUNCATION * sigma
    dist = cKDTree(points).sparse_distance_matrix(
        cKDTree(grid.positions), cutoff, output_type="coo_matrix"
    )
    k = np.exp(-0.5 * (dist.data / sigma) ** 2)
    mat = sparse.csr_matrix((k, (dist.row, dist.col)), shape=(points.shape[0], grid.n_act))
    total = np.asarray(mat.sum(axis=1)).ravel()
    scale = 1.0 / np.maximum(total, 1.0)
    return sparse.diags(scale) @ mat


def build_projector(grid: ActuatorGrid, pixels_per_actuator: float = 1.5) -> Projector:
    if not 1.0 <= pixels_per_actuator <= 4.0:
        raise InputError("pixels_per_actuator must lie in [1, 4]")
    diameter = grid.clear_aperture_diameter
    raster_n = int(math.ceil(pixels_per_actuator * diameter / grid.pitch - 1e-9))
    pixel = diameter / raster_n
    c = _raster_centers(raster_n, pixel)
    xx, yy = np.meshgrid(c, c)
    pupil = np.hypot(xx, yy) <= diameter / 2.0
    w = influence_matrix(grid, np.column_stack([xx.ravel(), yy.ravel()]))
    w = (sparse.diags(pupil.ravel().astype(float)) @ w).tocsr()
    w.eliminate_zeros()
    return Projector(raster_n, w, float(pixels_per_actuator), float(pixel), pupil)


def project_commands(p: Projector, commands: np.ndarray) -> np.ndarray:
    """Map command vector(s) to raster(s).

    ``commands`` may be ``(n_act,)`` or ``(T, n_act)``; the output is
    ``(raster_n, raster_n)`` or ``(T, raster_n, raster_n)``.
    """
    commands = np.asarray(commands, dtype=float)
    if commands.shape[-1] != p.n_act:
        raise InputError(f"expected {p.n_act} commands, got {commands.shape[-1]}")
    n = p.raster_n
    if commands.ndim == 1:
        return (p.weights @ commands).reshape(n, n)
    out = (p.weights @ commands.T).T
    return out.reshape(commands.shape[:-1] + (n, n))

"""Simulation presets and the system bundle they build."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .errors import InputError
from .forward_model import ModalBasis, build_kl_basis
from .geometry import (
    ActuatorGrid,
    Projector,
    SubapertureGrid,
    build_cartesian_grid,
    build_hex_grid,
    build_projector,
    build_subaperture_grid,
)
from .loopsim import LoopParams


@dataclass(frozen=True)
class Preset:
    name: str
    layout: str  # "cartesian" or "hexagonal"
    wfs_side: int
    pupil_diameter: float
    central_obscuration: float = 0.0
    dm_side: int = 0  # cartesian lattice sites per side
    dm_radius_pitch: float = 0.0  # cartesian clip radius, in pitches
    hex_rings: int = 4
    drop_center: bool = True
    dm_pitch_delta: float = 1.0  # DM pitch in subaperture units
    loop_hz: float = 1000.0
    g_int: float = 0.5
    g_leak: float = 0.01
    n_mod: int = 35
    n_modes: int = 35  # basis size, >= n_mod
    noise_sigma: float = 1.0
    pixels_per_actuator: float = 1.5
    r0: float = 0.14
    L0: float = 25.0
    wind: tuple[float, float] = (8.4, 0.0)

    @property
    def delta(self) -> float:
        return self.pupil_diameter / self.wfs_side

    def with_(self, **kw) -> "Preset":
        unknown = set(kw) - set(self.__dataclass_fields__)
        if unknown:
            raise InputError(f"unknown preset fields: {sorted(unknown)}")
        return replace(self, **kw)


PRESETS: dict[str, Preset] = {
    # 40x40 SH and a 1432-actuator Cartesian DM (the GRAVITY+ bench scale)
    "gpao40": Preset(
        "gpao40", "cartesian", 40, 8.0, 0.14, dm_side=40, dm_radius_pitch=22.1021,
        loop_hz=1000.0, g_int=0.5, n_mod=800, n_modes=800,
    ),
    # small Cartesian system used by the closed-loop experiments
    "sim20": Preset(
        "sim20", "cartesian", 20, 1.8, 0.0, dm_side=21, dm_radius_pitch=10.75,
        loop_hz=1000.0, g_int=0.05, n_mod=200, n_modes=200,
    ),
    # same optics, fewer modes and a faster loop: stays stable at 0.6 Delta and
    # keeps rho0 weight above the wind band; max k.v over the control space ~ 50 Hz
    "sim20ff": Preset(
        "sim20ff", "cartesian", 20, 1.8, 0.0, dm_side=21, dm_radius_pitch=10.75,
        loop_hz=1000.0, g_int=0.4, n_mod=50, n_modes=50, noise_sigma=20.0, wind=(24.0, 0.0),
    ),
    # 60-actuator hexagonal DMs with the Table 1 loop settings
    "chara": Preset(
        "chara", "hexagonal", 10, 1.0, 0.0, hex_rings=4, dm_pitch_delta=10.0 / 8.0,
        loop_hz=441.0, g_int=0.19, n_mod=41, n_modes=41,
    ),
    "ciao": Preset(
        "ciao", "hexagonal", 10, 8.0, 0.0, hex_rings=4, dm_pitch_delta=10.0 / 8.0,
        loop_hz=500.0, g_int=0.4, n_mod=45, n_modes=45,
    ),
}


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise InputError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass(frozen=True)
class System:
    preset: Preset
    grid: ActuatorGrid
    sub: SubapertureGrid
    basis: ModalBasis
    projector: Projector
    params: LoopParams = field(repr=False)

    @property
    def delta(self) -> float:
        return self.sub.sub_pitch_delta


def build_grid(p: Preset) -> ActuatorGrid:
    pitch = p.dm_pitch_delta * p.delta
    if p.layout == "cartesian":
        return build_cartesian_grid(p.dm_side, pitch, 2.0 * p.dm_radius_pitch * pitch)
    if p.layout == "hexagonal":
        return build_hex_grid(p.hex_rings, pitch, drop_center=p.drop_center)
    raise InputError(f"unknown layout {p.layout!r}")


@lru_cache(maxsize=16)
def _build(p: Preset) -> System:
    grid = build_grid(p)
    sub = build_subaperture_grid(p.wfs_side, p.pupil_diameter, p.central_obscuration)
    if p.n_mod > p.n_modes:
        raise InputError("n_mod exceeds the basis size")
    basis = build_kl_basis(grid, p.n_modes)
    proj = build_projector(grid, p.pixels_per_actuator)
    params = LoopParams.from_rate(p.loop_hz, p.g_int, p.g_leak, p.n_mod)
    return System(p, grid, sub, basis, proj, params)


def build_system(preset: Preset | str, **overrides) -> System:
    """Geometry, KL basis, projector and loop parameters of a preset (cached)."""
    p = get_preset(preset) if isinstance(preset, str) else preset
    if overrides:
        p = p.with_(**overrides)
    return _build(p)


def loop_params_from_dict(d: dict, base: LoopParams | None = None) -> LoopParams:
    """Loop settings from a ``{loop_hz, g_int, g_leak, n_mod}`` mapping."""
    known = {"loop_hz", "g_int", "g_leak", "n_mod", "tau_wfs", "tau_rtc", "tau_lat", "tau_dm"}
    unknown = set(d) - known
    if unknown:
        raise InputError(f"unknown loop parameters: {sorted(unknown)}")
    if base is None and "loop_hz" not in d:
        raise InputError("loop_hz is required")
    if "loop_hz" in d:
        hz = float(d["loop_hz"])
        if not math.isfinite(hz) or hz <= 0:
            raise InputError("loop_hz must be positive")
        tau = 1.0 / hz
        taus = dict(tau_wfs=tau, tau_rtc=tau, tau_lat=tau, tau_dm=tau)
    else:
        taus = dict(tau_wfs=base.tau_wfs, tau_rtc=base.tau_rtc, tau_lat=base.tau_lat, tau_dm=base.tau_dm)
    for key in ("tau_wfs", "tau_rtc", "tau_lat", "tau_dm"):
        if key in d:
            taus[key] = float(d[key])
    g_int = float(d.get("g_int", base.g_int if base else np.nan))
    g_leak = d.get("g_leak", base.g_leak if base else 0.0)
    g_leak = 0.0 if g_leak is None else float(g_leak)
    n_mod = int(d.get("n_mod", base.n_mod if base else 1))
    if not math.isfinite(g_int):
        raise InputError("g_int is required")
    return LoopParams(g_int=g_int, g_leak=g_leak, n_mod=n_mod, **taus)


def loop_params_to_dict(p: LoopParams) -> dict:
    return {"loop_hz": p.frame_rate, "g_int": p.g_int, "g_leak": p.g_leak, "n_mod": p.n_mod}


def build_custom(
    preset: Preset | str,
    *,
    grid: ActuatorGrid | None = None,
    sub: SubapertureGrid | None = None,
    params: LoopParams | None = None,
) -> System:
    """Preset system with the geometry and/or loop settings swapped out.

    A new grid rebuilds the basis and the projector; ``params.n_mod`` may
    not exceed the preset's basis size.
    """
    base = build_system(preset)
    p = base.preset
    n_mod = params.n_mod if params is not None else p.n_mod
    n_modes = max(p.n_modes, n_mod)
    if grid is None and sub is None and n_modes == p.n_modes:
        basis, proj = base.basis, base.projector
        grid = base.grid
    else:
        grid = base.grid if grid is None else grid
        if n_modes > grid.n_act - 1:
            raise InputError(f"n_mod={n_mod} exceeds the {grid.n_act - 1} modes the DM supports")
        basis = build_kl_basis(grid, n_modes)
        proj = base.projector if grid is base.grid else build_projector(grid, p.pixels_per_actuator)
    sub = base.sub if sub is None else sub
    params = base.params if params is None else params
    return System(p.with_(n_mod=n_mod, n_modes=n_modes, g_int=params.g_int, g_leak=params.g_leak),
                  grid, sub, basis, proj, params)

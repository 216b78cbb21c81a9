"""File formats: geometry JSON, MIM1 interaction matrices, TLM1 telemetry.

Binary layouts (all little-endian):

MIM1
    ``b"MIM1"``, uint32 n_modes, uint32 n_side, n_side**2 uint8 mask (row-major),
    then float64 x-slopes ``(n_modes, n_side, n_side)`` followed by the y-slopes.

TLM1
    ``b"TLM1"``, uint64 T, uint32 n_act, float64 frame_rate_hz, g_int, g_leak,
    tau_wfs, tau_rtc, tau_lat, tau_dm, then ``(T, n_act)`` float64 commands.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError
from .forward_model import ModalIM
from .geometry import CARTESIAN, HEXAGONAL, ActuatorGrid, SubapertureGrid, ValidMask
from .loopsim import LoopParams, Telemetry

MIM_MAGIC = b"MIM1"
TLM_MAGIC = b"TLM1"
_MIM_HEAD = struct.Struct("<4sII")
_TLM_HEAD = struct.Struct("<4sQI7d")


# --------------------------------------------------------------------------
# Geometry


@dataclass(frozen=True)
class Geometry:
    grid: ActuatorGrid
    sub: SubapertureGrid

    def to_dict(self) -> dict:
        return {
            "layout": self.grid.layout,
            "pitch_m": self.grid.pitch,
            "positions": self.grid.positions.tolist(),
            "n_side": self.sub.n_side,
            "wfs_mask": self.sub.wfs_mask.astype(int).tolist(),
            # optional extras, needed to rebuild the exact system
            "clear_aperture_m": self.grid.clear_aperture_diameter,
            "pupil_diameter_m": self.sub.pupil_diameter,
            "central_obscuration": self.sub.central_obscuration,
        }


def geometry_from_dict(d: dict) -> Geometry:
    missing = {"layout", "pitch_m", "positions", "n_side", "wfs_mask"} - set(d)
    if missing:
        raise InputError(f"geometry is missing {sorted(missing)}")
    layout = d["layout"]
    if layout not in (CARTESIAN, HEXAGONAL):
        raise InputError(f"unknown layout {layout!r}")
    try:
        pitch = float(d["pitch_m"])
        pos = np.asarray(d["positions"], dtype=float)
        n_side = int(d["n_side"])
        mask = np.asarray(d["wfs_mask"], dtype=int)
    except (TypeError, ValueError) as exc:
        raise InputError(f"malformed geometry: {exc}") from None
    if pos.ndim != 2 or pos.shape[1] != 2 or len(pos) == 0:
        raise InputError("positions must be a non-empty list of [x, y]")
    if not np.all(np.isfinite(pos)):
        raise InputError("positions must be finite")
    if mask.size != n_side * n_side or not np.isin(mask, (0, 1)).all():
        raise InputError("wfs_mask must hold n_side**2 zeros and ones")
    mask = mask.reshape(n_side, n_side).astype(bool)
    if not mask.any():
        raise InputError("wfs_mask selects no subaperture")
    aperture = float(d.get("clear_aperture_m", 2.0 * np.hypot(*pos.T).max() + pitch))
    pupil = float(d.get("pupil_diameter_m", aperture))
    grid = ActuatorGrid(layout, pos, pitch, aperture)
    sub = SubapertureGrid(n_side, pupil / n_side, mask, pupil, float(d.get("central_obscuration", 0.0)))
    return Geometry(grid, sub)


def write_geometry(path, geom: Geometry) -> None:
    Path(path).write_text(json.dumps(geom.to_dict()))


def read_geometry(path) -> Geometry:
    return geometry_from_dict(read_json(path))


def read_json(path) -> dict:
    try:
        d = json.loads(Path(path).read_text())
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path} is not valid JSON: {exc}") from None
    if not isinstance(d, dict):
        raise InputError(f"{path} must hold a JSON object")
    return d


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None


# --------------------------------------------------------------------------
# MIM1


def encode_mim(im: ModalIM) -> bytes:
    n, side = im.n_modes, im.n_side
    head = _MIM_HEAD.pack(MIM_MAGIC, n, side)
    mask = np.ascontiguousarray(im.mask, dtype=np.uint8).tobytes()
    body = np.concatenate([im.slopes_x.ravel(), im.slopes_y.ravel()]).astype("<f8").tobytes()
    return head + mask + body


def decode_mim(data: bytes, sub: SubapertureGrid | None = None) -> ModalIM:
    """Inverse of :func:`encode_mim`. ``sub`` defaults to a unit-pitch grid on the mask."""
    if len(data) < _MIM_HEAD.size:
        raise InputError("truncated MIM1 header")
    magic, n, side = _MIM_HEAD.unpack_from(data)
    if magic != MIM_MAGIC:
        raise InputError(f"bad magic {magic!r}, expected {MIM_MAGIC!r}")
    off = _MIM_HEAD.size
    need = off + side * side + 2 * n * side * side * 8
    if len(data) != need:
        raise InputError(f"MIM1 size {len(data)} does not match header ({need})")
    mask = np.frombuffer(data, np.uint8, side * side, off).reshape(side, side)
    if not np.isin(mask, (0, 1)).all():
        raise InputError("MIM1 mask holds values other than 0/1")
    mask = mask.astype(bool)
    vals = np.frombuffer(data, "<f8", 2 * n * side * side, off + side * side).astype(float)
    vals = vals.reshape(2, n, side, side)
    if sub is None:
        sub = SubapertureGrid(side, 1.0, mask, float(side))
    elif sub.n_side != side:
        raise InputError("geometry n_side differs from the IM")
    return ModalIM(vals[0].copy(), vals[1].copy(), ValidMask(mask, 0.0), sub)


def write_mim(path, im: ModalIM) -> None:
    Path(path).write_bytes(encode_mim(im))


def read_mim(path, sub: SubapertureGrid | None = None) -> ModalIM:
    return decode_mim(_read_bytes(path), sub)


# --------------------------------------------------------------------------
# TLM1


def encode_tlm(t: Telemetry) -> bytes:
    p = t.params
    head = _TLM_HEAD.pack(
        TLM_MAGIC, t.n_frames, t.n_act, t.frame_rate, p.g_int, p.g_leak,
        p.tau_wfs, p.tau_rtc, p.tau_lat, p.tau_dm,
    )
    return head + np.ascontiguousarray(t.commands, dtype="<f8").tobytes()


def decode_tlm(data: bytes, n_mod: int = 1) -> Telemetry:
    """Inverse of :func:`encode_tlm`. ``n_mod`` is not stored, so it is passed in."""
    if len(data) < _TLM_HEAD.size:
        raise InputError("truncated TLM1 header")
    magic, t, n_act, rate, g_int, g_leak, tw, tr, tl, td = _TLM_HEAD.unpack_from(data)
    if magic != TLM_MAGIC:
        raise InputError(f"bad magic {magic!r}, expected {TLM_MAGIC!r}")
    need = _TLM_HEAD.size + t * n_act * 8
    if len(data) != need:
        raise InputError(f"TLM1 size {len(data)} does not match header ({need})")
    cmds = np.frombuffer(data, "<f8", t * n_act, _TLM_HEAD.size).astype(float).reshape(t, n_act)
    params = LoopParams(tw, tr, tl, td, g_int, g_leak, int(n_mod))
    return Telemetry(cmds, params, rate)


def write_tlm(path, t: Telemetry) -> None:
    Path(path).write_bytes(encode_tlm(t))


def read_tlm(path, n_mod: int = 1) -> Telemetry:
    return decode_tlm(_read_bytes(path), n_mod)

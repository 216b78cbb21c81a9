"""``misreg`` command line.

Settings resolve as: command-line flag, then the ``--config`` file, then the
preset. Loop settings come from the preset, overridden by a ``"loop"`` block
in the config file, overridden by ``--params loop.json``.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__, alignment, cl_estimator, estimator2d, io
from .errors import InputError, MisregError, NonConvergenceError
from .experiments import ClosedLoopRig, OpenLoopRig, make_screen, rotate_dm
from .forward_model import Misreg, _as_misreg, build_modal_im
from .loopsim import build_loop_system, rho0, run_loop
from .presets import PRESETS, build_custom, build_system, loop_params_from_dict

DEFAULT_PRESET = "chara"


class _Settings:
    """Flag > config file > fallback lookup for one invocation."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.config = io.read_json(args.config) if getattr(args, "config", None) else {}

    def get(self, name: str, default=None):
        v = getattr(self.args, name, None)
        if v is not None:
            return v
        key = name.replace("_", "-")
        for k in (name, key):
            if k in self.config:
                return self.config[k]
        return default

    def shift(self, name: str) -> Misreg:
        v = self.get(name)
        if v is None:
            return Misreg(0.0, 0.0)
        if isinstance(v, str):
            return Misreg.parse(v)
        return _as_misreg(v)

    def system(self):
        preset = self.get("preset", DEFAULT_PRESET)
        if preset not in PRESETS:
            raise InputError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        base = PRESETS[preset]
        params = None
        loop = dict(self.config.get("loop", {}))
        if self.args.params:
            loop.update(io.read_json(self.args.params))
        if loop:
            params = loop_params_from_dict(loop, build_system(base).params)
        grid = sub = None
        if self.args.geometry:
            geom = io.read_geometry(self.args.geometry)
            grid, sub = geom.grid, geom.sub
        return build_custom(base, grid=grid, sub=sub, params=params)


def _shift(text: str) -> Misreg:
    try:
        return Misreg.parse(text)
    except (ValueError, InputError) as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _shift_list(text: str) -> list[Misreg]:
    return [_shift(s) for s in text.split(";") if s.strip()]


def _emit_json(obj, path) -> None:
    text = json.dumps(obj, indent=2)
    if path in (None, "-"):
        print(text)
    else:
        Path(path).write_text(text + "\n")


def _require_out(s: _Settings) -> str:
    out = s.get("out")
    if not out:
        raise InputError("--out is required")
    return out


# --------------------------------------------------------------------------
# Subcommands


def cmd_geometry(s: _Settings) -> int:
    sys_ = s.system()
    _emit_json(io.Geometry(sys_.grid, sys_.sub).to_dict(), s.get("out"))
    return 0


def cmd_sim_im(s: _Settings) -> int:
    sys_ = s.system()
    n = int(s.get("modes", sys_.basis.n_modes))
    im = build_modal_im(
        sys_.basis, sys_.sub, s.shift("shift"), float(s.get("noise", 0.0)), n,
        seed=int(s.get("seed", 0)),
    )
    io.write_mim(_require_out(s), im)
    return 0


def cmd_sim_loop(s: _Settings) -> int:
    sys_ = s.system()
    seed = int(s.get("seed", 0))
    frames = int(s.get("frames", 4096))
    loop = build_loop_system(sys_.basis, sys_.sub, sys_.params.n_mod)
    screen = None
    if s.get("turbulence", False):
        screen = make_screen(sys_, int(s.get("screen_seed", seed + 1)))
    tel = run_loop(
        loop, sys_.params, s.shift("misreg"), float(s.get("noise", sys_.preset.noise_sigma)),
        screen, frames, seed,
    )
    io.write_tlm(_require_out(s), tel)
    return 0


def cmd_estimate_2d(s: _Settings) -> int:
    sub = s.system().sub if s.args.geometry else None
    meas = io.read_mim(s.get("measured"), sub)
    ref = io.read_mim(s.get("reference"), sub)
    radius = s.get("radius")
    cmap = estimator2d.correlation_map(meas, ref, None if radius is None else int(radius), int(s.get("upsample", 1)))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        peak = estimator2d.estimate_shift(cmap)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    out = {"dx_delta": peak.dx, "dy_delta": peak.dy, "peak_value": cmap.peak_value, "boundary_warning": cmap.boundary}
    if s.get("csv"):
        Path(s.get("csv")).write_text(cmap.to_csv())
    _emit_json(out, s.get("json") or s.get("out"))
    return 0


def _rho2d_csv(est: cl_estimator.ShiftEstimate) -> str:
    lines = ["kx,ky,theta,in_control"]
    for (kx, ky), v, m in zip(est.k_grid, est.rho2d, est.k_ctrl_mask):
        lines.append(f"{kx:.9g},{ky:.9g},{v:.17g},{int(m)}")
    return "\n".join(lines) + "\n"


def _rhot_csv(est: cl_estimator.ShiftEstimate, params) -> str:
    c = est.rhot
    r0 = rho0(c.f_grid, params)
    lines = ["f_hz,rho_raw,rho_smoothed,rho0"]
    for f, a, b, r in zip(c.f_grid, c.raw, c.smoothed, r0):
        lines.append(f"{f:.9g},{a:.17g},{b:.17g},{r:.17g}")
    return "\n".join(lines) + "\n"


def _cl_opts(s: _Settings) -> dict:
    clip = s.get("clip")
    return dict(
        segment_len=int(s.get("segment", 512)),
        overlap=float(s.get("overlap", 0.5)),
        f_min=float(s.get("fmin", 0.0)),
        clip=None if clip is None else float(clip),
    )


def cmd_estimate_cl(s: _Settings) -> int:
    sys_ = s.system()
    tel = io.read_tlm(s.get("telemetry"), sys_.params.n_mod)
    if abs(tel.frame_rate - sys_.params.frame_rate) > 1e-6 * tel.frame_rate:
        print(
            f"warning: telemetry runs at {tel.frame_rate:g} Hz, loop settings say {sys_.params.frame_rate:g} Hz; "
            "using the telemetry header", file=sys.stderr,
        )
    est = cl_estimator.estimate(tel, sys_.projector, sys_.grid.clear_aperture_diameter, sys_.delta, **_cl_opts(s))
    if s.get("dump_rho2d"):
        Path(s.get("dump_rho2d")).write_text(_rho2d_csv(est))
    if s.get("dump_rhot"):
        Path(s.get("dump_rhot")).write_text(_rhot_csv(est, tel.params))
    out = {
        "dx_delta": est.delta.dx,
        "dy_delta": est.delta.dy,
        "cov": np.asarray(est.covariance).tolist(),
        "residual_rms": est.residual_rms,
    }
    _emit_json(out, s.get("json") or s.get("out"))
    return 0


def _closed_rig(s: _Settings, sys_) -> ClosedLoopRig:
    return ClosedLoopRig(
        sys_, noise_sigma=float(s.get("noise", sys_.preset.noise_sigma)), n_frames=int(s.get("frames", 4096)),
        turbulence=bool(s.get("turbulence", False)), screen_seed=int(s.get("screen_seed", int(s.get("seed", 0)) + 1)),
        **_cl_opts(s),
    )


def cmd_align(s: _Settings) -> int:
    sys_ = s.system()
    seed = int(s.get("seed", 0))
    mode = s.get("estimator", "2d")
    if mode == "2d":
        snr = s.get("snr")
        radius = s.get("radius")
        rig = OpenLoopRig(
            sys_, s.get("modes"), None if snr is None else float(snr),
            None if radius is None else int(radius), int(s.get("upsample", 8)),
        )
    elif mode == "cl":
        rig = _closed_rig(s, sys_)
    else:
        raise InputError(f"unknown estimator {mode!r}")
    trace = alignment.run_corrective_loop(
        rig.corrective_estimator(seed), s.shift("initial"),
        gain=float(s.get("gain", 1.0 if mode == "2d" else 0.5)), max_iter=int(s.get("max_iter", 20)), tol_delta=float(s.get("tol", 0.05)),
    )
    out = trace.to_dict()
    fr = trace.final_residual
    out["final_residual"] = [fr.dx, fr.dy]
    _emit_json(out, s.get("json") or s.get("out"))
    if not trace.converged:
        raise NonConvergenceError(f"no convergence after {len(trace.iterations)} iterations")
    return 0


def cmd_sweep(s: _Settings) -> int:
    sys_ = s.system()
    angle = float(s.get("rotate_dm", 0.0))
    if angle:
        sys_ = rotate_dm(sys_, angle)
    rig = _closed_rig(s, sys_)
    shifts = s.get("shifts")
    if isinstance(shifts, str):
        shifts = _shift_list(shifts)
    elif shifts:
        shifts = [Misreg.parse(v) if isinstance(v, str) else _as_misreg(v) for v in shifts]
    if not shifts:
        raise InputError("--shifts is required")
    batches = int(s.get("batches", 4))
    batch_len = int(s.get("batch_len", 1024))
    stride = int(s.get("stride", batch_len))
    scale = float(s.get("stage_scale", 1.0))
    seed = int(s.get("seed", 0))

    def measure(shift, i):
        ests = rig.batch_estimates(shift.scaled(scale), seed + i, batches, batch_len, stride)
        return [e.delta for e in ests]

    report = alignment.run_shift_sweep(measure, shifts)
    if s.get("csv"):
        Path(s.get("csv")).write_text(report.to_csv())
    _emit_json(report.to_dict(), s.get("json") or s.get("out"))
    return 0


def cmd_report(s: _Settings) -> int:
    data = io.read_json(s.get("input"))
    if "points" in data:
        pts = [p for p in data["points"] if not p.get("unstable")]
        pairs = [(Misreg(*p["theoretical"]), Misreg(*p["mean"])) for p in pts]
        fit = alignment.fit_linear_transform(pairs)
        out = {
            "kind": "sweep",
            "n_points": len(data["points"]),
            "n_unstable": len(data["points"]) - len(pts),
            "fit": {"rho": fit.rho, "alpha_deg": fit.alpha, "delta0": [fit.delta0.dx, fit.delta0.dy],
                    "residual_rms": fit.residual_rms},
        }
        lines = ["theo_dx,theo_dy,est_dx,est_dy,model_dx,model_dy"]
        for th, est in pairs:
            m = fit.apply(th)
            lines.append(f"{th.dx:.6g},{th.dy:.6g},{est.dx:.17g},{est.dy:.17g},{m.dx:.17g},{m.dy:.17g}")
    elif "iterations" in data:
        its = data["iterations"]
        out = {
            "kind": "alignment",
            "converged": data.get("converged"),
            "n_iterations": len(its),
            "final_residual": data.get("final_residual"),
        }
        lines = ["iteration,est_dx,est_dy,residual_dx,residual_dy"]
        for i, it in enumerate(its):
            e, r = it["estimate"], it["residual_truth"]
            lines.append(f"{i},{e[0]:.17g},{e[1]:.17g},{r[0]:.17g},{r[1]:.17g}")
    else:
        raise InputError("input is neither a sweep nor an alignment report")
    if s.get("csv"):
        Path(s.get("csv")).write_text("\n".join(lines) + "\n")
    _emit_json(out, s.get("json") or s.get("out"))
    return 0


# --------------------------------------------------------------------------
# Parser


def _global_flags(p: argparse.ArgumentParser, default) -> None:
    p.add_argument("--seed", type=int, default=default, help="random seed")
    p.add_argument("--geometry", default=default, help="geometry JSON")
    p.add_argument("--params", default=default, help="loop settings JSON {loop_hz, g_int, g_leak, n_mod}")
    p.add_argument("--out", default=default, help="output file")
    p.add_argument("--config", default=default, help="JSON file of option defaults")
    p.add_argument("--preset", choices=sorted(PRESETS), default=default, help=f"base preset (default {DEFAULT_PRESET})")


def _cl_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--segment", type=int, help="Welch segment length (frames)")
    p.add_argument("--overlap", type=float, help="Welch overlap fraction")
    p.add_argument("--fmin", type=float, help="drop temporal frequencies at or below this (Hz)")
    p.add_argument("--clip", type=float, help="robust rejection threshold (MAD sigmas)")


def _sim_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--frames", type=int, help="number of loop frames")
    p.add_argument("--noise", type=float, help="slope noise sigma")
    p.add_argument("--turbulence", action="store_true", default=None, help="add a frozen-flow screen")
    p.add_argument("--screen-seed", dest="screen_seed", type=int, help="screen seed (default seed + 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="misreg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"misreg {__version__}")
    _global_flags(parser, None)
    subs = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, argparse.SUPPRESS)

    def add(name, func, help_):
        p = subs.add_parser(name, parents=[common], help=help_)
        p.set_defaults(func=func)
        return p

    add("geometry", cmd_geometry, "write the preset geometry as JSON")

    p = add("sim-im", cmd_sim_im, "simulate a modal interaction matrix (MIM1)")
    p.add_argument("--shift", type=_shift, help="misregistration dx,dy in subapertures")
    p.add_argument("--noise", type=float, help="slope noise sigma")
    p.add_argument("--modes", type=int, help="number of modes")

    p = add("sim-loop", cmd_sim_loop, "simulate closed-loop telemetry (TLM1)")
    p.add_argument("--misreg", type=_shift, help="misregistration dx,dy in subapertures")
    _sim_flags(p)

    p = add("estimate-2d", cmd_estimate_2d, "open-loop estimate from two MIM1 files")
    p.add_argument("--measured", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--radius", type=int, help="search radius in subapertures (default n_side // 4)")
    p.add_argument("--upsample", type=int, help="sub-subaperture lattice factor")
    p.add_argument("--json", help="result JSON (default --out or stdout)")
    p.add_argument("--csv", help="dump the correlation surface")

    p = add("estimate-cl", cmd_estimate_cl, "closed-loop estimate from TLM1 telemetry")
    p.add_argument("--telemetry", required=True)
    _cl_flags(p)
    p.add_argument("--json", help="result JSON (default --out or stdout)")
    p.add_argument("--dump-rho2d", dest="dump_rho2d", help="CSV of the per-k coupling map")
    p.add_argument("--dump-rhot", dest="dump_rhot", help="CSV of the temporal correlation curve")

    p = add("align", cmd_align, "simulated corrective loop")
    p.add_argument("--estimator", choices=("2d", "cl"))
    p.add_argument("--initial", type=_shift, help="initial misregistration dx,dy")
    p.add_argument("--gain", type=float, help="correction gain (default 1 for 2d, 0.5 for cl)")
    p.add_argument("--max-iter", dest="max_iter", type=int)
    p.add_argument("--tol", type=float, help="convergence threshold in subapertures")
    p.add_argument("--snr", type=float, help="2d: per-slope S/N")
    p.add_argument("--modes", type=int, help="2d: number of modes")
    p.add_argument("--radius", type=int, help="2d: search radius")
    p.add_argument("--upsample", type=int, help="2d: lattice factor (default 8)")
    _sim_flags(p)
    _cl_flags(p)
    p.add_argument("--json", help="trace JSON (default --out or stdout)")

    p = add("sweep", cmd_sweep, "closed-loop shift sweep and linear-transform fit")
    p.add_argument("--shifts", type=_shift_list, help='"dx,dy;dx,dy;..."')
    p.add_argument("--batches", type=int)
    p.add_argument("--batch-len", dest="batch_len", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--rotate-dm", dest="rotate_dm", type=float, help="rotate the DM lattice (degrees)")
    p.add_argument("--stage-scale", dest="stage_scale", type=float, help="WFS shift per commanded unit")
    _sim_flags(p)
    _cl_flags(p)
    p.add_argument("--json", help="report JSON (default --out or stdout)")
    p.add_argument("--csv", help="per-shift CSV")

    p = add("report", cmd_report, "summarize a sweep or alignment JSON")
    p.add_argument("--input", required=True)
    p.add_argument("--json", help="summary JSON (default --out or stdout)")
    p.add_argument("--csv", help="plot data CSV")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; report those as input errors
        return 0 if exc.code == 0 else InputError.exit_code
    try:
        return args.func(_Settings(args))
    except MisregError as exc:
        print(f"misreg: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())

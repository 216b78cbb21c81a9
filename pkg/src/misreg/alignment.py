"""Corrective loop, shift sweeps and the scale/rotation/offset calibration fit."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateFitError, InputError, InstabilityError
from .forward_model import ZERO, Misreg, _as_misreg

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
CONSECUTIVE = 3


@dataclass(frozen=True)
class Iteration:
    estimate: Misreg
    applied_correction: Misreg  # correction in place while estimating
    residual_truth: Misreg


@dataclass
class ConvergenceTrace:
    iterations: list[Iteration] = field(default_factory=list)
    gain: float = 1.0
    converged: bool = False
    criterion: float = 0.0
    initial: Misreg = ZERO

    @property
    def final_residual(self) -> Misreg:
        if not self.iterations:
            return self.initial
        last = self.iterations[-1]
        # the correction computed from the last estimate is applied too
        return last.residual_truth - last.estimate.scaled(self.gain)

    def to_dict(self) -> dict:
        return {
            "gain": self.gain,
            "converged": self.converged,
            "criterion_delta": self.criterion,
            "initial": [self.initial.dx, self.initial.dy],
            "iterations": [
                {
                    "estimate": [it.estimate.dx, it.estimate.dy],
                    "applied_correction": [it.applied_correction.dx, it.applied_correction.dy],
                    "residual_truth": [it.residual_truth.dx, it.residual_truth.dy],
                }
                for it in self.iterations
            ],
        }


def run_corrective_loop(
    estimator: Callable[[Misreg, int], Misreg],
    initial,
    gain: float = 1.0,
    max_iter: int = 20,
    tol_delta: float = 0.05,
) -> ConvergenceTrace:
    """Integrate estimates into a correction until they stay below ``tol_delta``.

    ``estimator(residual, iteration)`` returns the shift seen with the true
    misregistration ``residual = initial - correction``. Convergence needs
    ``CONSECUTIVE`` sub-tolerance estimates in a row. When ``max_iter`` runs
    out the trace comes back with ``converged = False``.
    """
    if not 0.0 < gain <= 1.0:
        raise InputError("gain must lie in (0, 1]")
    if not tol_delta > 0:
        raise InputError("tol_delta must be positive")
    if max_iter < 1:
        raise InputError("max_iter must be >= 1")
    initial = _as_misreg(initial)
    trace = ConvergenceTrace(gain=gain, criterion=tol_delta, initial=initial)
    applied = ZERO
    streak = 0
    for i in range(max_iter):
        residual = initial - applied
        est = estimator(residual, i)
        trace.iterations.append(Iteration(est, applied, residual))
        streak = streak + 1 if est.norm() < tol_delta else 0
        applied = applied + est.scaled(gain)
        if streak >= CONSECUTIVE:
            trace.converged = True
            break
    return trace


# --------------------------------------------------------------------------
# Linear transform between commanded and estimated shifts


@dataclass(frozen=True)
class LinearTransformFit:
    delta0: Misreg
    rho: float
    alpha: float  # degrees
    residual_rms: float

    def apply(self, theoretical) -> Misreg:
        t = _as_misreg(theoretical).as_array()
        a = math.radians(self.alpha)
        r = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
        out = self.rho * (self.delta0.as_array() + r @ t)
        return Misreg(float(out[0]), float(out[1]))


def _rot(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s], [s, c]])


def _inner(th: np.ndarray, est: np.ndarray, a: float):
    # closed-form rho and rho*delta0 at fixed rotation
    u = th @ _rot(a).T
    uc = u - u.mean(axis=0)
    ec = est - est.mean(axis=0)
    rho = float((uc * ec).sum() / (uc**2).sum())
    b = est.mean(axis=0) - rho * u.mean(axis=0)
    cost = float(((est - rho * u - b) ** 2).sum())
    return rho, b, cost


def fit_linear_transform(pairs: Sequence[tuple], *, scan: int = 72, tol_deg: float = 1e-9) -> LinearTransformFit:
    """Least squares ``est ~ rho (delta0 + R(alpha) theo)`` over ``(theo, est)`` pairs.

    ``alpha`` is found by a coarse scan followed by golden-section search;
    ``rho`` and ``delta0`` have a closed form at each trial angle. The sign of
    ``rho`` is fixed positive by restricting the scan to angles where the
    inner solve returns ``rho > 0``.
    """
    th = np.array([_as_misreg(p[0]).as_array() for p in pairs], dtype=float)
    est = np.array([_as_misreg(p[1]).as_array() for p in pairs], dtype=float)
    if len(th) < 3:
        raise InputError("need at least 3 shift pairs")
    thc = th - th.mean(axis=0)
    if np.linalg.matrix_rank(thc, tol=1e-12 * max(np.abs(thc).max(), 1e-300)) < 2:
        raise DegenerateFitError("theoretical shifts are collinear")

    def cost(a):
        rho, _, c = _inner(th, est, a)
        return c if rho > 0 else math.inf

    grid = np.linspace(-math.pi, math.pi, scan, endpoint=False)
    costs = np.array([cost(a) for a in grid])
    i = int(np.argmin(costs))
    step = 2 * math.pi / scan
    lo, hi = grid[i] - step, grid[i] + step
    x1 = hi - GOLDEN * (hi - lo)
    x2 = lo + GOLDEN * (hi - lo)
    f1, f2 = cost(x1), cost(x2)
    while hi - lo > math.radians(tol_deg):
        if f1 < f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - GOLDEN * (hi - lo)
            f1 = cost(x1)
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + GOLDEN * (hi - lo)
            f2 = cost(x2)
    a = 0.5 * (lo + hi)
    rho, b, c = _inner(th, est, a)
    if not rho > 0:
        raise DegenerateFitError("no positive-scale transform fits the shifts")
    alpha = math.degrees(math.atan2(math.sin(a), math.cos(a)))
    if alpha <= -180.0:
        alpha += 360.0
    d0 = b / rho
    return LinearTransformFit(Misreg(float(d0[0]), float(d0[1])), rho, alpha, math.sqrt(c / len(th)))


# --------------------------------------------------------------------------
# Shift sweeps


@dataclass(frozen=True)
class SweepPoint:
    theoretical: Misreg
    mean: Misreg | None
    covariance: np.ndarray | None  # (2, 2), Delta^2, spread of the batch estimates
    n_batches: int
    unstable: bool = False
    unstable_frame: int | None = None

    def major_axis_deg(self) -> float:
        vals, vecs = np.linalg.eigh(self.covariance)
        v = vecs[:, -1]
        return math.degrees(math.atan2(v[1], v[0]))


@dataclass
class SweepReport:
    points: list[SweepPoint]
    fit: LinearTransformFit | None = None

    def pairs(self) -> list[tuple[Misreg, Misreg]]:
        return [(p.theoretical, p.mean) for p in self.points if not p.unstable]

    def to_dict(self) -> dict:
        out = {"points": []}
        for p in self.points:
            d = {"theoretical": [p.theoretical.dx, p.theoretical.dy], "unstable": p.unstable, "n_batches": p.n_batches}
            if p.unstable:
                d["unstable_frame"] = p.unstable_frame
            else:
                d["mean"] = [p.mean.dx, p.mean.dy]
                d["covariance"] = np.asarray(p.covariance).tolist()
            out["points"].append(d)
        if self.fit is not None:
            out["fit"] = {
                "rho": self.fit.rho,
                "alpha_deg": self.fit.alpha,
                "delta0": [self.fit.delta0.dx, self.fit.delta0.dy],
                "residual_rms": self.fit.residual_rms,
            }
        return out

    def to_csv(self) -> str:
        lines = ["theo_dx,theo_dy,est_dx,est_dy,cov_xx,cov_xy,cov_yy,unstable"]
        for p in self.points:
            if p.unstable:
                lines.append(f"{p.theoretical.dx:.6g},{p.theoretical.dy:.6g},,,,,,1")
            else:
                c = p.covariance
                lines.append(
                    f"{p.theoretical.dx:.6g},{p.theoretical.dy:.6g},{p.mean.dx:.17g},{p.mean.dy:.17g},"
                    f"{c[0, 0]:.17g},{c[0, 1]:.17g},{c[1, 1]:.17g},0"
                )
        return "\n".join(lines) + "\n"


def batch_starts(n_frames: int, batches: int, batch_len: int, stride: int) -> list[int]:
    need = batch_len + (batches - 1) * stride
    if batches < 1 or batch_len < 1 or stride < 1:
        raise InputError("batches, batch_len and stride must be positive")
    if need > n_frames:
        raise InputError(f"{batches} batches of {batch_len} every {stride} need {need} frames, have {n_frames}")
    return [i * stride for i in range(batches)]


def run_shift_sweep(
    measure: Callable[[Misreg, int], list[Misreg]],
    shifts: Sequence,
    *,
    fit: bool = True,
) -> SweepReport:
    """Estimate every shift in ``shifts`` and fit the linear transform.

    ``measure(shift, index)`` returns the per-batch estimates for one injected
    shift, or raises :class:`InstabilityError`; unstable shifts are reported
    and left out of the fit.
    """
    points = []
    for i, s in enumerate(shifts):
        s = _as_misreg(s)
        try:
            ests = np.array([e.as_array() for e in measure(s, i)])
        except InstabilityError as exc:
            points.append(SweepPoint(s, None, None, 0, True, exc.frame))
            continue
        mean = ests.mean(axis=0)
        cov = np.cov(ests.T) if len(ests) > 1 else np.zeros((2, 2))
        points.append(SweepPoint(s, Misreg(*mean), np.atleast_2d(cov), len(ests)))
    report = SweepReport(points)
    if fit:
        stable = report.pairs()
        if len(stable) >= 3:
            report.fit = fit_linear_transform(stable)
    return report

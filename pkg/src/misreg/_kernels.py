"""Hot numerical kernels with a numba path and a pure-numpy fallback.

Set ``MISREG_DISABLE_NUMBA=1`` (or call :func:`set_backend`) to force the
numpy implementations. Both paths compute the same quantities; tests run
them against each other.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

_FLAG = os.environ.get("MISREG_DISABLE_NUMBA", "").strip().lower()
_backend = "numpy" if (_FLAG not in ("", "0", "false", "no") or not HAVE_NUMBA) else "numba"


def backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    _backend = name


def _njit(fn):
    if not HAVE_NUMBA:
        return None
    return numba.njit(cache=True, nogil=True)(fn)


def _trapezoid_rows(n: int, q: int) -> np.ndarray:
    t = np.zeros((n, n * q + 1))
    for i in range(n):
        t[i, i * q : (i + 1) * q + 1] = 1.0
        t[i, i * q] = t[i, (i + 1) * q] = 0.5
    return t / q


# --------------------------------------------------------------------------
# Shack-Hartmann window averages


def _window_slopes_numpy(phi, n, q, delta):
    t = _trapezoid_rows(n, q)
    dxe = phi[..., :, q::q] - phi[..., :, : n * q : q]
    dye = phi[..., q::q, :] - phi[..., : n * q : q, :]
    sx = np.einsum("il,...lj->...ij", t, dxe) / delta
    sy = np.einsum("jl,...il->...ij", t, dye) / delta
    return sx, sy


def _window_slopes_loop(phi, n, q, delta):
    m = phi.shape[0]
    sx = np.zeros((m, n, n))
    sy = np.zeros((m, n, n))
    inv = 1.0 / (q * delta)
    for k in range(m):
        for i in range(n):
            for j in range(n):
                ax = 0.0
                ay = 0.0
                for r in range(q + 1):
                    w = 0.5 if (r == 0 or r == q) else 1.0
                    ax += w * (phi[k, i * q + r, (j + 1) * q] - phi[k, i * q + r, j * q])
                    ay += w * (phi[k, (i + 1) * q, j * q + r] - phi[k, i * q, j * q + r])
                sx[k, i, j] = ax * inv
                sy[k, i, j] = ay * inv
    return sx, sy


_window_slopes_nb = _njit(_window_slopes_loop)


def window_slopes(phi: np.ndarray, n: int, q: int, delta: float):
    if _backend == "numpy":
        return _window_slopes_numpy(phi, n, q, delta)
    lead = phi.shape[:-2]
    flat = np.ascontiguousarray(phi.reshape((-1,) + phi.shape[-2:]))
    sx, sy = _window_slopes_nb(flat, n, q, float(delta))
    return sx.reshape(lead + (n, n)), sy.reshape(lead + (n, n))


# --------------------------------------------------------------------------
# Sub-frame closed-loop integration
#
# State lives on a grid of ``n_sub`` steps per frame. With ``h`` the step:
#   c(t) = (1 - g_leak) c(t - tau_rtc) + g_int m(t - tau_lat)
#   d(t) = trapezoid mean of c over [t - tau_dm, t]
#   y(t) = B d(t)
#   m(t) = u(t) - trapezoid mean of y over [t - tau_wfs, t]
# ``u`` is the exogenous measurement-level input, given at frame rate and
# band-limited-interpolated onto the sub-frame grid through ``interp``
# (``n_sub`` polyphase rows of ``2 * half`` taps acting on frames
# ``i - half + 1 .. i + half``). ``u`` is padded by ``half`` frames on each side.


def _closed_loop_loop(
    b, u, interp, g_int, g_leak, n_sub, rtc_steps, lat_steps, wfs_steps, dm_steps,
    n_frames, diverge_ratio, warmup,
):
    n = b.shape[0]
    half = interp.shape[1] // 2
    hist = max(rtc_steps, lat_steps, wfs_steps, dm_steps) + 2
    c_hist = np.zeros((hist, n))
    y_hist = np.zeros((hist, n))
    m_hist = np.zeros((hist, n))
    c_sum = np.zeros(n)  # running sums of the interior trapezoid samples
    y_sum = np.zeros(n)
    cmd = np.zeros((n_frames, n))
    meas = np.zeros((n_frames, n))
    ref_ms = 0.0
    acc_ms = 0.0
    acc_n = 0
    d = np.zeros(n)
    y = np.zeros(n)
    uf = np.zeros(n)
    for frame in range(n_frames):
        for p in range(n_sub):
            step = frame * n_sub + p
            cur = step % hist
            # controller
            prev_c = (step - rtc_steps) % hist
            prev_m = (step - lat_steps) % hist
            cnew = c_hist[cur]
            if step >= rtc_steps:
                for a in range(n):
                    cnew[a] = (1.0 - g_leak) * c_hist[prev_c, a]
            else:
                for a in range(n):
                    cnew[a] = 0.0
            if step >= lat_steps:
                for a in range(n):
                    cnew[a] += g_int * m_hist[prev_m, a]
            # DM: trapezoid over dm_steps intervals
            old_c = c_hist[(step - dm_steps) % hist]
            for a in range(n):
                endpoint = old_c[a] if step >= dm_steps else 0.0
                d[a] = (c_sum[a] + 0.5 * (cnew[a] + endpoint)) / dm_steps
            for a in range(n):
                s = 0.0
                for k in range(n):
                    s += b[a, k] * d[k]
                y[a] = s
            ynew = y_hist[cur]
            for a in range(n):
                ynew[a] = y[a]
            old_y = y_hist[(step - wfs_steps) % hist]
            # exogenous input at this sub-step
            for a in range(n):
                uf[a] = 0.0
            for t in range(2 * half):
                w = interp[p, t]
                if w != 0.0:
                    row = frame + t + 1
                    for a in range(n):
                        uf[a] += w * u[row, a]
            mnew = m_hist[cur]
            for a in range(n):
                endpoint = old_y[a] if step >= wfs_steps else 0.0
                mnew[a] = uf[a] - (y_sum[a] + 0.5 * (ynew[a] + endpoint)) / wfs_steps
            # roll interior sums forward for the next step
            if dm_steps > 1:
                for a in range(n):
                    c_sum[a] += cnew[a]
                    if step - dm_steps + 1 >= 0:
                        c_sum[a] -= c_hist[(step - dm_steps + 1) % hist, a]
            if wfs_steps > 1:
                for a in range(n):
                    y_sum[a] += ynew[a]
                    if step - wfs_steps + 1 >= 0:
                        y_sum[a] -= y_hist[(step - wfs_steps + 1) % hist, a]
            if p == 0:
                for a in range(n):
                    cmd[frame, a] = cnew[a]
                    meas[frame, a] = mnew[a]
        ms = 0.0
        for a in range(n):
            ms += cmd[frame, a] * cmd[frame, a]
        ms /= n
        if not np.isfinite(ms):
            return cmd, meas, frame
        if frame >= warmup:
            if acc_n < warmup:
                acc_ms += ms
                acc_n += 1
                if acc_n == warmup:
                    ref_ms = acc_ms / warmup
            elif ref_ms > 0.0 and ms > diverge_ratio * diverge_ratio * ref_ms:
                return cmd, meas, frame
    return cmd, meas, -1


_closed_loop_nb = _njit(_closed_loop_loop)


def _closed_loop_numpy(
    b, u, interp, g_int, g_leak, n_sub, rtc_steps, lat_steps, wfs_steps, dm_steps,
    n_frames, diverge_ratio, warmup,
):
    n = b.shape[0]
    half = interp.shape[1] // 2
    hist = max(rtc_steps, lat_steps, wfs_steps, dm_steps) + 2
    c_hist = np.zeros((hist, n))
    y_hist = np.zeros((hist, n))
    m_hist = np.zeros((hist, n))
    c_sum = np.zeros(n)
    y_sum = np.zeros(n)
    cmd = np.zeros((n_frames, n))
    meas = np.zeros((n_frames, n))
    # interpolate the drive frame by frame: (n_sub, n) per frame
    ref_ms, acc_ms, acc_n = 0.0, 0.0, 0
    for frame in range(n_frames):
        u_sub = interp @ u[frame + 1 : frame + 1 + 2 * half]
        for p in range(n_sub):
            step = frame * n_sub + p
            cur = step % hist
            cnew = (1.0 - g_leak) * c_hist[(step - rtc_steps) % hist] if step >= rtc_steps else np.zeros(n)
            if step >= lat_steps:
                cnew = cnew + g_int * m_hist[(step - lat_steps) % hist]
            c_end = c_hist[(step - dm_steps) % hist] if step >= dm_steps else 0.0
            d = (c_sum + 0.5 * (cnew + c_end)) / dm_steps
            ynew = b @ d
            y_end = y_hist[(step - wfs_steps) % hist] if step >= wfs_steps else 0.0
            mnew = u_sub[p] - (y_sum + 0.5 * (ynew + y_end)) / wfs_steps
            c_hist[cur] = cnew
            y_hist[cur] = ynew
            m_hist[cur] = mnew
            if dm_steps > 1:
                c_sum += cnew
                if step - dm_steps + 1 >= 0:
                    c_sum -= c_hist[(step - dm_steps + 1) % hist]
            if wfs_steps > 1:
                y_sum += ynew
                if step - wfs_steps + 1 >= 0:
                    y_sum -= y_hist[(step - wfs_steps + 1) % hist]
            if p == 0:
                cmd[frame] = cnew
                meas[frame] = mnew
        ms = float(np.mean(cmd[frame] ** 2))
        if not np.isfinite(ms):
            return cmd, meas, frame
        if frame >= warmup:
            if acc_n < warmup:
                acc_ms += ms
                acc_n += 1
                if acc_n == warmup:
                    ref_ms = acc_ms / warmup
            elif ref_ms > 0.0 and ms > diverge_ratio**2 * ref_ms:
                return cmd, meas, frame
    return cmd, meas, -1


def closed_loop(b, u, interp, g_int, g_leak, n_sub, rtc_steps, lat_steps, wfs_steps, dm_steps,
                n_frames, diverge_ratio=1e3, warmup=64):
    """Run the sub-frame loop; returns ``(commands, measurements, diverged_frame)``.

    ``diverged_frame`` is -1 for a stable run.
    """
    args = (
        np.ascontiguousarray(b, dtype=float), np.ascontiguousarray(u, dtype=float),
        np.ascontiguousarray(interp, dtype=float), float(g_int), float(g_leak), int(n_sub),
        int(rtc_steps), int(lat_steps), int(wfs_steps), int(dm_steps), int(n_frames),
        float(diverge_ratio), int(warmup),
    )
    if _backend == "numpy":
        return _closed_loop_numpy(*args)
    return _closed_loop_nb(*args)


# --------------------------------------------------------------------------
# Sliding mean


def _sliding_mean_loop(x, half):
    n = x.shape[0]
    cs = np.zeros(n + 1)
    cn = np.zeros(n + 1, np.int64)
    for i in range(n):
        ok = np.isfinite(x[i])
        cs[i + 1] = cs[i] + (x[i] if ok else 0.0)
        cn[i + 1] = cn[i] + (1 if ok else 0)
    out = np.empty(n)
    for i in range(n):
        lo = max(0, i - half)
        hi = min(n, i + half + 1)
        cnt = cn[hi] - cn[lo]
        out[i] = (cs[hi] - cs[lo]) / cnt if cnt > 0 else np.nan
    return out


_sliding_mean_nb = _njit(_sliding_mean_loop)


def _sliding_mean_numpy(x, half):
    ok = np.isfinite(x)
    vals = np.where(ok, x, 0.0)
    cs = np.concatenate([[0.0], np.cumsum(vals)])
    cn = np.concatenate([[0], np.cumsum(ok)])
    idx = np.arange(x.size)
    lo = np.maximum(idx - half, 0)
    hi = np.minimum(idx + half + 1, x.size)
    cnt = cn[hi] - cn[lo]
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(cnt > 0, (cs[hi] - cs[lo]) / np.maximum(cnt, 1), np.nan)


def sliding_mean(x: np.ndarray, half: int) -> np.ndarray:
    """Centered moving average over ``+-half`` samples, NaN-aware, shrinking at the ends."""
    x = np.ascontiguousarray(x, dtype=float)
    if _backend == "numpy":
        return _sliding_mean_numpy(x, int(half))
    return _sliding_mean_nb(x, int(half))

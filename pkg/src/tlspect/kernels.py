"""Hot numerical kernels: transmission grids and Monte Carlo noise averaging.

Two implementations of each kernel are kept in lockstep: a numba
``@njit`` version and a pure-numpy reference. The numba path is used
when numba imports cleanly and the environment variable
``TLSPECT_NUMBA`` is not set to ``0``/``false``/``off``. Within one
backend results are bit-reproducible; across backends they agree to
floating-point roundoff (summation order differs).

The transmission model for a resonator coupled to N defects is

    S21(w) = 1 - (kc/2) / [ (kc+gc)/2 + i(w-wc) + sum_i g_i^2/(g_i/2 + i(w-w_i)) ]

with all rates angular (rad/s). Defect frequencies w_i and couplings
g_i depend on the bias column through the asymmetry energy; the grid
kernel evaluates them in place from the raw defect parameters so the
per-column working set stays small.
"""

import os

import numpy as np

from .constants import HBAR

__all__ = [
    "numba_available",
    "numba_enabled",
    "backend_name",
    "render_grid",
    "render_grid_numpy",
    "mc_column",
    "mc_column_numpy",
    "s21_column_numpy",
    "hough_votes",
    "hough_votes_numpy",
]

try:
    from numba import njit, prange

    numba_available = True
except ImportError:  # pragma: no cover - exercised only without numba
    numba_available = False

_flag = os.environ.get("TLSPECT_NUMBA", "1").strip().lower()
_use_numba = numba_available and _flag not in ("0", "false", "off")


def numba_enabled():
    """True when the numba backend is active for this process."""
    return _use_numba


def backend_name():
    return "numba" if _use_numba else "numpy"


# ---------------------------------------------------------------------------
# numpy reference implementations
# ---------------------------------------------------------------------------

def s21_column_numpy(omega, omega_c, kappa_c, gamma_c, omega_tls, g2, gamma_tls):
    """Transmission for one bias column, defect parameters already evaluated.

    Parameters
    ----------
    omega : (nf,) float array, rad/s
    omega_tls, g2, gamma_tls : (nt,) float arrays, rad/s (g2 in (rad/s)^2)
    """
    if omega_tls.size:
        term = (g2 / (0.5 * gamma_tls + 1j * (omega[:, None] - omega_tls[None, :]))).sum(axis=1)
    else:
        term = np.zeros(omega.shape[0], dtype=np.complex128)
    denom = 0.5 * (kappa_c + gamma_c) + 1j * (omega - omega_c) + term
    return 1.0 - 0.5 * kappa_c / denom


def render_grid_numpy(omega, bias, omega_c, kappa_c, gamma_c,
                      delta, delta0, pz, gamma_tls, g_pref, cutoff):
    """Transmission grid over (frequency, bias), numpy path.

    Parameters
    ----------
    omega : (nf,) rad/s. bias : (nb,) V/m.
    delta, delta0 : (nt,) J. pz : (nt,) C*m. gamma_tls : (nt,) rad/s.
    g_pref : 2*E_rms/hbar, so g_i = (delta0/E) * pz * g_pref.
    cutoff : rad/s; defects with |w_i - wc| > cutoff are dropped per column.

    Returns
    -------
    (nf, nb) complex128
    """
    nf, nb = omega.shape[0], bias.shape[0]
    out = np.empty((nf, nb), dtype=np.complex128)
    for j in range(nb):
        dp = delta + 2.0 * pz * bias[j]
        energy = np.hypot(dp, delta0)
        w_i = energy / HBAR
        keep = np.abs(w_i - omega_c) <= cutoff
        g = (delta0[keep] / energy[keep]) * pz[keep] * g_pref
        out[:, j] = s21_column_numpy(
            omega, omega_c, kappa_c, gamma_c, w_i[keep], g * g, gamma_tls[keep])
    return out


def _hough_pairs(col, min_sep, max_sep):
    """Index pairs (i, j) with col[j] - col[i] in [min_sep, max_sep].

    Expects col sorted ascending; callers pass points ordered by column.
    """
    lo = np.searchsorted(col, col + min_sep, side="left")
    hi = np.searchsorted(col, col + max_sep, side="right")
    counts = hi - lo
    i_arr = np.repeat(np.arange(col.shape[0]), counts)
    j_arr = np.concatenate([np.arange(a, b) for a, b in zip(lo, hi)]) \
        if counts.sum() else np.empty(0, np.int64)
    return i_arr, j_arr


def hough_votes_numpy(freq, bias, col, f_start, df, nf,
                      b_start, db_vote, nbv, slopes, min_sep, max_sep):
    """Pair-vote vertex accumulators for hyperbola candidate proposal.

    Two dips and a trial slope fix a hyperbola vertex exactly:
    bv = (b1+b2)/2 - (f1^2-f2^2) / (2 s^2 (b1-b2)), fv^2 = f1^2 - s^2 (b1-bv)^2.
    Each pair of points from nearby columns (separation in
    [min_sep, max_sep] cells) casts one vote per slope at that vertex,
    binned on (bias origin b_start, step db_vote, nbv) x (frequency
    origin f_start, step df, nf). Points on one arc vote coherently at
    the true slope, so peak height grows with the square of the arc
    support while mismatched pairs scatter.

    Returns (total, left, right), each (n_slopes, n_bv, nf) int32; left
    and right split votes by the sign of (pair midpoint - bv), counting
    on-vertex votes on both sides.
    """
    points_order = np.argsort(col, kind="stable")
    freq = freq[points_order]
    bias = bias[points_order]
    col = col[points_order]
    i_arr, j_arr = _hough_pairs(col, min_sep, max_sep)
    ns = slopes.shape[0]
    shape = (ns, nbv, nf)
    total = np.zeros((ns, nbv * nf), dtype=np.int32)
    left = np.zeros((ns, nbv * nf), dtype=np.int32)
    right = np.zeros((ns, nbv * nf), dtype=np.int32)
    if i_arr.size == 0:
        return total.reshape(shape), left.reshape(shape), right.reshape(shape)
    f1, f2 = freq[i_arr], freq[j_arr]
    b1, b2 = bias[i_arr], bias[j_arr]
    df2 = f1 * f1 - f2 * f2
    mid = 0.5 * (b1 + b2)
    dbpair = b1 - b2
    for si in range(ns):
        s2 = slopes[si] * slopes[si]
        bv = mid - df2 / (2.0 * s2 * dbpair)
        arg = f1 * f1 - s2 * (b1 - bv) ** 2
        with np.errstate(invalid="ignore"):
            fbin = np.rint((np.sqrt(arg) - f_start) / df)
            bbin = np.rint((bv - b_start) / db_vote)
            valid = (arg > 0) & (fbin >= 0) & (fbin < nf) \
                & (bbin >= 0) & (bbin < nbv)
        flat = bbin[valid].astype(np.int64) * nf + fbin[valid].astype(np.int64)
        side = mid[valid] - bv[valid]
        t = np.bincount(flat, minlength=nbv * nf)
        l = np.bincount(flat[side > 0], minlength=nbv * nf)
        c = np.bincount(flat[side == 0], minlength=nbv * nf)
        total[si] = t
        left[si] = l + c
        right[si] = t - l
    return total.reshape(shape), left.reshape(shape), right.reshape(shape)


def mc_column_numpy(omega, omega_c, kappa_c, gamma_c,
                    omega_tls, g2, gamma_tls, sigma, normals):
    """Noise-broadened column: average over frequency-jitter draws.

    normals : (ns, nt) standard-normal draws; defect i in draw s sits at
    omega_tls[i] + sigma[i] * normals[s, i].
    """
    ns = normals.shape[0]
    out = np.zeros(omega.shape[0], dtype=np.complex128)
    block = max(1, int(2**22 / max(1, omega.shape[0] * max(1, omega_tls.shape[0]))))
    for s0 in range(0, ns, block):
        z = normals[s0:s0 + block]
        w_i = omega_tls[None, :] + sigma[None, :] * z          # (B, nt)
        diff = omega[None, :, None] - w_i[:, None, :]          # (B, nf, nt)
        term = (g2 / (0.5 * gamma_tls + 1j * diff)).sum(axis=2)
        denom = 0.5 * (kappa_c + gamma_c) + 1j * (omega[None, :] - omega_c) + term
        out += (1.0 - 0.5 * kappa_c / denom).sum(axis=0)
    return out / ns


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if numba_available:

    @njit(cache=True)
    def _s21_column_nb(omega, omega_c, kappa_c, gamma_c, omega_tls, g2, gamma_tls, out):
        half = 0.5 * (kappa_c + gamma_c)
        for k in range(omega.shape[0]):
            acc = 0.0 + 0.0j
            w = omega[k]
            for t in range(omega_tls.shape[0]):
                acc += g2[t] / (0.5 * gamma_tls[t] + 1j * (w - omega_tls[t]))
            out[k] = 1.0 - 0.5 * kappa_c / (half + 1j * (w - omega_c) + acc)

    @njit(cache=True, parallel=True)
    def _render_grid_nb(omega, bias, omega_c, kappa_c, gamma_c,
                        delta, delta0, pz, gamma_tls, g_pref, cutoff):
        nf = omega.shape[0]
        nb = bias.shape[0]
        nt = delta.shape[0]
        out = np.empty((nf, nb), dtype=np.complex128)
        half = 0.5 * (kappa_c + gamma_c)
        for j in prange(nb):
            b = bias[j]
            idx = np.empty(nt, dtype=np.int64)
            w_col = np.empty(nt, dtype=np.float64)
            g2_col = np.empty(nt, dtype=np.float64)
            m = 0
            for t in range(nt):
                dp = delta[t] + 2.0 * pz[t] * b
                energy = np.sqrt(dp * dp + delta0[t] * delta0[t])
                w_i = energy / HBAR
                if abs(w_i - omega_c) <= cutoff:
                    g = (delta0[t] / energy) * pz[t] * g_pref
                    w_col[m] = w_i
                    g2_col[m] = g * g
                    idx[m] = t
                    m += 1
            for k in range(nf):
                acc = 0.0 + 0.0j
                w = omega[k]
                for t in range(m):
                    acc += g2_col[t] / (0.5 * gamma_tls[idx[t]] + 1j * (w - w_col[t]))
                out[k, j] = 1.0 - 0.5 * kappa_c / (half + 1j * (w - omega_c) + acc)
        return out

    @njit(cache=True, parallel=True)
    def _hough_votes_nb(f1, f2, b1, b2, f_start, df, nf,
                        b_start, db_vote, nbv, slopes):
        ns = slopes.shape[0]
        npair = f1.shape[0]
        total = np.zeros((ns, nbv, nf), dtype=np.int32)
        left = np.zeros((ns, nbv, nf), dtype=np.int32)
        right = np.zeros((ns, nbv, nf), dtype=np.int32)
        for si in prange(ns):
            s2 = slopes[si] * slopes[si]
            for p in range(npair):
                mid = 0.5 * (b1[p] + b2[p])
                bv = mid - (f1[p] * f1[p] - f2[p] * f2[p]) \
                    / (2.0 * s2 * (b1[p] - b2[p]))
                arg = f1[p] * f1[p] - s2 * (b1[p] - bv) ** 2
                if arg <= 0.0:
                    continue
                fb = int(np.rint((np.sqrt(arg) - f_start) / df))
                if fb < 0 or fb >= nf:
                    continue
                bb = int(np.rint((bv - b_start) / db_vote))
                if bb < 0 or bb >= nbv:
                    continue
                total[si, bb, fb] += 1
                side = mid - bv
                if side > 0.0:
                    left[si, bb, fb] += 1
                elif side < 0.0:
                    right[si, bb, fb] += 1
                else:
                    left[si, bb, fb] += 1
                    right[si, bb, fb] += 1
        return total, left, right

    def hough_votes_numba(freq, bias, col, f_start, df, nf,
                          b_start, db_vote, nbv, slopes, min_sep, max_sep):
        order = np.argsort(col, kind="stable")
        freq = np.ascontiguousarray(freq[order], dtype=np.float64)
        bias = np.ascontiguousarray(bias[order], dtype=np.float64)
        i_arr, j_arr = _hough_pairs(col[order], min_sep, max_sep)
        return _hough_votes_nb(
            freq[i_arr], freq[j_arr], bias[i_arr], bias[j_arr],
            float(f_start), float(df), int(nf),
            float(b_start), float(db_vote), int(nbv),
            np.ascontiguousarray(slopes, dtype=np.float64))

    @njit(cache=True)
    def _mc_column_nb(omega, omega_c, kappa_c, gamma_c,
                      omega_tls, g2, gamma_tls, sigma, normals):
        nf = omega.shape[0]
        nt = omega_tls.shape[0]
        ns = normals.shape[0]
        out = np.zeros(nf, dtype=np.complex128)
        half = 0.5 * (kappa_c + gamma_c)
        w_s = np.empty(nt, dtype=np.float64)
        for s in range(ns):
            for t in range(nt):
                w_s[t] = omega_tls[t] + sigma[t] * normals[s, t]
            for k in range(nf):
                acc = 0.0 + 0.0j
                w = omega[k]
                for t in range(nt):
                    acc += g2[t] / (0.5 * gamma_tls[t] + 1j * (w - w_s[t]))
                out[k] += 1.0 - 0.5 * kappa_c / (half + 1j * (w - omega_c) + acc)
        return out / ns

    def render_grid_numba(omega, bias, omega_c, kappa_c, gamma_c,
                          delta, delta0, pz, gamma_tls, g_pref, cutoff):
        return _render_grid_nb(
            np.ascontiguousarray(omega, dtype=np.float64),
            np.ascontiguousarray(bias, dtype=np.float64),
            float(omega_c), float(kappa_c), float(gamma_c),
            np.ascontiguousarray(delta, dtype=np.float64),
            np.ascontiguousarray(delta0, dtype=np.float64),
            np.ascontiguousarray(pz, dtype=np.float64),
            np.ascontiguousarray(gamma_tls, dtype=np.float64),
            float(g_pref), float(cutoff))

    def mc_column_numba(omega, omega_c, kappa_c, gamma_c,
                        omega_tls, g2, gamma_tls, sigma, normals):
        return _mc_column_nb(
            np.ascontiguousarray(omega, dtype=np.float64),
            float(omega_c), float(kappa_c), float(gamma_c),
            np.ascontiguousarray(omega_tls, dtype=np.float64),
            np.ascontiguousarray(g2, dtype=np.float64),
            np.ascontiguousarray(gamma_tls, dtype=np.float64),
            np.ascontiguousarray(sigma, dtype=np.float64),
            np.ascontiguousarray(normals, dtype=np.float64))


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def render_grid(omega, bias, omega_c, kappa_c, gamma_c,
                delta, delta0, pz, gamma_tls, g_pref, cutoff):
    """Backend-dispatched transmission grid. See render_grid_numpy."""
    if _use_numba:
        return render_grid_numba(omega, bias, omega_c, kappa_c, gamma_c,
                                 delta, delta0, pz, gamma_tls, g_pref, cutoff)
    return render_grid_numpy(omega, bias, omega_c, kappa_c, gamma_c,
                             delta, delta0, pz, gamma_tls, g_pref, cutoff)


def mc_column(omega, omega_c, kappa_c, gamma_c,
              omega_tls, g2, gamma_tls, sigma, normals):
    """Backend-dispatched noise-broadened column. See mc_column_numpy."""
    if _use_numba:
        return mc_column_numba(omega, omega_c, kappa_c, gamma_c,
                               omega_tls, g2, gamma_tls, sigma, normals)
    return mc_column_numpy(omega, omega_c, kappa_c, gamma_c,
                           omega_tls, g2, gamma_tls, sigma, normals)


def hough_votes(freq, bias, col, f_start, df, nf,
                b_start, db_vote, nbv, slopes, min_sep, max_sep):
    """Backend-dispatched pair-vote accumulators. See hough_votes_numpy."""
    if _use_numba:
        return hough_votes_numba(freq, bias, col, f_start, df, nf,
                                 b_start, db_vote, nbv, slopes,
                                 min_sep, max_sep)
    return hough_votes_numpy(freq, bias, col, f_start, df, nf,
                             b_start, db_vote, nbv, slopes, min_sep, max_sep)

"""Track extraction: from a rendered bias sweep to per-defect parameters.

The chain mirrors how such spectra are reduced by hand, one stage per
operation so each is testable against synthetic input:

  contrast_enhance    remove the bias-independent resonator line
  lowpass_derivative  optional ripple filter + frequency derivative
  find_local_minima   per-column dip candidates above a noise threshold
  smooth_minima       kernel density of the dip cloud on the grid
  propose_candidates  ridge chains -> hyperbola starting guesses
  fit_hyperbola_mc    seeded multistart refinement of one candidate
  peel_and_iterate    fit in descending tunnelling energy, remove the
                      claimed points, repeat until nothing new fits

A defect track f(b) = sqrt(f_v^2 + s^2 (b - b_v)^2) is linear in
(f_v^2 + s^2 b_v^2, -2 s^2 b_v, s^2) against (1, b, b^2), so each
refinement step is an exact least-squares solve on f^2; the Monte Carlo
part perturbs the corridor assignment, not the solver. Admitted tracks
must cross their own vertex inside the window: support on both sides of
b_v, vertex frequency inside the span, vertex bias inside the sweep.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, signal

from . import kernels
from .constants import H, debye_to_si
from .synth import BiasSpectrum, ensemble_average, rng_for, to_db

__all__ = [
    "ProcessedGrid",
    "MinimaPoints",
    "CandidateGuess",
    "TlsTrack",
    "PipelineParams",
    "ExtractionDiagnostics",
    "contrast_enhance",
    "lowpass_derivative",
    "find_local_minima",
    "smooth_minima",
    "propose_candidates",
    "propose_hough",
    "fit_hyperbola_mc",
    "peel_and_iterate",
    "extract_tracks",
]


@dataclass
class ProcessedGrid:
    """A derived (n_freq, n_bias) grid with its axes and history."""

    values: np.ndarray
    freq: np.ndarray
    bias: np.ndarray
    provenance: list = field(default_factory=list)

    def __post_init__(self):
        if self.values.shape != (self.freq.size, self.bias.size):
            raise ValueError("values must have shape (n_freq, n_bias)")


@dataclass
class MinimaPoints:
    """Dip locations: parallel arrays plus the grid axes they came from.

    snr is each depth in units of its column's noise scale; points built
    from exact synthetic positions may leave it None, which downstream
    stages treat as arbitrarily significant.
    """

    freq: np.ndarray    # Hz, per point
    bias: np.ndarray    # V/m, per point
    depth: np.ndarray   # processed-value units, positive
    row: np.ndarray     # frequency index
    col: np.ndarray     # bias index
    freq_axis: np.ndarray
    bias_axis: np.ndarray
    snr: np.ndarray = None

    def __len__(self):
        return self.freq.size

    def take(self, idx):
        return MinimaPoints(self.freq[idx], self.bias[idx], self.depth[idx],
                            self.row[idx], self.col[idx],
                            self.freq_axis, self.bias_axis,
                            None if self.snr is None else self.snr[idx])

    def strong(self, min_snr):
        """Subset at or above min_snr; the whole set when snr is None."""
        if self.snr is None:
            return self
        return self.take(np.flatnonzero(self.snr >= min_snr))


@dataclass(frozen=True)
class CandidateGuess:
    """Starting point for one hyperbola fit."""

    f_vertex: float      # Hz
    bias_vertex: float   # V/m
    slope: float         # Hz/(V/m), asymptotic |df/db| = 2 pz / h
    n_support: int


@dataclass(frozen=True)
class TlsTrack:
    """One fitted defect track."""

    delta0: float         # J
    vertex_bias: float    # V/m
    pz: float             # C*m
    rss: float            # summed squared frequency residual, Hz^2
    n_points: int
    crosses_vertex: bool


@dataclass(frozen=True)
class PipelineParams:
    """Tunable extraction defaults; all lengths in grid cells."""

    use_derivative: bool = False
    lowpass_cutoff: float = 2500.0      # cycles per GHz along the frequency axis
    depth_factor: float = 3.0           # minima threshold, x column noise MAD
    discovery_factor: float = 6.0       # stricter cut for candidate discovery
    baseline_window: int = 15           # rolling-median cells
    mask_linewidths: float = 1.0        # cavity exclusion half-width, x fwhm
    sigma_f_cells: float = 2.0
    sigma_bias_cells: float = 2.0
    rel_floor: float = 0.25             # ridge threshold vs single-point peak
    min_chain: int = 8
    jump_cells: int = 12
    gap_cells: int = 2
    min_rise_cells: float = 3.0         # row extent a chain must bend through
    corridor_cells: float = 2.0
    budget: int = 2000
    min_points: int = 8
    rms_max_cells: float = 1.0
    max_rounds: int = 3
    merge_pz_rel: float = 0.03
    merge_vertex_hz: float = 1e6
    arc_gap_cells: int = 4              # column gap tolerated inside one arc
    trust_f_cells: float = 24.0         # vertex wander allowed during EM
    trust_bias_cells: float = 8.0
    pz_min_debye: float = 0.3           # admissible slope range as dipoles
    pz_max_debye: float = 12.0
    hough_slopes: int = 96
    hough_max_sep_cells: int = 40       # widest column gap within a vote pair
    hough_z_min: float = 4.0            # across-slope contrast to admit a cell
    hough_max_candidates: int = 2500
    support_log10p: float = -6.0        # max log10 chance level of a track


@dataclass
class ExtractionDiagnostics:
    n_minima: int = 0
    n_candidates: int = 0
    n_fits: int = 0
    n_admitted: int = 0
    n_rejected_vertex: int = 0
    n_rejected_quality: int = 0
    mask: tuple | None = None


# ---------------------------------------------------------------------------
# grid processing
# ---------------------------------------------------------------------------

def contrast_enhance(spectrum: BiasSpectrum, avg=None):
    """Difference from the bias-averaged trace, weighted by its magnitude.

    value = (dB(S21) - dB(avg)) * |avg|, column by column. The resonator
    line is bias independent and cancels; defect dips survive as
    negative excursions whose scale tracks the local transmission.
    """
    if avg is None:
        avg = ensemble_average(spectrum)
    avg = np.asarray(avg)
    if avg.shape != (spectrum.freq.size,):
        raise ValueError("avg trace must match the frequency axis")
    values = (to_db(spectrum.s21) - to_db(avg)[:, None]) * np.abs(avg)[:, None]
    return ProcessedGrid(values=values, freq=spectrum.freq, bias=spectrum.bias,
                         provenance=["contrast"])


def lowpass_derivative(grid: ProcessedGrid, cutoff=2500.0):
    """Zero-phase low-pass along frequency, then d/df, shape preserved.

    cutoff is in cycles per GHz of the frequency axis; it must sit below
    the axis Nyquist rate 1/(2 df).
    """
    df = grid.freq[1] - grid.freq[0]
    nyquist = 1.0 / (2.0 * df) * 1e9  # cycles per GHz
    if not 0 < cutoff < nyquist:
        raise ValueError(f"cutoff must be in (0, {nyquist:.1f}) cycles/GHz")
    b, a = signal.butter(4, cutoff / nyquist)
    smoothed = signal.filtfilt(b, a, grid.values, axis=0)
    deriv = np.gradient(smoothed, df, axis=0)
    return ProcessedGrid(values=deriv, freq=grid.freq, bias=grid.bias,
                         provenance=list(grid.provenance) + ["lowpass+derivative"])


def find_local_minima(grid: ProcessedGrid, depth_factor=3.0, baseline_window=15,
                      exclude_freq=None):
    """Strict per-column local minima deeper than the column noise.

    A point qualifies when its value is below both neighbours and its
    depth below a rolling-median baseline exceeds depth_factor times the
    column's noise scale (1.4826 * MAD of the baseline residual).
    exclude_freq, when given, is an (f_lo, f_hi) band to ignore (the
    cavity line).
    """
    nf, nb = grid.values.shape
    rows, cols, depths, snrs = [], [], [], []
    keep_rows = np.ones(nf, dtype=bool)
    if exclude_freq is not None:
        lo, hi = exclude_freq
        keep_rows &= (grid.freq < lo) | (grid.freq > hi)
    for j in range(nb):
        v = grid.values[:, j]
        base = ndimage.median_filter(v, size=baseline_window, mode="nearest")
        resid = v - base
        scale = 1.4826 * np.median(np.abs(resid - np.median(resid)))
        local = np.zeros(nf, dtype=bool)
        local[1:-1] = (v[1:-1] < v[:-2]) & (v[1:-1] < v[2:])
        depth = -resid
        ok = local & keep_rows & (depth > depth_factor * scale)
        idx = np.flatnonzero(ok)
        rows.append(idx)
        cols.append(np.full(idx.size, j))
        depths.append(depth[idx])
        snrs.append(depth[idx] / scale if scale > 0
                    else np.full(idx.size, np.inf))
    row = np.concatenate(rows) if rows else np.empty(0, int)
    col = np.concatenate(cols) if cols else np.empty(0, int)
    depth = np.concatenate(depths) if depths else np.empty(0)
    snr = np.concatenate(snrs) if snrs else np.empty(0)
    return MinimaPoints(freq=grid.freq[row], bias=grid.bias[col], depth=depth,
                        row=row, col=col, freq_axis=grid.freq,
                        bias_axis=grid.bias, snr=snr)


def smooth_minima(points: MinimaPoints, sigma_f_cells=2.0, sigma_bias_cells=2.0):
    """Gaussian kernel density of the dip cloud on the source grid.

    Points are weighted by dip depth relative to the median depth, so
    marginal threshold-crossers near the noise floor cannot build crest
    streaks that compete with real tracks, whose dips run much deeper.
    """
    nf, nb = points.freq_axis.size, points.bias_axis.size
    counts = np.zeros((nf, nb))
    if len(points):
        med = np.median(points.depth)
        weights = points.depth / med if med > 0 else np.ones(len(points))
        np.add.at(counts, (points.row, points.col), weights)
    density = ndimage.gaussian_filter(counts, sigma=(sigma_f_cells, sigma_bias_cells),
                                      mode="constant")
    return ProcessedGrid(values=density, freq=points.freq_axis,
                         bias=points.bias_axis, provenance=["minima-density"])


# ---------------------------------------------------------------------------
# candidate proposal
# ---------------------------------------------------------------------------

def _quadratic_track_fit(b, f):
    """LS fit of f^2 = c0 + c1 b + c2 b^2, returned as (f_v, b_v, slope).

    Falls back to the chain extremum when the paraboloid is degenerate.
    """
    bc = b.mean()
    bs = b.std() or 1.0
    x = (b - bc) / bs
    y = f.astype(np.float64) ** 2
    with warnings.catch_warnings():
        # near-collinear subsets are expected; the degenerate branch copes
        warnings.simplefilter("ignore", np.exceptions.RankWarning)
        c0, c1, c2 = np.polynomial.polynomial.polyfit(x, y, 2)
    if c2 > 0:
        x_v = -c1 / (2.0 * c2)
        fv2 = c0 - c2 * x_v * x_v
        if fv2 > 0:
            slope = np.sqrt(c2) / bs
            return float(np.sqrt(fv2)), float(x_v * bs + bc), float(slope)
    # degenerate: vertex at the lowest chain point, slope from the ends
    k = int(np.argmin(f))
    order = np.argsort(b)
    bo, fo = b[order], f[order]
    m = max(2, bo.size // 4)
    s_lo = abs(np.polyfit(bo[:m], fo[:m], 1)[0]) if np.ptp(bo[:m]) > 0 else 0.0
    s_hi = abs(np.polyfit(bo[-m:], fo[-m:], 1)[0]) if np.ptp(bo[-m:]) > 0 else 0.0
    return float(f[k]), float(b[k]), float(max(s_lo, s_hi, 1e-12))


def propose_candidates(density: ProcessedGrid, points: MinimaPoints = None,
                       sigma_f_cells=2.0, sigma_bias_cells=2.0, rel_floor=0.25,
                       min_chain=8, jump_cells=12, gap_cells=2,
                       min_rise_cells=3.0, refine_cells=None):
    """Ridge chains in the dip density, turned into hyperbola guesses.

    Per bias column the density's strict local maxima above a floor
    (rel_floor times the peak an isolated dip would produce) are crest
    points; crests in adjacent columns are chained greedily when their
    frequency rows are within jump_cells, tolerating gap_cells missing
    columns. Chains at least min_chain long are fit for a starting
    (f_vertex, bias_vertex, slope). When the raw dip points are passed
    in, each chain's quadratic is refit on the raw point nearest the
    crest in each chain column (within refine_cells, defaulting to
    jump_cells since the crest lags a bending track by up to the link
    tolerance). That removes the curvature flattening the smoothing
    introduces, and chains backed by fewer than min_chain raw points
    are artifacts of the smoothing and are dropped. Chains whose rows
    rise through fewer than min_rise_cells are horizontal blur streaks,
    not bending tracks, and are dropped too. Candidates come back
    sorted by descending vertex frequency.
    """
    vals = density.values
    nf, nb = vals.shape
    peak_ref = 1.0 / (2.0 * np.pi * sigma_f_cells * sigma_bias_cells)
    floor = rel_floor * peak_ref

    crest_rows = []
    for j in range(nb):
        v = vals[:, j]
        local = np.zeros(nf, dtype=bool)
        local[1:-1] = (v[1:-1] >= v[:-2]) & (v[1:-1] > v[2:]) & (v[1:-1] >= floor)
        crest_rows.append(np.flatnonzero(local))

    # greedy chain linking, nearest pair first
    chains = []          # each: list of (col, row)
    last = {}            # chain idx -> (col, row) of its tail
    active = []
    for j in range(nb):
        rows = crest_rows[j]
        pairs = []
        for ci in active:
            cj, cr = last[ci]
            for r in rows:
                d = abs(int(r) - cr)
                if d <= jump_cells:
                    pairs.append((d, ci, int(r)))
        pairs.sort()
        used_chain, used_row = set(), set()
        for d, ci, r in pairs:
            if ci in used_chain or r in used_row:
                continue
            chains[ci].append((j, r))
            last[ci] = (j, r)
            used_chain.add(ci)
            used_row.add(r)
        for r in rows:
            if int(r) not in used_row:
                chains.append([(j, int(r))])
                last[len(chains) - 1] = (j, int(r))
        active = [ci for ci in range(len(chains)) if j - last[ci][0] <= gap_cells]

    out = []
    for chain in chains:
        if len(chain) < min_chain:
            continue
        cols = np.array([c for c, _ in chain])
        rows_ = np.array([r for _, r in chain])
        fit_rows = rows_
        bias_fit = density.bias[cols]
        freq_fit = density.freq[rows_]
        if points is not None:
            radius = jump_cells if refine_cells is None else refine_cells
            keep = []
            for c, r in chain:
                in_col = np.flatnonzero(points.col == c)
                if in_col.size == 0:
                    continue
                nearest = in_col[np.argmin(np.abs(points.row[in_col] - r))]
                if abs(points.row[nearest] - r) <= radius:
                    keep.append(nearest)
            if len(keep) < min_chain:
                continue
            keep = np.array(keep)
            fit_rows = points.row[keep]
            bias_fit = points.bias[keep]
            freq_fit = points.freq[keep]
        if np.ptp(fit_rows) < min_rise_cells:
            continue
        fv, bv, slope = _quadratic_track_fit(bias_fit, freq_fit)
        out.append(CandidateGuess(f_vertex=fv, bias_vertex=bv, slope=slope,
                                  n_support=int(fit_rows.size)))

    # collapse near-identical guesses, keeping the better-supported one
    kept = []
    for c in sorted(out, key=lambda c: -c.n_support):
        if any(abs(c.f_vertex - k.f_vertex) < 2e6
               and abs(c.bias_vertex - k.bias_vertex) < 2e3 for k in kept):
            continue
        kept.append(c)
    kept.sort(key=lambda c: -c.f_vertex)
    return kept


def propose_hough(points: MinimaPoints, slope_lo, slope_hi, n_slopes=96,
                  f_step_cells=4, bv_step_cells=2, min_sep_cells=2,
                  max_sep_cells=40, z_min=4.0, vote_min=10, balance_min=2,
                  slopes_per_cell=3, max_candidates=2500):
    """Pair-vote vertex accumulator over a log grid of slopes.

    Any two dips plus a trial slope pin a hyperbola vertex exactly, so
    every pair of dips from nearby columns casts one vote per slope at
    its implied (vertex bias, vertex frequency). Pairs drawn from one
    arc vote into the same cell at the arc's true slope, growing the
    peak as the square of the arc support, while pairs mixing unrelated
    arcs scatter. Crest chaining only sees the flat cap of an arc, where
    curvature is noise-dominated, so its slope guesses are unusable and
    shadowed caps propose nothing; pair voting integrates the whole arm
    span.

    Votes are binned coarsely in vertex frequency because the implied
    frequency cancels a slope term up to two orders larger than the
    curvature signal, so one slope-grid step smears it by several grid
    cells; the implied vertex bias has no such cancellation and stays
    sub-cell. Within a vertex cell the pile-up is coherent only at the
    true slope, so cells are scored by the contrast between their best
    slope bin and their own across-slope median, which an incoherent
    pile-up of crossing arcs cannot fake. Each surviving cell emits its
    few strongest slope-axis peaks rather than one winner: a steep arc
    is mostly cap, its votes spread over many slope bins, and the
    argmax bin is frequently noise. Peaks fed from only one side of
    their vertex bias are dropped because a monotone branch from an
    out-of-window vertex fits some hyperbola well, but never a
    vertex-crossing one. The emitted guesses are deliberately loose:
    downstream multistart refinement owns the final vertex and slope.
    """
    f_axis, b_axis = points.freq_axis, points.bias_axis
    df = f_axis[1] - f_axis[0]
    db = b_axis[1] - b_axis[0]
    if points.freq.size == 0:
        return []
    fstep = max(1, int(f_step_cells))
    bstep = max(1, int(bv_step_cells))
    df_vote = df * fstep
    db_vote = db * bstep
    nf_vote = (f_axis.size + fstep - 1) // fstep
    nbv = (b_axis.size + bstep - 1) // bstep
    slopes = np.geomspace(slope_lo, slope_hi, n_slopes)

    total, left, right = kernels.hough_votes(
        points.freq, points.bias, points.col, f_axis[0], df_vote, nf_vote,
        b_axis[0], db_vote, nbv, slopes, min_sep_cells, max_sep_cells)

    flat = total.reshape(n_slopes, -1)
    si_best = np.argmax(flat, axis=0)
    cell = np.arange(flat.shape[1])
    best = flat[si_best, cell].reshape(nbv, nf_vote)
    balance = np.minimum(left, right).reshape(n_slopes, -1)
    bal = balance[si_best, cell].reshape(nbv, nf_vote)
    med = np.median(total, axis=0)
    z = (best - med) / np.sqrt(med + 1.0)

    peak = (z == ndimage.maximum_filter(z, size=3)) & (z >= z_min) \
        & (best >= vote_min) & (bal >= balance_min)
    ib, ifb = np.nonzero(peak)
    if ib.size == 0:
        return []
    zs = z[ib, ifb]

    # per cell, local maxima of the slope profile, strongest few
    prof = total[:, ib, ifb].astype(np.float64)
    pmax = prof.max(axis=0)
    pad = np.full((1, ib.size), -np.inf)
    is_loc = (prof >= np.vstack([pad, prof[:-1]])) \
        & (prof > np.vstack([prof[1:], pad])) \
        & (prof >= 0.5 * pmax) & (prof > 0)
    score = np.where(is_loc, prof, -1.0)
    top = np.argsort(-score, axis=0, kind="stable")[:max(1, slopes_per_cell)]
    votes = np.take_along_axis(score, top, axis=0)
    kk, cc = np.nonzero(votes > 0)
    cand_fv = f_axis[0] + ifb[cc] * df_vote
    cand_bv = b_axis[0] + ib[cc] * db_vote
    cand_sl = slopes[top[kk, cc]]
    cand_votes = votes[kk, cc]
    # secondary slopes of a cell rank below its primary
    rank = zs[cc] * cand_votes / pmax[cc]
    order = np.argsort(-rank)
    cand_fv, cand_bv = cand_fv[order], cand_bv[order]
    cand_sl, cand_votes = cand_sl[order], cand_votes[order]

    # the same arc peaks in a few adjacent cells; crossing arcs that
    # share a vertex cell at genuinely different slopes must both survive
    kfv = np.empty(max_candidates)
    kbv = np.empty(max_candidates)
    ksl = np.empty(max_candidates)
    kept = []
    for i in range(cand_fv.size):
        n = len(kept)
        if n == max_candidates:
            break
        dup = np.any((np.abs(kfv[:n] - cand_fv[i]) <= 4 * df)
                     & (np.abs(kbv[:n] - cand_bv[i]) <= 3 * db_vote)
                     & (np.maximum(ksl[:n], cand_sl[i])
                        <= 1.35 * np.minimum(ksl[:n], cand_sl[i])))
        if dup:
            continue
        kfv[n], kbv[n], ksl[n] = cand_fv[i], cand_bv[i], cand_sl[i]
        kept.append(CandidateGuess(f_vertex=float(cand_fv[i]),
                                   bias_vertex=float(cand_bv[i]),
                                   slope=float(cand_sl[i]),
                                   n_support=int(cand_votes[i])))
    kept.sort(key=lambda c: -c.f_vertex)
    return kept


# ---------------------------------------------------------------------------
# hyperbola fitting
# ---------------------------------------------------------------------------

def _model_freq(b, fv, bv, slope):
    return np.sqrt(np.maximum(fv * fv + (slope * (b - bv)) ** 2, 0.0))


def _assign(points, theta, corridor_hz):
    pred = _model_freq(points.bias, *theta)
    return np.flatnonzero(np.abs(points.freq - pred) <= corridor_hz)


def _largest_run(points, idx, arc_gap_cells, theta=None, mask_band=None):
    """Largest contiguous-column subset of an assignment.

    A physical track occupies one unbroken run of observable columns;
    scattered pickups from unrelated arcs elsewhere on the grid are not
    support. Columns where the model curve dives into the cavity
    exclusion band or out of the sweep window cannot hold a dip, so they
    do not count toward a gap: an arc whose cap sits behind the cavity
    line must survive as one track, not two rejected halves.
    """
    if idx.size == 0:
        return idx
    f_axis, b_axis = points.freq_axis, points.bias_axis
    cols = points.col[idx]
    order = np.argsort(cols, kind="stable")
    idx = idx[order]
    cols = cols[order]
    gaps = np.diff(cols) - 1
    if theta is not None and np.any(gaps > 0):
        hidden = np.zeros(b_axis.size, dtype=bool)
        pred = _model_freq(b_axis, *theta)
        df = f_axis[1] - f_axis[0]
        hidden |= (pred < f_axis[0] - df / 2) | (pred > f_axis[-1] + df / 2)
        if mask_band is not None:
            lo, hi = mask_band
            hidden |= (pred >= lo) & (pred <= hi)
        covered = np.cumsum(hidden)
        # observable columns strictly between consecutive support columns
        gaps = gaps - (covered[cols[1:] - 1] - covered[cols[:-1]])
    breaks = np.flatnonzero(gaps > arc_gap_cells)
    starts = np.concatenate([[0], breaks + 1])
    ends = np.concatenate([breaks + 1, [cols.size]])
    best = int(np.argmax(ends - starts))
    return np.sort(idx[starts[best]:ends[best]])


def _refit(points, idx):
    """Exact LS refit on a point subset; returns (theta, rss_of_theta)."""
    theta = _quadratic_track_fit(points.bias[idx], points.freq[idx])
    resid = points.freq[idx] - _model_freq(points.bias[idx], *theta)
    return theta, float(resid @ resid)


def _support_log_pvalue(points, idx, corridor_hz):
    """Log10 tail probability of the support under an independent null.

    Alternating assignment and refit is an adversarial search: in a
    dense dip cloud it reliably finds shallow corridors that thread ten
    scattered points from ten different arcs into a locally optimal
    pseudo-track. Those threads are only mildly unlikely under a null
    where each column drops its dips anywhere, whereas a genuine arc's
    support is astronomically so. The null rate per column is that
    column's dip count times the corridor fraction of the frequency
    axis, summed over the track's column span.
    """
    from scipy import stats

    f_axis = points.freq_axis
    df = f_axis[1] - f_axis[0]
    cols = points.col[idx]
    per_col = np.bincount(points.col, minlength=points.bias_axis.size)
    span = per_col[cols.min():cols.max() + 1]
    rate = span.sum() * min(1.0, (2.0 * corridor_hz / df + 1.0) / f_axis.size)
    return float(stats.poisson.logsf(idx.size - 1, rate) / np.log(10.0))


def _em_refine(points, theta, corridor_hz, min_points, rounds=10,
               trust=None, slope_bounds=None, arc_gap_cells=None,
               mask_band=None, log10p_max=None):
    """Alternate corridor assignment and refit. (theta, idx, rss) or None.

    The corridor is annealed from three times its final width: a seed a
    fraction of a cell off in vertex bias desynchronises from the arms
    within a few columns, so a cold start at the final corridor sees
    only the cap, too few points to survive, while a wide first pass
    feeds the refit enough arm to re-centre. Several rounds matter for
    the same reason: a near-flat start only captures the slow bend at
    the vertex, and each refit steepens the model enough to reach
    further up the arms on the next assignment. trust, when given as
    (f_vertex, bias_vertex, f_radius, bias_radius), discards any refit
    that wanders away from the proposing crest; in a crowded grid an
    unconstrained fit drifts onto whichever arc explains the most
    points, not the one it was seeded for. slope_bounds rejects
    converged fits outside the physically plausible dipole range, and
    log10p_max rejects support explicable by column density alone.
    """
    idx = np.empty(0, int)
    rss = np.inf
    for r in range(rounds):
        scale = (3.0, 2.0, 1.5)[r] if r < 3 else 1.0
        new_idx = _assign(points, theta, corridor_hz * scale)
        if new_idx.size < min(4, min_points):
            return None
        converged = scale == 1.0 and new_idx.size == idx.size \
            and np.array_equal(new_idx, idx)
        idx = new_idx
        theta, rss = _refit(points, idx)
        if converged:
            break
    if idx.size < min_points:
        return None
    # gates apply to the converged fit only; intermediate iterates swing
    # wide while a near-flat start steepens toward the arms, and the
    # wrong-slope corridor of an early iterate picks up only scattered
    # crossings that contiguity would strip below min_points
    if arc_gap_cells is not None:
        run = _largest_run(points, idx, arc_gap_cells, theta, mask_band)
        if run.size < min_points:
            return None
        if run.size < idx.size:
            idx = run
            theta, rss = _refit(points, idx)
    if trust is not None:
        fv0, bv0, f_rad, b_rad = trust
        if abs(theta[0] - fv0) > f_rad or abs(theta[1] - bv0) > b_rad:
            return None
    if slope_bounds is not None:
        lo, hi = slope_bounds
        if not lo <= theta[2] <= hi:
            return None
    if log10p_max is not None:
        if _support_log_pvalue(points, idx, corridor_hz) > log10p_max:
            return None
    return theta, idx, rss


def _score_starts(points, thetas, corridor_hz, min_points):
    """Per-start (n_assigned, rss of the start itself), chunk-vectorized."""
    ns = thetas.shape[0]
    n_assigned = np.zeros(ns, dtype=np.int64)
    rss = np.full(ns, np.inf)
    b = points.bias[None, :]
    f = points.freq[None, :]
    chunk = max(1, int(2**21 / max(1, points.freq.size)))
    for s0 in range(0, ns, chunk):
        th = thetas[s0:s0 + chunk]
        fv = th[:, 0:1]
        bv = th[:, 1:2]
        sl = th[:, 2:3]
        pred = np.sqrt(np.maximum(fv * fv + (sl * (b - bv)) ** 2, 0.0))
        resid = f - pred
        mask = np.abs(resid) <= corridor_hz
        n = mask.sum(axis=1)
        r = np.where(mask, resid, 0.0)
        rchunk = np.einsum("sn,sn->s", r, r)
        n_assigned[s0:s0 + chunk] = n
        with np.errstate(invalid="ignore", divide="ignore"):
            rss[s0:s0 + chunk] = np.where(n >= min_points, rchunk, np.inf)
    return n_assigned, rss


def _fit_candidate(points, candidate, starts, seed, corridor_hz, min_points,
                   trust=None, slope_bounds=None, arc_gap_cells=None,
                   mask_band=None, log10p_max=None, top_k=8):
    """Seeded multistart fit of one candidate. Returns (track, idx) or (None, [])."""
    theta0 = np.array([candidate.f_vertex, candidate.bias_vertex, candidate.slope])
    db = points.bias_axis[1] - points.bias_axis[0]
    df = points.freq_axis[1] - points.freq_axis[0]

    rng = rng_for(seed, 4)
    n_extra = max(0, int(starts) - 1)
    z = rng.standard_normal((n_extra, 3))
    thetas = np.empty((n_extra + 1, 3))
    thetas[0] = theta0
    # chain-based slope guesses can be off by 2x on short vertex arcs,
    # so the slope is explored on a wide log scale
    thetas[1:, 0] = theta0[0] + z[:, 0] * 4.0 * df
    thetas[1:, 1] = theta0[1] + z[:, 1] * 4.0 * db
    thetas[1:, 2] = theta0[2] * np.exp(0.5 * z[:, 2])

    n_assigned, rss0 = _score_starts(points, thetas, corridor_hz, min_points)
    # more explained support beats a tighter but tiny assignment
    order = np.lexsort((rss0, -n_assigned))
    shortlist = [0] + [int(i) for i in order[:top_k] if i != 0]

    best = None
    best_key = None
    for i in shortlist:
        if n_assigned[i] < min_points and i != 0:
            continue
        refined = _em_refine(points, tuple(thetas[i]), corridor_hz, min_points,
                             trust=trust, slope_bounds=slope_bounds,
                             arc_gap_cells=arc_gap_cells, mask_band=mask_band,
                             log10p_max=log10p_max)
        if refined is None:
            continue
        theta, idx, rss = refined
        key = (-idx.size, rss / idx.size)
        if best_key is None or key < best_key:
            best, best_key = (theta, idx, rss), key
    if best is None:
        return None, np.empty(0, int)

    (fv, bv, slope), idx, rss = best
    track = TlsTrack(delta0=H * fv, vertex_bias=bv, pz=slope * H / 2.0,
                     rss=rss, n_points=int(idx.size),
                     crosses_vertex=_crosses_vertex(points, idx, fv, bv))
    return track, idx


def _crosses_vertex(points, idx, fv, bv):
    """Vertex in-window with anchored support on both flanks.

    Two points per side, at least one of honest depth each: a monotone
    branch can pick up a couple of threshold-grazing stragglers past its
    end, and a vertex claim anchored only by those is a branch, not a
    crossing.
    """
    f_axis, b_axis = points.freq_axis, points.bias_axis
    db = b_axis[1] - b_axis[0]
    if not (f_axis[0] <= fv <= f_axis[-1] and b_axis[0] <= bv <= b_axis[-1]):
        return False
    rel = points.bias[idx] - bv
    depth = points.depth[idx]
    anchored = depth >= 0.2 * np.median(depth)
    left = rel <= -db
    right = rel >= db
    return bool(left.sum() >= 2 and right.sum() >= 2
                and (left & anchored).any() and (right & anchored).any())


def fit_hyperbola_mc(points: MinimaPoints, candidate: CandidateGuess,
                     budget=2000, seed=0, corridor_cells=2.0, min_points=4):
    """Fit one candidate track against a dip cloud.

    Multistart: the candidate itself plus seeded Gaussian perturbations,
    budget starts in total. Every start is scored by corridor support
    and residual; the best few are refined by alternating corridor
    assignment with an exact least-squares refit until the assignment
    stabilises. Returns the best TlsTrack, or None when no start
    gathers min_points of support.
    """
    df = points.freq_axis[1] - points.freq_axis[0]
    track, _ = _fit_candidate(points, candidate, budget, seed,
                              corridor_hz=corridor_cells * df,
                              min_points=min_points)
    return track


def peel_and_iterate(points: MinimaPoints, candidates, budget=2000, seed=0,
                     params: PipelineParams | None = None, mask_band=None):
    """Fit candidates largest tunnelling energy first, peeling support.

    Every fit that passes the residual gate removes its corridor points
    from the cloud so later fits are undisturbed; only tracks that also
    cross their vertex inside the window are returned. After the
    candidate list is exhausted the remaining cloud is re-proposed, up
    to max_rounds, so tracks initially hidden under a stronger
    neighbour still surface. Near-duplicate tracks (pz within
    merge_pz_rel, vertex frequency within merge_vertex_hz) are merged
    keeping the better-supported fit.
    """
    p = params or PipelineParams(budget=budget)
    df = points.freq_axis[1] - points.freq_axis[0]
    db = points.bias_axis[1] - points.bias_axis[0]
    corridor_hz = p.corridor_cells * df
    rms_max = p.rms_max_cells * df
    slope_bounds = (2.0 * debye_to_si(p.pz_min_debye) / H,
                    2.0 * debye_to_si(p.pz_max_debye) / H)

    remaining = points
    tracks = []
    diag = ExtractionDiagnostics(n_minima=len(points))
    queue = sorted(candidates, key=lambda c: -c.f_vertex)
    diag.n_candidates = len(queue)

    for round_no in range(p.max_rounds):
        peeled = 0
        # the budget is restarts across the whole queue, so each
        # candidate gets its share, floored to keep refinement alive
        starts = int(np.clip(p.budget // max(1, len(queue)), 8, 64))
        for k, cand in enumerate(queue):
            if len(remaining) < p.min_points:
                break
            trust = (cand.f_vertex, cand.bias_vertex,
                     p.trust_f_cells * df, p.trust_bias_cells * db)
            track, idx = _fit_candidate(remaining, cand, starts,
                                        seed + 1000 * round_no + k,
                                        corridor_hz, p.min_points,
                                        trust=trust,
                                        slope_bounds=slope_bounds,
                                        arc_gap_cells=p.arc_gap_cells,
                                        mask_band=mask_band,
                                        log10p_max=p.support_log10p)
            diag.n_fits += 1
            if track is None:
                continue
            if np.sqrt(track.rss / track.n_points) > rms_max:
                diag.n_rejected_quality += 1
                continue
            keep = np.ones(len(remaining), dtype=bool)
            keep[idx] = False
            remaining = remaining.take(np.flatnonzero(keep))
            peeled += 1
            if track.crosses_vertex:
                tracks.append(track)
            else:
                diag.n_rejected_vertex += 1
        if round_no == p.max_rounds - 1 or peeled == 0 or len(remaining) < p.min_points:
            break
        queue = _propose_from_params(remaining, p)
        diag.n_candidates += len(queue)
        if not queue:
            break

    tracks = _merge_duplicates(tracks, p.merge_pz_rel, p.merge_vertex_hz)
    diag.n_admitted = len(tracks)
    return tracks, diag


def _merge_duplicates(tracks, pz_rel, vertex_hz):
    kept = []
    for t in sorted(tracks, key=lambda t: (-t.n_points, t.rss)):
        dup = False
        for u in kept:
            pz_close = abs(t.pz - u.pz) <= pz_rel * max(abs(t.pz), abs(u.pz))
            fv_close = abs(t.delta0 - u.delta0) / H <= vertex_hz
            if pz_close and fv_close:
                dup = True
                break
        if not dup:
            kept.append(t)
    kept.sort(key=lambda t: -t.delta0)
    return kept


# ---------------------------------------------------------------------------
# full chain
# ---------------------------------------------------------------------------

def _cavity_mask(spectrum: BiasSpectrum, linewidths):
    """Exclusion band around the resonator line, from the averaged trace."""
    from . import resfit

    avg = ensemble_average(spectrum)
    try:
        fit = resfit.fit_simple(spectrum.freq, avg)
        fwhm = fit.f0 / fit.q_total
        return (fit.f0 - linewidths * fwhm, fit.f0 + linewidths * fwhm)
    except Exception:
        f0 = spectrum.freq[int(np.argmin(np.abs(avg)))]
        fwhm = (spectrum.freq[-1] - spectrum.freq[0]) / 10.0
        return (f0 - linewidths * fwhm, f0 + linewidths * fwhm)


def _propose_from_params(points, p: PipelineParams):
    slope_lo = 2.0 * debye_to_si(p.pz_min_debye) / H
    slope_hi = 2.0 * debye_to_si(p.pz_max_debye) / H
    return propose_hough(points, slope_lo, slope_hi,
                         n_slopes=p.hough_slopes,
                         max_sep_cells=p.hough_max_sep_cells,
                         z_min=p.hough_z_min,
                         max_candidates=p.hough_max_candidates)


def extract_tracks(spectrum: BiasSpectrum, params: PipelineParams | None = None,
                   seed=0):
    """Run the complete extraction chain on one spectrum."""
    p = params or PipelineParams()
    grid = contrast_enhance(spectrum)
    if p.use_derivative:
        grid = lowpass_derivative(grid, p.lowpass_cutoff)
    mask = _cavity_mask(spectrum, p.mask_linewidths)
    points = find_local_minima(grid, p.depth_factor, p.baseline_window,
                               exclude_freq=mask)
    candidates = _propose_from_params(points, p)
    tracks, diag = peel_and_iterate(points, candidates, p.budget, seed,
                                    params=p, mask_band=mask)
    diag.mask = mask
    return tracks, diag

"""Synthetic defect ensembles and forward-modelled bias sweeps.

An ensemble is sampled from a material hypothesis: asymmetry energies
uniform over +-delta_max, tunnelling energies log-uniform over a band,
and dipole projections from one of the supported family shapes. The
number of defects follows from the areal constant P0 through

    N = round(P0 * V * 2 delta_max * ln(delta0_max/delta0_min) * I_p)

with I_p = 1 for every family (densities are normalised on p_z >= 0;
the gaussian family is truncated and renormalised at sampling).

Random streams are derived from a single master seed with fixed
spawn keys, one independent stream per purpose and bias column, so
grids are reproducible regardless of evaluation order or backend.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from . import kernels
from .constants import H, HBAR
from .physics import ResonatorModel, SweepWindow, TwoLevelSystem, zero_point_field

__all__ = [
    "MaterialSpec",
    "NoiseConfig",
    "TelegraphSpec",
    "BiasSpectrum",
    "TimeSeries",
    "FAMILIES",
    "rng_for",
    "sample_ensemble",
    "sample_isotropic",
    "generate_spectrum",
    "ensemble_average",
    "render_time_series",
    "observable_vertex_mask",
    "ensemble_arrays",
    "to_db",
]

FAMILIES = ("gaussian", "truncated-normal", "isotropic-single-p0", "gamma", "flat")

DB_FLOOR = -140.0

# stream purposes for rng_for(seed, purpose, ...)
_STREAM_ENSEMBLE = 0
_STREAM_MEAS = 1
_STREAM_JITTER = 2
_STREAM_TIME = 3


def rng_for(seed, *key):
    """Independent generator for (seed, key...) with a stable derivation."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class MaterialSpec:
    """Material hypothesis for ensemble sampling.

    family : one of FAMILIES.
    params : family parameters in SI (C*m; gamma family beta in 1/(C*m)):
        gaussian / truncated-normal -> {"mu", "sigma"}
        isotropic-single-p0         -> {"p0"}
        gamma                       -> {"alpha", "beta"}  (shape, rate)
        flat                        -> {"p_max"}
    p0_density : areal defect constant (1/(J m^3)), or None with count.
    count : explicit defect number, or None with p0_density.
    delta_max : half-width of the uniform asymmetry range (J).
    delta0_band : (lo, hi) tunnelling-energy band (J), sampled log-uniform.
    gamma_tls : decoherence rate assigned to every sampled defect (rad/s).
    sigma_noise : frequency-jitter std assigned to every defect (rad/s).
    """

    family: str
    params: dict
    delta_max: float
    delta0_band: tuple
    p0_density: float | None = None
    count: int | None = None
    gamma_tls: float = 2.0 * np.pi * 0.5e6
    sigma_noise: float = 0.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}, expected one of {FAMILIES}")
        if (self.p0_density is None) == (self.count is None):
            raise ValueError("exactly one of p0_density and count must be set")
        if not self.delta_max > 0:
            raise ValueError("delta_max must be positive")
        lo, hi = self.delta0_band
        if not (0 < lo < hi):
            raise ValueError("delta0_band must satisfy 0 < lo < hi")
        if self.gamma_tls < 0 or self.sigma_noise < 0:
            raise ValueError("rates must be non-negative")
        _check_family_params(self.family, self.params)


def _check_family_params(family, params):
    need = {
        "gaussian": ("mu", "sigma"),
        "truncated-normal": ("mu", "sigma"),
        "isotropic-single-p0": ("p0",),
        "gamma": ("alpha", "beta"),
        "flat": ("p_max",),
    }[family]
    missing = [k for k in need if k not in params]
    if missing:
        raise ValueError(f"family {family!r} needs params {need}, missing {missing}")
    for k in need:
        if not params[k] > 0:
            if family in ("gaussian", "truncated-normal") and k == "mu":
                continue  # mean may sit at or below zero; truncation handles it
            raise ValueError(f"param {k} must be positive, got {params[k]}")


@dataclass(frozen=True)
class TelegraphSpec:
    switch_rate: float   # Hz, Poisson rate of jumps per defect
    jump_sigma: float    # rad/s, std of the post-jump frequency offset

    def __post_init__(self):
        if self.switch_rate < 0 or self.jump_sigma < 0:
            raise ValueError("telegraph rates must be non-negative")


@dataclass(frozen=True)
class NoiseConfig:
    """Measurement and defect-frequency noise for rendering.

    meas_sigma : additive complex Gaussian std per quadrature on S21.
    voltage_sigma : frequency-jitter broadening; None keeps each defect's
        own sigma_noise, a scalar applies to all, a dict maps defect
        index -> sigma (rad/s) with unlisted defects unbroadened.
    mc_samples : Monte Carlo draws per bias column when broadening.
    telegraph : switching model for time-series rendering.
    drift_sigma : slow random-walk rate, rad/s per sqrt(hour).
    """

    meas_sigma: float = 0.0
    voltage_sigma: float | dict | None = None
    mc_samples: int = 256
    telegraph: TelegraphSpec | None = None
    drift_sigma: float = 0.0

    def __post_init__(self):
        if self.meas_sigma < 0 or self.drift_sigma < 0:
            raise ValueError("noise scales must be non-negative")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")

    def sigma_for(self, tls_list):
        """Effective per-defect jitter std array (rad/s)."""
        n = len(tls_list)
        if self.voltage_sigma is None:
            return np.array([t.sigma_noise for t in tls_list], dtype=np.float64)
        if isinstance(self.voltage_sigma, dict):
            out = np.zeros(n)
            for i, s in self.voltage_sigma.items():
                out[int(i)] = float(s)
            return out
        return np.full(n, float(self.voltage_sigma))


@dataclass
class BiasSpectrum:
    """Rendered bias sweep: s21[freq, bias], axes in Hz and V/m."""

    freq: np.ndarray
    bias: np.ndarray
    s21: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.s21.shape != (self.freq.size, self.bias.size):
            raise ValueError("s21 must have shape (n_freq, n_bias)")


@dataclass
class TimeSeries:
    """Fixed-bias repeated sweeps: s21[frame, freq]."""

    times: np.ndarray        # s
    freq: np.ndarray         # Hz
    s21: np.ndarray          # (n_frames, n_freq)
    offsets: np.ndarray      # (n_frames, n_tls) rad/s, applied frequency offsets
    jump_counts: np.ndarray  # (n_tls,) telegraph switch totals


def to_db(s21, floor=DB_FLOOR):
    """20 log10 |S21| with a floor to keep the log finite."""
    mag = np.abs(s21)
    lowest = 10.0 ** (floor / 20.0)
    return 20.0 * np.log10(np.maximum(mag, lowest))


def sample_isotropic(p0, count, seed):
    """Dipole projections of randomly oriented dipoles of magnitude p0.

    p_z = p0 cos(theta) with cos(theta) uniform on [0, 1]; the resulting
    projection density is flat on [0, p0]. Returns (count,) C*m.
    """
    if not p0 > 0:
        raise ValueError("p0 must be positive")
    rng = rng_for(seed, _STREAM_ENSEMBLE)
    return p0 * rng.uniform(0.0, 1.0, size=int(count))


def _sample_pz(family, params, n, rng):
    if family in ("gaussian", "truncated-normal"):
        mu, sigma = params["mu"], params["sigma"]
        a = (0.0 - mu) / sigma
        return sps.truncnorm.rvs(a, np.inf, loc=mu, scale=sigma, size=n, random_state=rng)
    if family == "isotropic-single-p0":
        return params["p0"] * rng.uniform(0.0, 1.0, size=n)
    if family == "gamma":
        return rng.gamma(shape=params["alpha"], scale=1.0 / params["beta"], size=n)
    if family == "flat":
        return rng.uniform(0.0, params["p_max"], size=n)
    raise ValueError(f"unknown family {family!r}")


def ensemble_count(spec: MaterialSpec, res: ResonatorModel):
    """Defect number implied by the areal constant over the sampled box."""
    if spec.count is not None:
        return int(spec.count)
    lo, hi = spec.delta0_band
    n = spec.p0_density * res.volume * 2.0 * spec.delta_max * np.log(hi / lo)
    return int(round(n))


def sample_ensemble(spec: MaterialSpec, res: ResonatorModel, seed):
    """Draw an ensemble of defects for the given material hypothesis."""
    rng = rng_for(seed, _STREAM_ENSEMBLE)
    n = ensemble_count(spec, res)
    delta = rng.uniform(-spec.delta_max, spec.delta_max, size=n)
    lo, hi = spec.delta0_band
    delta0 = np.exp(rng.uniform(np.log(lo), np.log(hi), size=n))
    pz = _sample_pz(spec.family, spec.params, n, rng)
    return [
        TwoLevelSystem(delta=float(d), delta0=float(d0), pz=float(p),
                       gamma=spec.gamma_tls, sigma_noise=spec.sigma_noise)
        for d, d0, p in zip(delta, delta0, pz)
    ]


def ensemble_arrays(tls_list):
    """(delta, delta0, pz, gamma, sigma_noise) as float64 arrays."""
    n = len(tls_list)
    out = np.empty((5, n))
    for i, t in enumerate(tls_list):
        out[0, i] = t.delta
        out[1, i] = t.delta0
        out[2, i] = t.pz
        out[3, i] = t.gamma
        out[4, i] = t.sigma_noise
    return out[0], out[1], out[2], out[3], out[4]


def observable_vertex_mask(delta, delta0, pz, window: SweepWindow):
    """Defects whose energy minimum is observable inside the window.

    True where the vertex bias -delta/(2 pz) lies within the bias span
    and the vertex frequency delta0/h lies within the frequency span.
    This is the brute-force counting rule the extraction admission is
    checked against.
    """
    delta = np.asarray(delta, dtype=np.float64)
    delta0 = np.asarray(delta0, dtype=np.float64)
    pz = np.asarray(pz, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        vb = np.where(pz != 0.0, -delta / (2.0 * pz), np.inf)
    f_v = delta0 / H
    return ((vb >= window.bias_min) & (vb <= window.bias_max)
            & (f_v >= window.f_min) & (f_v <= window.f_max))


def generate_spectrum(tls_list, res: ResonatorModel, window: SweepWindow,
                      noise: NoiseConfig | None, seed, cutoff_kappa=10.0):
    """Render the bias sweep of an ensemble.

    Defects further than cutoff_kappa * (kappa_c + gamma_c) from the mode
    at a given column are dropped from that column's sum. Measurement
    noise and jitter draws use independent per-column streams derived
    from the master seed, so the grid is reproducible column by column.
    """
    if noise is None:
        noise = NoiseConfig()
    delta, delta0, pz, gam, _ = ensemble_arrays(tls_list)
    if delta.size and not np.all(gam > 0):
        raise ValueError("rendered defects need gamma > 0")
    omega = window.freq * 2.0 * np.pi
    bias = window.bias
    e_rms = zero_point_field(res)
    g_pref = 2.0 * e_rms / HBAR
    cutoff = cutoff_kappa * res.kappa_total
    sigma = noise.sigma_for(tls_list)

    if not np.any(sigma > 0):
        s21 = kernels.render_grid(omega, bias, res.omega_c, res.kappa_c, res.gamma_c,
                                  delta, delta0, pz, gam, g_pref, cutoff)
    else:
        nf, nb = omega.size, bias.size
        s21 = np.empty((nf, nb), dtype=np.complex128)
        for j in range(nb):
            dp = delta + 2.0 * pz * bias[j]
            energy = np.hypot(dp, delta0)
            w_i = energy / HBAR
            keep = np.abs(w_i - res.omega_c) <= cutoff
            g = (delta0[keep] / energy[keep]) * np.abs(pz[keep]) * g_pref
            sig_k = sigma[keep]
            if np.any(sig_k > 0):
                z = rng_for(seed, _STREAM_JITTER, j).standard_normal(
                    (int(noise.mc_samples), int(keep.sum())))
                s21[:, j] = kernels.mc_column(omega, res.omega_c, res.kappa_c,
                                              res.gamma_c, w_i[keep], g * g,
                                              gam[keep], sig_k, z)
            else:
                s21[:, j] = kernels.s21_column_numpy(omega, res.omega_c, res.kappa_c,
                                                     res.gamma_c, w_i[keep], g * g,
                                                     gam[keep])

    if noise.meas_sigma > 0:
        for j in range(bias.size):
            z = rng_for(seed, _STREAM_MEAS, j).standard_normal((omega.size, 2))
            s21[:, j] += noise.meas_sigma * (z[:, 0] + 1j * z[:, 1])

    meta = {
        "seed": int(seed),
        "f0_hz": res.f0,
        "kappa_c_rad_s": res.kappa_c,
        "gamma_c_rad_s": res.gamma_c,
        "volume_m3": res.volume,
        "thickness_m": res.thickness,
        "eps_r": res.eps_r,
        "n_tls": len(tls_list),
        "backend": kernels.backend_name(),
    }
    return BiasSpectrum(freq=window.freq, bias=bias, s21=s21, meta=meta)


def ensemble_average(spectrum: BiasSpectrum):
    """Complex mean trace over the bias axis, shape (n_freq,)."""
    return spectrum.s21.mean(axis=1)


def render_time_series(tls_list, res: ResonatorModel, window: SweepWindow,
                       noise: NoiseConfig, duration, n_frames, seed, bias=None):
    """Repeated sweeps at fixed bias under telegraph switching and drift.

    Telegraph: each defect accrues Poisson(switch_rate * dt) switches per
    frame interval; after at least one switch in an interval its offset
    is redrawn from N(0, jump_sigma^2). Drift: a per-defect random walk
    with std drift_sigma * sqrt(dt in hours) per step. With both rates
    zero every frame is identical.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    delta, delta0, pz, gam, _ = ensemble_arrays(tls_list)
    if delta.size and not np.all(gam > 0):
        raise ValueError("rendered defects need gamma > 0")
    if bias is None:
        bias = 0.5 * (window.bias_min + window.bias_max)
    omega = window.freq * 2.0 * np.pi
    e_rms = zero_point_field(res)
    g_pref = 2.0 * e_rms / HBAR

    times = np.linspace(0.0, duration, int(n_frames))
    dt = times[1] - times[0] if n_frames > 1 else duration
    rng = rng_for(seed, _STREAM_TIME)
    nt = delta.size

    dp = delta + 2.0 * pz * bias
    energy = np.hypot(dp, delta0)
    w_base = energy / HBAR
    g = (delta0 / energy) * np.abs(pz) * g_pref
    g2 = g * g

    tele_offset = np.zeros(nt)
    drift_offset = np.zeros(nt)
    jump_counts = np.zeros(nt, dtype=np.int64)
    drift_step = noise.drift_sigma * np.sqrt(dt / 3600.0)

    offsets = np.zeros((int(n_frames), nt))
    s21 = np.empty((int(n_frames), omega.size), dtype=np.complex128)
    for fidx in range(int(n_frames)):
        if fidx > 0:
            if noise.telegraph is not None and noise.telegraph.switch_rate > 0:
                n_jumps = rng.poisson(noise.telegraph.switch_rate * dt, size=nt)
                jump_counts += n_jumps
                switched = n_jumps > 0
                if np.any(switched):
                    tele_offset[switched] = noise.telegraph.jump_sigma * \
                        rng.standard_normal(int(switched.sum()))
            if drift_step > 0:
                drift_offset += drift_step * rng.standard_normal(nt)
        offsets[fidx] = tele_offset + drift_offset
        s21[fidx] = kernels.s21_column_numpy(omega, res.omega_c, res.kappa_c,
                                             res.gamma_c, w_base + offsets[fidx],
                                             g2, gam)
        if noise.meas_sigma > 0:
            z = rng.standard_normal((omega.size, 2))
            s21[fidx] += noise.meas_sigma * (z[:, 0] + 1j * z[:, 1])
    return TimeSeries(times=times, freq=window.freq, s21=s21,
                      offsets=offsets, jump_counts=jump_counts)

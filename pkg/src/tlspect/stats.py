"""Dipole statistics: measured-to-material inversion, family fits, loss.

A bias sweep only sees a defect when its vertex falls inside the swept
window, and that window is proportional to the defect's own dipole
moment: the accessible asymmetry range is 2 p times the applied field
span. Measured dipole samples are therefore biased by a factor p
relative to the material distribution, and every estimator here that
reports a material quantity carries a 1/p reweighting.

Conventions: dipole moments enter and leave in debye unless a name says
SI; densities are SI throughout, with D(p) normalised per volume, per
asymmetry energy, per unit ln(tunnelling energy) and per dipole, so
integrating D over p recovers the material constant P0 in 1/(J m^3).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, optimize, special, stats as sstats

from .constants import DEBYE, EPS0, HBAR, K_B, debye_to_si

__all__ = [
    "DipoleHistogram",
    "DistributionFit",
    "measured_to_material",
    "material_to_measured",
    "calculated_mean_std",
    "material_mean_stderr",
    "mle_truncated_normal",
    "mle_modified_gaussian",
    "mle_gamma",
    "modified_gaussian_pdf",
    "modified_gaussian_sample",
    "truncated_normal_pdf",
    "loss_from_dipoles",
    "material_constant",
    "loss_integral_general",
    "saturated_linewidth_integral",
    "missing_tls_sensitivity",
    "subset_summary",
    "isotropic_density",
]


def _geometry_field_span(geometry):
    """Swept field span in V/m from a geometry dict.

    Accepts either field_span directly or delta_v_bias (volts across the
    gap) with thickness.
    """
    if "field_span" in geometry:
        return float(geometry["field_span"])
    return float(geometry["delta_v_bias"]) / float(geometry["thickness"])


def _band_factor(geometry):
    """ln of the observed frequency band, ~ delta_f0/f0 for narrow bands."""
    f0 = float(geometry["f0"])
    df0 = float(geometry["delta_f0"])
    return np.log((f0 + df0 / 2.0) / (f0 - df0 / 2.0))


@dataclass
class DipoleHistogram:
    """Histogram over dipole moment, with the geometry that observed it.

    kind "measured" holds counts per debye of detected tracks; kind
    "material" holds the density D(p) in 1/(J m^3 C m). edges are bin
    edges in debye either way.
    """

    edges: np.ndarray
    values: np.ndarray
    kind: str
    geometry: dict = field(default_factory=dict)

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.kind not in ("measured", "material"):
            raise ValueError("kind must be 'measured' or 'material'")
        if self.edges.ndim != 1 or self.edges.size < 2:
            raise ValueError("edges must be a 1-d array of at least 2 edges")
        if np.any(np.diff(self.edges) <= 0):
            raise ValueError("edges must be strictly increasing")
        if self.values.shape != (self.edges.size - 1,):
            raise ValueError("values must have one entry per bin")
        if np.any(self.edges < 0):
            raise ValueError("dipole bins must be non-negative")

    @property
    def centers(self):
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    @property
    def widths(self):
        return np.diff(self.edges)

    @classmethod
    def from_samples(cls, pz_debye, edges, geometry=None):
        """Measured histogram, normalised to counts per debye."""
        counts, _ = np.histogram(np.asarray(pz_debye, dtype=np.float64),
                                 bins=np.asarray(edges, dtype=np.float64))
        widths = np.diff(np.asarray(edges, dtype=np.float64))
        return cls(edges=edges, values=counts / widths, kind="measured",
                   geometry=dict(geometry or {}))


def measured_to_material(hist: DipoleHistogram, geometry=None):
    """Invert a measured histogram into the material density D(p).

    Each bin is divided by its observation window: the accessible
    asymmetry range 2 p times the field span, the sensing volume, and
    the log of the observed frequency band.
    """
    if hist.kind != "measured":
        raise ValueError("expected a measured histogram")
    geo = dict(hist.geometry)
    geo.update(geometry or {})
    span = _geometry_field_span(geo)
    volume = float(geo["volume"])
    band = _band_factor(geo)
    p_si = debye_to_si(hist.centers)
    counts_per_si = hist.values / DEBYE   # counts per debye -> per C m
    density = counts_per_si / (volume * 2.0 * p_si * span * band)
    return DipoleHistogram(edges=hist.edges, values=density, kind="material",
                           geometry=geo)


def material_to_measured(hist: DipoleHistogram, geometry=None):
    """Exact inverse of measured_to_material."""
    if hist.kind != "material":
        raise ValueError("expected a material histogram")
    geo = dict(hist.geometry)
    geo.update(geometry or {})
    span = _geometry_field_span(geo)
    volume = float(geo["volume"])
    band = _band_factor(geo)
    p_si = debye_to_si(hist.centers)
    counts_per_si = hist.values * (volume * 2.0 * p_si * span * band)
    return DipoleHistogram(edges=hist.edges, values=counts_per_si * DEBYE,
                           kind="measured", geometry=geo)


def calculated_mean_std(pz):
    """Material mean and spread from a measured dipole sample.

    The measured sample over-represents dipole p by a factor p, so
    material moments are importance weighted by 1/p:

        mean = N / sum(1/p)          (first weighted moment)
        var  = sum(p)/sum(1/p) - mean^2

    Works in whatever unit the sample carries. Raises on non-positive
    entries, which have no 1/p weight.
    """
    p = np.asarray(pz, dtype=np.float64)
    if p.size == 0:
        raise ValueError("empty dipole sample")
    if np.any(p <= 0):
        raise ValueError("dipole sample must be strictly positive")
    inv_sum = np.sum(1.0 / p)
    mean = p.size / inv_sum
    var = np.sum(p) / inv_sum - mean * mean
    return float(mean), float(np.sqrt(max(var, 0.0)))


def material_mean_stderr(pz):
    """Delta-method standard error of the reweighted material mean."""
    p = np.asarray(pz, dtype=np.float64)
    if np.any(p <= 0) or p.size < 2:
        raise ValueError("need at least two positive dipoles")
    inv = 1.0 / p
    m1 = inv.mean()
    return float(inv.std(ddof=1) / (np.sqrt(p.size) * m1 * m1))


# ---------------------------------------------------------------------------
# distribution families and maximum likelihood
# ---------------------------------------------------------------------------

def truncated_normal_pdf(x, mu, sigma):
    """Normal restricted to x > 0, renormalised."""
    x = np.asarray(x, dtype=np.float64)
    z = sstats.norm.pdf(x, mu, sigma) / sstats.norm.cdf(mu / sigma)
    return np.where(x > 0, z, 0.0)


def _modified_gaussian_norm(mu, sigma):
    # integral of x exp(-(x-mu)^2 / 2 sigma^2) over x > 0
    return (sigma * sigma * np.exp(-mu * mu / (2.0 * sigma * sigma))
            + mu * sigma * np.sqrt(np.pi / 2.0)
            * (1.0 + special.erf(mu / (sigma * np.sqrt(2.0)))))


def modified_gaussian_pdf(x, mu, sigma):
    """Gaussian tilted by one power of x, the measured image of a
    gaussian material distribution; defined for x > 0."""
    x = np.asarray(x, dtype=np.float64)
    c1 = _modified_gaussian_norm(mu, sigma)
    z = x * np.exp(-((x - mu) ** 2) / (2.0 * sigma * sigma)) / c1
    return np.where(x > 0, z, 0.0)


def modified_gaussian_sample(mu, sigma, size, rng):
    """Draw from the tilted gaussian by numeric inverse transform."""
    hi = mu + 10.0 * sigma
    grid = np.linspace(1e-12, max(hi, 10.0 * sigma), 20001)
    pdf = modified_gaussian_pdf(grid, mu, sigma)
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (pdf[1:] + pdf[:-1])
                                           * np.diff(grid))])
    cdf /= cdf[-1]
    u = rng.uniform(0.0, 1.0, size)
    return np.interp(u, cdf, grid)


@dataclass(frozen=True)
class DistributionFit:
    """Maximum-likelihood fit of one dipole family."""

    family: str
    params: dict
    stderr: dict
    loglik: float
    n: int
    converged: bool


def _hessian_stderr(nll, x, names):
    """Central-difference Hessian of the negative log likelihood."""
    k = x.size
    h = np.maximum(1e-5 * np.abs(x), 1e-7)
    hess = np.empty((k, k))
    for i in range(k):
        for j in range(i, k):
            xpp = x.copy(); xpp[i] += h[i]; xpp[j] += h[j]
            xpm = x.copy(); xpm[i] += h[i]; xpm[j] -= h[j]
            xmp = x.copy(); xmp[i] -= h[i]; xmp[j] += h[j]
            xmm = x.copy(); xmm[i] -= h[i]; xmm[j] -= h[j]
            hess[i, j] = hess[j, i] = (
                nll(xpp) - nll(xpm) - nll(xmp) + nll(xmm)) / (4 * h[i] * h[j])
    try:
        cov = np.linalg.inv(hess)
        se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    except np.linalg.LinAlgError:
        se = np.full(k, np.nan)
    return dict(zip(names, se))


def _fit_family(samples, family, nll_of, starts, transform):
    x = np.asarray(samples, dtype=np.float64)
    best = None
    for x0 in starts:
        res = optimize.minimize(nll_of, np.asarray(x0, dtype=np.float64),
                                method="L-BFGS-B", tol=1e-9)
        if not np.all(np.isfinite(res.x)) or not np.isfinite(res.fun):
            continue
        if best is None or res.fun < best.fun:
            best = res
    if best is None:
        raise RuntimeError(f"{family} fit failed from every start")
    params, scale = transform(best.x)
    raw_se = _hessian_stderr(nll_of, best.x, list(params))
    stderr = {k: float(raw_se[k] * scale[k]) for k in params}
    return DistributionFit(family=family, params=params, stderr=stderr,
                           loglik=-float(best.fun), n=x.size,
                           converged=bool(best.success))


def _positive_sample(pz):
    x = np.asarray(pz, dtype=np.float64)
    if x.size < 3:
        raise ValueError("need at least 3 samples")
    if np.any(x <= 0):
        raise ValueError("samples must be positive")
    return x


def mle_truncated_normal(pz):
    """Fit the positive-truncated normal by maximum likelihood.

    Parameters are the untruncated (mu, sigma); internally sigma runs
    on a log scale to stay positive.
    """
    x = _positive_sample(pz)

    def nll(t):
        mu, lns = t
        sigma = np.exp(lns)
        z = (x - mu) / sigma
        logpdf = (-0.5 * z * z - np.log(sigma) - 0.5 * np.log(2 * np.pi)
                  - sstats.norm.logcdf(mu / sigma))
        return -np.sum(logpdf)

    m, s = x.mean(), max(x.std(), 1e-3 * abs(x.mean()))
    starts = [(m, np.log(s)), (0.5 * m, np.log(2 * s)), (1.5 * m, np.log(0.5 * s))]

    def transform(t):
        mu, lns = t
        sigma = np.exp(lns)
        return {"mu": float(mu), "sigma": float(sigma)}, \
               {"mu": 1.0, "sigma": sigma}

    return _fit_family(x, "truncated-normal", nll, starts, transform)


def mle_modified_gaussian(pz):
    """Fit the x-tilted gaussian (measured image of a gaussian material)."""
    x = _positive_sample(pz)
    logx = np.log(x)

    def nll(t):
        mu, lns = t
        sigma = np.exp(lns)
        c1 = _modified_gaussian_norm(mu, sigma)
        if not np.isfinite(c1) or c1 <= 0:
            return np.inf
        logpdf = logx - ((x - mu) ** 2) / (2.0 * sigma * sigma) - np.log(c1)
        return -np.sum(logpdf)

    m, s = x.mean(), max(x.std(), 1e-3 * abs(x.mean()))
    starts = [(m, np.log(s)), (m - s, np.log(s)), (0.1 * m, np.log(2 * s))]

    def transform(t):
        mu, lns = t
        sigma = np.exp(lns)
        return {"mu": float(mu), "sigma": float(sigma)}, \
               {"mu": 1.0, "sigma": sigma}

    return _fit_family(x, "modified-gaussian", nll, starts, transform)


def mle_gamma(pz):
    """Fit the gamma family (shape alpha, rate beta)."""
    x = _positive_sample(pz)
    logx_sum = np.sum(np.log(x))
    x_sum = np.sum(x)
    n = x.size

    def nll(t):
        lna, lnb = t
        a, b = np.exp(lna), np.exp(lnb)
        return -(n * (a * np.log(b) - special.gammaln(a))
                 + (a - 1.0) * logx_sum - b * x_sum)

    m, v = x.mean(), max(x.var(), 1e-12)
    a0 = max(m * m / v, 1e-3)
    b0 = max(m / v, 1e-6)
    starts = [(np.log(a0), np.log(b0)),
              (np.log(2 * a0), np.log(2 * b0)),
              (np.log(0.5 * a0), np.log(0.5 * b0))]

    def transform(t):
        a, b = np.exp(t)
        return {"alpha": float(a), "beta": float(b)}, \
               {"alpha": a, "beta": b}

    return _fit_family(x, "gamma", nll, starts, transform)


def isotropic_density(p0):
    """Material dipole pdf for fixed magnitude p0 and random orientation.

    The projection on the field axis is uniform, height 1/p0 on [0, p0].
    """
    if p0 <= 0:
        raise ValueError("p0 must be positive")

    def pdf(x):
        x = np.asarray(x, dtype=np.float64)
        return np.where((x >= 0) & (x <= p0), 1.0 / p0, 0.0)

    return pdf


# ---------------------------------------------------------------------------
# loss estimators
# ---------------------------------------------------------------------------

def loss_from_dipoles(pz_debye, geometry, eps_r=10.0):
    """Low-power loss tangent implied by the detected dipoles.

    Each track contributes p^2 weighted by its inverse observation
    window; the resonant-absorption integral supplies a factor pi.
    """
    p = debye_to_si(_positive_sample(pz_debye))
    span = _geometry_field_span(geometry)
    volume = float(geometry["volume"])
    band = _band_factor(geometry)
    return float(np.pi * np.sum(p) / (2.0 * eps_r * EPS0 * volume * span * band))


def material_constant(pz_debye, geometry):
    """Material constant P0 in 1/(J m^3) from the detected dipoles."""
    p = debye_to_si(_positive_sample(pz_debye))
    span = _geometry_field_span(geometry)
    volume = float(geometry["volume"])
    band = _band_factor(geometry)
    return float(np.sum(1.0 / p) / (2.0 * volume * span * band))


def saturated_linewidth_integral(temperature, t1, t2, rabi, omega0):
    """Frequency integral of one defect's absorption line.

    Integrand: tanh(hbar w / 2 kB T) times a Lorentzian of half-width
    sqrt(1 + rabi^2 T1 T2)/T2 centred on omega0. Approaches pi times
    tanh(hbar omega0 / 2 kB T) at low drive, shrinking with saturation.
    """
    if min(temperature, t1, t2) <= 0:
        raise ValueError("temperature, t1, t2 must be positive")
    sat = 1.0 + rabi * rabi * t1 * t2
    hw = np.sqrt(sat) / t2

    def integrand(w):
        lor = (1.0 / t2) / (sat / (t2 * t2) + (w - omega0) ** 2)
        return np.tanh(HBAR * w / (2.0 * K_B * temperature)) * lor

    lo, _ = integrate.quad(integrand, 0.0, omega0, limit=200)
    hi, _ = integrate.quad(integrand, omega0, omega0 + 400.0 * hw, limit=200)
    return float(lo + hi)


def loss_integral_general(density_fn, p_max_debye, eps_r=10.0,
                          temperature=0.02, t1=1e-6, t2=1e-6, rabi=0.0,
                          omega0=None, f0=5e9):
    """Loss tangent for an arbitrary material density, finite T and drive.

    density_fn takes dipole in C m and returns the material density in
    SI. The dipole integral is weighted by p^2 and by the saturated
    line integral, which collapses to pi in the low-power, low-T limit.
    """
    w0 = 2.0 * np.pi * f0 if omega0 is None else omega0
    line = saturated_linewidth_integral(temperature, t1, t2, rabi, w0)
    p_max = debye_to_si(p_max_debye)

    def integrand(p):
        return density_fn(p) * p * p

    val, _ = integrate.quad(integrand, 0.0, p_max, limit=200)
    return float(line * val / (eps_r * EPS0))


def missing_tls_sensitivity(pz_debye, boost_factors, percentile=10.0):
    """How the material mean shifts if small dipoles were undercounted.

    Tracks below the given percentile are duplicated boost times and the
    reweighted material mean is recomputed. Returns the array of means,
    one per boost factor; by construction it is non-increasing.
    """
    p = _positive_sample(pz_debye)
    cut = np.percentile(p, percentile)
    small = p[p <= cut]
    rest = p[p > cut]
    means = []
    for m in boost_factors:
        if m < 1:
            raise ValueError("boost factors must be >= 1")
        reps = int(round(m))
        boosted = np.concatenate([rest] + [small] * reps)
        means.append(calculated_mean_std(boosted)[0])
    return np.array(means)


def subset_summary(pz_a, pz_b):
    """Welch comparison of two dipole samples (e.g. two cooldowns)."""
    a = _positive_sample(pz_a)
    b = _positive_sample(pz_b)
    t, pval = sstats.ttest_ind(a, b, equal_var=False)
    return {
        "n_a": a.size, "n_b": b.size,
        "mean_a": float(a.mean()), "mean_b": float(b.mean()),
        "material_mean_a": calculated_mean_std(a)[0],
        "material_mean_b": calculated_mean_std(b)[0],
        "t": float(t), "p_value": float(pval),
    }

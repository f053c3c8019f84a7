"""Core physics of bias-tuned defects coupled to a microwave resonator.

A tunnelling defect with asymmetry energy ``delta`` and tunnelling
energy ``delta0`` exposed to a dc field ``E_ex`` along its dipole axis
has transition energy

    E = sqrt((delta + 2 pz E_ex)^2 + delta0^2),

a hyperbola in the applied field whose vertex sits at
``E_ex = -delta / (2 pz)``. Its transverse coupling to the resonator
mode is ``g = (delta0 / E) * (2 pz E_rms / hbar)`` with ``E_rms`` the
zero-point field of the mode volume. Everything here is SI: energies in
J, rates in rad/s, fields in V/m, dipole moments in C*m.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .constants import EPS0, H, HBAR, TWO_PI

__all__ = [
    "TwoLevelSystem",
    "ResonatorModel",
    "SweepWindow",
    "LossIntegrandParams",
    "tls_energy",
    "vertex_bias",
    "coupling_g",
    "zero_point_field",
    "cooperativity",
    "s21_multi_tls",
    "s21_noise_broadened",
    "tls_frequency_noise_sensitivity",
]


@dataclass(frozen=True)
class TwoLevelSystem:
    """One defect. delta, delta0 in J; pz in C*m; rates in rad/s.

    sigma_noise is the std of the defect's frequency jitter used by the
    Monte Carlo broadening model. gamma may be zero for defects that are
    only sampled, never rendered; transmission evaluation rejects an
    exact pole (gamma == 0 with the drive exactly on the defect).
    """

    delta: float
    delta0: float
    pz: float
    gamma: float
    sigma_noise: float = 0.0

    def __post_init__(self):
        if not self.delta0 > 0:
            raise ValueError(f"delta0 must be positive, got {self.delta0}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be non-negative, got {self.gamma}")
        if self.sigma_noise < 0:
            raise ValueError(f"sigma_noise must be non-negative, got {self.sigma_noise}")

    def energy(self, e_ex):
        return tls_energy(self.delta, self.delta0, self.pz, e_ex)

    def omega(self, e_ex):
        """Transition angular frequency at bias e_ex (rad/s)."""
        return self.energy(e_ex) / HBAR

    @property
    def vertex(self):
        """Bias field at the energy minimum (V/m); requires pz != 0."""
        return vertex_bias(self.delta, self.pz)


@dataclass(frozen=True)
class ResonatorModel:
    """Notch-coupled mode. f0 in Hz; kappa_c, gamma_c in rad/s.

    volume is the participating host volume (m^3) and thickness the film
    thickness (m) separating the bias electrodes.
    """

    f0: float
    kappa_c: float
    gamma_c: float
    volume: float
    thickness: float
    eps_r: float = 10.0

    def __post_init__(self):
        for name in ("f0", "kappa_c", "gamma_c", "volume", "thickness", "eps_r"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")

    @property
    def omega_c(self):
        return TWO_PI * self.f0

    @property
    def kappa_total(self):
        return self.kappa_c + self.gamma_c

    @property
    def q_e(self):
        """External quality factor, derived from kappa_c."""
        return self.omega_c / self.kappa_c

    @property
    def q_i(self):
        """Internal quality factor, derived from gamma_c."""
        return self.omega_c / self.gamma_c

    @property
    def q_total(self):
        return self.omega_c / self.kappa_total


@dataclass(frozen=True)
class SweepWindow:
    """Rectangular measurement window: frequency span x bias span."""

    f_center: float       # Hz
    f_span: float         # Hz
    bias_min: float       # V/m
    bias_max: float       # V/m
    n_freq: int
    n_bias: int

    def __post_init__(self):
        if not self.f_span > 0:
            raise ValueError("f_span must be positive")
        if not self.bias_max > self.bias_min:
            raise ValueError("bias_max must exceed bias_min")
        if self.n_freq < 2 or self.n_bias < 2:
            raise ValueError("need at least 2 samples per axis")

    @property
    def f_min(self):
        return self.f_center - 0.5 * self.f_span

    @property
    def f_max(self):
        return self.f_center + 0.5 * self.f_span

    @property
    def freq(self):
        return np.linspace(self.f_min, self.f_max, self.n_freq)

    @property
    def bias(self):
        return np.linspace(self.bias_min, self.bias_max, self.n_bias)

    @property
    def bias_span(self):
        return self.bias_max - self.bias_min


@dataclass(frozen=True)
class LossIntegrandParams:
    """Drive and bath parameters for the general loss integral."""

    temperature: float    # K
    t1: float             # s
    t2: float             # s
    rabi: float           # rad/s

    def __post_init__(self):
        if self.temperature < 0 or self.t1 <= 0 or self.t2 <= 0 or self.rabi < 0:
            raise ValueError("need temperature >= 0, t1 > 0, t2 > 0, rabi >= 0")

    @property
    def saturation(self):
        """Dimensionless drive saturation Omega^2 T1 T2."""
        return self.rabi**2 * self.t1 * self.t2


def tls_energy(delta, delta0, pz, e_ex):
    """Transition energy E = sqrt((delta + 2 pz e_ex)^2 + delta0^2), J."""
    return np.hypot(np.asarray(delta) + 2.0 * np.asarray(pz) * np.asarray(e_ex), delta0)


def vertex_bias(delta, pz):
    """Bias field of the energy minimum, -delta / (2 pz)."""
    pz = np.asarray(pz)
    if np.any(pz == 0):
        raise ValueError("vertex undefined for pz == 0")
    return -np.asarray(delta) / (2.0 * pz)


def coupling_g(tls: TwoLevelSystem, e_ex, e_rms):
    """Transverse coupling g = (delta0/E) * (2 |pz| E_rms / hbar), rad/s."""
    energy = tls.energy(e_ex)
    return (tls.delta0 / energy) * (2.0 * abs(tls.pz) * e_rms / HBAR)


def zero_point_field(res: ResonatorModel):
    """RMS zero-point field E_rms = sqrt(h f0 / (8 eps_r eps0 V)), V/m."""
    return np.sqrt(H * res.f0 / (8.0 * res.eps_r * EPS0 * res.volume))


def cooperativity(g, gamma_tls, kappa_total):
    """g^2 / (gamma_tls * kappa_total); rates must be positive."""
    if gamma_tls <= 0 or kappa_total <= 0:
        raise ValueError("cooperativity needs positive gamma_tls and kappa_total")
    return g * g / (gamma_tls * kappa_total)


def _column_params(res, tls_list, e_ex):
    """Per-defect (omega_i, g_i^2, gamma_i) at one bias, as arrays."""
    e_rms = zero_point_field(res)
    n = len(tls_list)
    w = np.empty(n)
    g2 = np.empty(n)
    gam = np.empty(n)
    for i, t in enumerate(tls_list):
        energy = t.energy(e_ex)
        w[i] = energy / HBAR
        g = (t.delta0 / energy) * (2.0 * abs(t.pz) * e_rms / HBAR)
        g2[i] = g * g
        gam[i] = t.gamma
    return w, g2, gam


def _check_poles(omega, w_tls, gam):
    zero = gam == 0.0
    if np.any(zero) and np.any(np.isin(w_tls[zero], omega)):
        raise ValueError("gamma == 0 defect evaluated exactly on resonance")


def s21_multi_tls(omega, res: ResonatorModel, tls_list, e_ex):
    """Complex transmission at one bias for an array of drive frequencies.

    Parameters
    ----------
    omega : (nf,) array, rad/s
    tls_list : sequence of TwoLevelSystem
    e_ex : bias field, V/m
    """
    omega = np.asarray(omega, dtype=np.float64)
    w, g2, gam = _column_params(res, tls_list, e_ex)
    _check_poles(omega, w, gam)
    return kernels.s21_column_numpy(omega, res.omega_c, res.kappa_c, res.gamma_c,
                                    w, g2, gam)


def s21_noise_broadened(omega, res: ResonatorModel, tls_list, e_ex,
                        n_samples, seed):
    """Monte Carlo average of s21_multi_tls over defect frequency jitter.

    Each defect's frequency is shifted by sigma_noise * z per draw with z
    standard normal. With every sigma_noise zero the average is skipped
    and the unbroadened transmission returned unchanged.
    """
    omega = np.asarray(omega, dtype=np.float64)
    sigma = np.array([t.sigma_noise for t in tls_list], dtype=np.float64)
    if sigma.size == 0 or not np.any(sigma > 0):
        return s21_multi_tls(omega, res, tls_list, e_ex)
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    w, g2, gam = _column_params(res, tls_list, e_ex)
    _check_poles(omega, w, gam)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    normals = rng.standard_normal((int(n_samples), sigma.size))
    return kernels.mc_column(omega, res.omega_c, res.kappa_c, res.gamma_c,
                             w, g2, gam, sigma, normals)


def tls_frequency_noise_sensitivity(tls: TwoLevelSystem, e_ex, delta_v, l0):
    """Frequency shift from a small bias-voltage excursion, rad/s.

    d_omega = (delta'/E) * 2 pz delta_v / (l0 hbar), with delta' the
    biased asymmetry delta + 2 pz e_ex. Near the vertex delta' ~ 0 and
    the defect is first-order insensitive to voltage noise.
    """
    dp = tls.delta + 2.0 * tls.pz * e_ex
    energy = tls.energy(e_ex)
    return (dp / energy) * 2.0 * tls.pz * delta_v / (l0 * HBAR)

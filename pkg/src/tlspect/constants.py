"""Physical constants and unit conversions.

All internal computation in this package is strictly SI: energies in
joules, angular rates in rad/s, fields in V/m, dipole moments in C*m.
Non-SI units (debye, GHz, kV/m) appear only at I/O boundaries, through
the conversion helpers below.
"""

import scipy.constants as _sc

# CODATA values, via scipy. Quoted to >= 7 significant digits.
H = _sc.h                    # 6.626070e-34 J*s
HBAR = _sc.hbar              # 1.054572e-34 J*s
EPS0 = _sc.epsilon_0         # 8.854188e-12 F/m
K_B = _sc.k                  # 1.380649e-23 J/K

# 1 debye in C*m.
DEBYE = 3.335641e-30

TWO_PI = 2.0 * _sc.pi


def debye_to_si(p_debye):
    """Dipole moment, debye -> C*m."""
    return p_debye * DEBYE


def si_to_debye(p_si):
    """Dipole moment, C*m -> debye."""
    return p_si / DEBYE


def ghz_to_joule(f_ghz):
    """Transition frequency in GHz -> energy in J (E = h f)."""
    return f_ghz * 1e9 * H


def joule_to_ghz(e_joule):
    """Energy in J -> transition frequency in GHz."""
    return e_joule / (1e9 * H)


def mhz_rate_to_angular(f_mhz):
    """Linear-frequency rate in MHz (kappa/2pi style) -> rad/s."""
    return TWO_PI * f_mhz * 1e6


def angular_to_mhz_rate(omega):
    """rad/s -> linear-frequency rate in MHz."""
    return omega / (TWO_PI * 1e6)


def kvpm_to_vpm(e_kvpm):
    """Electric field, kV/m -> V/m."""
    return e_kvpm * 1e3


def vpm_to_kvpm(e_vpm):
    """Electric field, V/m -> kV/m."""
    return e_vpm / 1e3

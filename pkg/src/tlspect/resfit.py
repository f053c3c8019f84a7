"""Resonator line fits: notch model, slowly varying background, low-Q tails.

The transmission of a notch-coupled mode near resonance is modelled as

    S21(f) = B(f) * [ 1 - (Q/Q_e) e^{i phi} / (1 + 2 i Q (f - f0) / f0) ]

with B a complex prefactor, either constant (fit_simple) or carrying a
linear complex slope (fit_with_background):

    B(f) = amp * e^{i theta} * (1 + (a + i b)(f - f0)).

Internal quality factors are always derived, 1/Q_i = 1/Q - 1/Q_e, never
fitted directly. Quoted quality factors refer to angular rates through
Q_e = omega0/kappa_c and Q_i = omega0/gamma_c.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

__all__ = [
    "ResonatorFitResult",
    "FitError",
    "fit_simple",
    "fit_with_background",
    "low_q_background",
]


class FitError(RuntimeError):
    """Raised when the optimiser fails to converge on a resonator line."""


@dataclass
class ResonatorFitResult:
    """Fitted notch parameters.

    covariance rows follow the parameter vector
    [f0, ln Q, ln Q_e, phi, amp, theta] plus [a, b] for the background
    model. residual is the rms of |model - data|.
    """

    f0: float
    q_total: float
    q_i: float
    q_e: float
    phi: float
    background: dict
    residual: float
    covariance: np.ndarray
    notes: list = field(default_factory=list)


def _notch(freq, f0, q, qe, phi):
    return 1.0 - (q / qe) * np.exp(1j * phi) / (1.0 + 2j * q * (freq - f0) / f0)


def _model(freq, f0, q, qe, phi, amp, theta, a=0.0, b=0.0):
    bg = amp * np.exp(1j * theta) * (1.0 + (a + 1j * b) * (freq - f0))
    return bg * _notch(freq, f0, q, qe, phi)


def _initial_guess(freq, s21):
    edge = max(3, freq.size // 20)
    c_edge = 0.5 * (s21[:edge].mean() + s21[-edge:].mean())
    amp0 = abs(c_edge)
    if amp0 == 0:
        raise FitError("data has zero off-resonant level")
    theta0 = float(np.angle(c_edge))
    z = np.abs(s21) / amp0
    k0 = int(np.argmin(z))
    f00 = float(freq[k0])
    depth = max(1.0 - z[k0], 1e-3)
    half = 1.0 - 0.5 * depth
    below = np.flatnonzero(z < half)
    if below.size >= 2:
        width = float(freq[below[-1]] - freq[below[0]])
    else:
        width = 0.0
    span = float(freq[-1] - freq[0])
    if width <= 0:
        width = span / 10.0
    q0 = max(f00 / width, 10.0)
    qe0 = q0 / min(depth, 0.999)
    return f00, q0, qe0, 0.0, amp0, theta0


def _run_fit(freq, s21, with_background, warm=None):
    freq = np.asarray(freq, dtype=np.float64)
    s21 = np.asarray(s21, dtype=np.complex128)
    if freq.size != s21.size or freq.size < 8:
        raise FitError("need matching freq/s21 arrays with at least 8 points")
    span = float(freq[-1] - freq[0])
    f_ref = float(freq[0])
    if warm is None:
        f00, q0, qe0, phi0, amp0, theta0 = _initial_guess(freq, s21)
    else:
        f00, q0, qe0, phi0, amp0, theta0 = warm

    # f0 enters as an offset in span units so every parameter is O(1);
    # mixing Hz-scale and unit-scale entries defeats the step-size test.
    x0 = [(f00 - f_ref) / span, np.log(q0), np.log(qe0), phi0, amp0, theta0]
    lower = [-1.0, np.log(1.0), np.log(1.0), -np.pi, 1e-12, -2 * np.pi]
    upper = [2.0, np.log(1e10), np.log(1e10), np.pi, np.inf, 2 * np.pi]
    if with_background:
        x0 += [0.0, 0.0]
        lower += [-np.inf, -np.inf]
        upper += [np.inf, np.inf]

    def unpack(x):
        u, lnq, lnqe, phi, amp, theta = x[:6]
        a, b = (x[6] / span, x[7] / span) if with_background else (0.0, 0.0)
        return f_ref + u * span, np.exp(lnq), np.exp(lnqe), phi, amp, theta, a, b

    def resid(x):
        m = _model(freq, *unpack(x))
        d = m - s21
        return np.concatenate([d.real, d.imag])

    res = least_squares(resid, x0, bounds=(lower, upper), method="trf",
                        ftol=1e-13, xtol=1e-13, gtol=1e-13, max_nfev=4000)
    if res.status < 0 or not np.all(np.isfinite(res.x)):
        raise FitError(f"resonator fit did not converge: {res.message}")

    f0, q, qe, phi, amp, theta, a, b = unpack(res.x)
    notes = []
    fwhm = f0 / q
    if span < fwhm:
        msg = "frequency span below one linewidth; fit is ill conditioned"
        warnings.warn(msg)
        notes.append(msg)
    inv_qi = 1.0 / q - 1.0 / qe
    q_i = 1.0 / inv_qi if inv_qi != 0 else np.inf
    if q_i < 0:
        notes.append("fitted Q_e below Q_total; derived Q_i is negative")

    m = freq.size
    n = res.x.size
    dof = max(2 * m - n, 1)
    s2 = 2.0 * res.cost / dof
    jtj = res.jac.T @ res.jac
    cov = s2 * np.linalg.pinv(jtj)
    # undo the internal rescalings: f0 offset in span units, log Qs,
    # background slopes carried as per-span quantities
    scale = np.ones(n)
    scale[0] = span
    scale[1] = q
    scale[2] = qe
    if with_background:
        scale[6] = 1.0 / span
        scale[7] = 1.0 / span
    cov = cov * scale[:, None] * scale[None, :]

    model = _model(freq, f0, q, qe, phi, amp, theta, a, b)
    rms = float(np.sqrt(np.mean(np.abs(model - s21) ** 2)))
    return ResonatorFitResult(
        f0=float(f0), q_total=float(q), q_i=float(q_i), q_e=float(qe),
        phi=float(phi),
        background={"C": amp * np.exp(1j * theta), "a": float(a), "b": float(b),
                    "theta": float(theta)},
        residual=rms, covariance=cov, notes=notes)


def fit_simple(freq, s21):
    """Notch fit with a constant complex prefactor."""
    return _run_fit(freq, s21, with_background=False)


def fit_with_background(freq, s21):
    """Notch fit with a linear complex background slope.

    The extra slope parameters start at zero from the simple model's
    optimum, so this fit's residual never exceeds the simple fit's.
    """
    base = _run_fit(freq, s21, with_background=False)
    theta = base.background["theta"]
    warm = (base.f0, base.q_total, base.q_e, base.phi,
            abs(base.background["C"]), theta)
    return _run_fit(freq, s21, with_background=True, warm=warm)


def low_q_background(freq, modes):
    """Product of far-detuned low-Q mode tails.

    modes : sequence of (f_k, q_k, q_ek). Returns the complex product

        prod_k [ 1 - (q_k/q_ek) / (1 - 2 i q_k (f - f_k) / f_k) ]

    which is the slowly varying background a distant overcoupled mode
    imprints on a measurement window; over a narrow window it is well
    approximated by the linear slope of fit_with_background.
    """
    freq = np.asarray(freq, dtype=np.float64)
    out = np.ones(freq.size, dtype=np.complex128)
    for f_k, q_k, q_ek in modes:
        if f_k <= 0 or q_k <= 0 or q_ek <= 0:
            raise ValueError("mode parameters must be positive")
        out *= 1.0 - (q_k / q_ek) / (1.0 - 2j * q_k * (freq - f_k) / f_k)
    return out

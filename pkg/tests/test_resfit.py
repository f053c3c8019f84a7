"""Resonator line fitting against independently constructed data."""

import numpy as np
import pytest

from tlspect.physics import ResonatorModel, s21_multi_tls
from tlspect.resfit import FitError, fit_simple, fit_with_background, low_q_background


def notch_data(freq, f0, q, qe, phi=0.0, c=1.0 + 0j, a=0.0, b=0.0):
    """Hand-written model the fits are checked against."""
    line = 1 - (q / qe) * np.exp(1j * phi) / (1 + 2j * q * (freq - f0) / f0)
    return c * (1 + (a + 1j * b) * (freq - f0)) * line


F0 = 4.974e9
QI = 680.0
QE = 590.0
QT = 1.0 / (1.0 / QI + 1.0 / QE)
FREQ = np.linspace(F0 - 40e6, F0 + 40e6, 801)


class TestFitSimple:
    def test_noiseless_recovery(self):
        data = notch_data(FREQ, F0, QT, QE, phi=0.0, c=0.8 * np.exp(0.3j))
        fit = fit_simple(FREQ, data)
        assert fit.f0 == pytest.approx(F0, rel=1e-7)
        assert fit.q_total == pytest.approx(QT, rel=1e-3)
        assert fit.q_e == pytest.approx(QE, rel=1e-3)
        assert fit.q_i == pytest.approx(QI, rel=5e-3)
        assert fit.residual < 1e-8

    def test_q_relation_holds_by_construction(self):
        data = notch_data(FREQ, F0, QT, QE)
        fit = fit_simple(FREQ, data)
        assert 1.0 / fit.q_total == pytest.approx(1.0 / fit.q_i + 1.0 / fit.q_e,
                                                  rel=1e-10)

    def test_prefactor_invariance(self):
        data = notch_data(FREQ, F0, QT, QE)
        fit1 = fit_simple(FREQ, data)
        fit2 = fit_simple(FREQ, 2.5 * np.exp(0.7j) * data)
        assert fit2.q_total == pytest.approx(fit1.q_total, rel=1e-6)
        assert fit2.q_i == pytest.approx(fit1.q_i, rel=1e-5)
        assert abs(fit2.background["C"]) == pytest.approx(
            2.5 * abs(fit1.background["C"]), rel=1e-6)

    def test_noisy_recovery_within_tolerance(self):
        rng = np.random.default_rng(17)
        data = notch_data(FREQ, F0, QT, QE)
        data = data + 0.005 * (rng.standard_normal(FREQ.size)
                               + 1j * rng.standard_normal(FREQ.size))
        fit = fit_simple(FREQ, data)
        assert fit.q_i == pytest.approx(QI, rel=0.05)
        assert fit.q_e == pytest.approx(QE, rel=0.05)

    def test_matches_physics_transmission_model(self):
        # dual route: the forward model in angular rates must map onto
        # Q_e = w0/kappa_c, Q_i = w0/gamma_c
        res = ResonatorModel(f0=4.975e9, kappa_c=2 * np.pi * 3e6,
                             gamma_c=2 * np.pi * 1.2e6, volume=1.11e-17,
                             thickness=20e-9)
        freq = np.linspace(res.f0 - 30e6, res.f0 + 30e6, 601)
        data = s21_multi_tls(2 * np.pi * freq, res, [], 0.0)
        fit = fit_simple(freq, data)
        assert fit.f0 == pytest.approx(res.f0, rel=1e-7)
        assert fit.q_e == pytest.approx(res.q_e, rel=1e-3)
        assert fit.q_i == pytest.approx(res.q_i, rel=1e-2)
        assert abs(fit.phi) < 1e-3

    def test_phi_recovered(self):
        data = notch_data(FREQ, F0, QT, QE, phi=0.35)
        fit = fit_simple(FREQ, data)
        assert fit.phi == pytest.approx(0.35, abs=5e-3)

    def test_covariance_shape_and_positivity(self):
        rng = np.random.default_rng(3)
        data = notch_data(FREQ, F0, QT, QE) + 0.002 * rng.standard_normal(FREQ.size)
        fit = fit_simple(FREQ, data)
        assert fit.covariance.shape == (6, 6)
        assert np.all(np.diag(fit.covariance) >= 0)

    def test_narrow_span_warns(self):
        fwhm = F0 / QT
        freq = np.linspace(F0 - 0.2 * fwhm, F0 + 0.2 * fwhm, 101)
        data = notch_data(freq, F0, QT, QE)
        with pytest.warns(UserWarning):
            fit = fit_simple(freq, data)
        assert fit.notes

    def test_too_few_points_rejected(self):
        with pytest.raises(FitError):
            fit_simple(FREQ[:4], notch_data(FREQ[:4], F0, QT, QE))


class TestFitWithBackground:
    def test_recovers_injected_slope(self):
        span = FREQ[-1] - FREQ[0]
        a = 0.1 / span
        b = -0.05 / span
        data = notch_data(FREQ, F0, QT, QE, c=0.9, a=a, b=b)
        fit = fit_with_background(FREQ, data)
        assert fit.q_i == pytest.approx(QI, rel=0.02)
        assert fit.background["a"] == pytest.approx(a, rel=0.05)
        assert fit.background["b"] == pytest.approx(b, rel=0.05)

    def test_simple_fit_biased_by_background_but_full_model_is_not(self):
        span = FREQ[-1] - FREQ[0]
        data = notch_data(FREQ, F0, QT, QE, a=0.3 / span, b=0.2 / span)
        biased = fit_simple(FREQ, data)
        full = fit_with_background(FREQ, data)
        assert abs(full.q_i - QI) < abs(biased.q_i - QI) + 1e-9
        assert full.q_i == pytest.approx(QI, rel=0.02)

    def test_nested_model_never_fits_worse(self):
        rng = np.random.default_rng(29)
        data = notch_data(FREQ, F0, QT, QE)
        data = data + 0.004 * (rng.standard_normal(FREQ.size)
                               + 1j * rng.standard_normal(FREQ.size))
        simple = fit_simple(FREQ, data)
        full = fit_with_background(FREQ, data)
        assert full.residual <= simple.residual * (1 + 1e-9)


class TestLowQBackground:
    def test_single_mode_hand_value(self):
        # at f = f_k the tail is exactly 1 - q/qe
        out = low_q_background(np.array([4.7e9]), [(4.7e9, 10.0, 12.0)])
        assert out[0] == pytest.approx(1 - 10.0 / 12.0, rel=1e-12)

    def test_product_of_two_modes(self):
        freq = np.array([4.9e9])
        one = low_q_background(freq, [(4.7e9, 10.0, 12.0)])
        two = low_q_background(freq, [(5.3e9, 8.0, 9.0)])
        both = low_q_background(freq, [(4.7e9, 10.0, 12.0), (5.3e9, 8.0, 9.0)])
        assert both[0] == pytest.approx(one[0] * two[0], rel=1e-12)

    def test_far_mode_locally_linear(self):
        # a q ~ 10 mode 300 MHz away varies linearly across a 30 MHz window
        freq = np.linspace(4.985e9, 5.015e9, 301)
        vals = low_q_background(freq, [(4.7e9, 10.0, 12.0)])
        coef_r = np.polyfit(freq, vals.real, 1)
        coef_i = np.polyfit(freq, vals.imag, 1)
        fitted = np.polyval(coef_r, freq) + 1j * np.polyval(coef_i, freq)
        rel_rms = np.sqrt(np.mean(np.abs(vals - fitted) ** 2)) / np.mean(np.abs(vals))
        assert rel_rms < 0.01

    def test_rejects_bad_modes(self):
        with pytest.raises(ValueError):
            low_q_background(np.array([5e9]), [(4.7e9, -1.0, 12.0)])

    def test_background_fit_absorbs_low_q_tail(self):
        # imprint a genuine far-mode tail; the linear-slope model should
        # still recover the narrow mode's internal loss
        tail = low_q_background(FREQ, [(4.6e9, 8.0, 9.5)])
        data = tail * notch_data(FREQ, F0, QT, QE)
        fit = fit_with_background(FREQ, data)
        assert fit.q_i == pytest.approx(QI, rel=0.05)

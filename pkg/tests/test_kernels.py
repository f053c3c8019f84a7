"""Kernel backends agree with each other and with handwritten sums."""

import numpy as np
import pytest

from tlspect import kernels
from tlspect.constants import HBAR


def naive_grid(omega, bias, omega_c, kappa_c, gamma_c,
               delta, delta0, pz, gamma_tls, g_pref, cutoff):
    """Straight-line python re-derivation of the grid sum."""
    out = np.empty((omega.size, bias.size), dtype=complex)
    for j, b in enumerate(bias):
        for k, w in enumerate(omega):
            acc = 0j
            for t in range(delta.size):
                dp = delta[t] + 2 * pz[t] * b
                energy = np.sqrt(dp * dp + delta0[t] ** 2)
                w_i = energy / HBAR
                if abs(w_i - omega_c) > cutoff:
                    continue
                g = (delta0[t] / energy) * pz[t] * g_pref
                acc += g * g / (gamma_tls[t] / 2 + 1j * (w - w_i))
            out[k, j] = 1 - (kappa_c / 2) / (
                (kappa_c + gamma_c) / 2 + 1j * (w - omega_c) + acc)
    return out


@pytest.fixture
def small_problem():
    rng = np.random.default_rng(42)
    omega_c = 2 * np.pi * 4.975e9
    kappa_c = 2 * np.pi * 2e6
    gamma_c = 2 * np.pi * 1.5e6
    omega = omega_c + 2 * np.pi * np.linspace(-2e7, 2e7, 23)
    bias = np.linspace(-9e4, 9e4, 7)
    nt = 5
    delta = rng.uniform(-2e-24, 2e-24, nt)
    delta0 = 6.62607015e-34 * rng.uniform(4.95e9, 5.0e9, nt)
    pz = rng.uniform(2e-30, 2e-29, nt)
    gamma_tls = np.full(nt, 2 * np.pi * 1e5)
    g_pref = 2 * 20.5 / HBAR
    cutoff = 10 * (kappa_c + gamma_c)
    return (omega, bias, omega_c, kappa_c, gamma_c,
            delta, delta0, pz, gamma_tls, g_pref, cutoff)


def test_numpy_grid_matches_naive(small_problem):
    got = kernels.render_grid_numpy(*small_problem)
    want = naive_grid(*small_problem)
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_dispatch_matches_numpy(small_problem):
    got = kernels.render_grid(*small_problem)
    want = kernels.render_grid_numpy(*small_problem)
    np.testing.assert_allclose(got, want, rtol=1e-9)


@pytest.mark.skipif(not kernels.numba_available, reason="numba not installed")
def test_numba_grid_matches_numpy(small_problem):
    got = kernels.render_grid_numba(*small_problem)
    want = kernels.render_grid_numpy(*small_problem)
    np.testing.assert_allclose(got, want, rtol=1e-9)


def test_cutoff_drops_far_defect():
    omega_c = 2 * np.pi * 5e9
    kappa_c = gamma_c = 2 * np.pi * 2e6
    omega = omega_c + 2 * np.pi * np.linspace(-1e7, 1e7, 11)
    bias = np.array([0.0])
    # one defect on the mode, one parked 500 linewidths away
    h = 6.62607015e-34
    delta = np.array([0.0, 0.0])
    delta0 = np.array([h * 5.0e9, h * 7.0e9])
    pz = np.full(2, 8.7e-30)
    gam = np.full(2, 2 * np.pi * 1e5)
    cutoff = 10 * (kappa_c + gamma_c)
    both = kernels.render_grid_numpy(omega, bias, omega_c, kappa_c, gamma_c,
                                     delta, delta0, pz, gam, 400.0, cutoff)
    near = kernels.render_grid_numpy(omega, bias, omega_c, kappa_c, gamma_c,
                                     delta[:1], delta0[:1], pz[:1], gam[:1],
                                     400.0, cutoff)
    np.testing.assert_array_equal(both, near)


def test_empty_ensemble_gives_bare_resonator():
    omega_c = 2 * np.pi * 5e9
    kappa_c = gamma_c = 2 * np.pi * 2e6
    omega = np.array([omega_c])
    empty = np.empty(0)
    out = kernels.render_grid(omega, np.array([0.0]), omega_c, kappa_c, gamma_c,
                              empty, empty, empty, empty, 1.0, 1e12)
    assert out[0, 0] == pytest.approx(0.5 + 0j, rel=1e-12)


class TestMcColumn:
    def _problem(self):
        omega_c = 2 * np.pi * 5e9
        kappa_c = gamma_c = 2 * np.pi * 2e6
        omega = omega_c + 2 * np.pi * np.linspace(-1e7, 1e7, 31)
        w_tls = np.array([omega_c + 2 * np.pi * 5e6, omega_c - 2 * np.pi * 3e6])
        g2 = np.array([(2 * np.pi * 0.5e6) ** 2, (2 * np.pi * 0.7e6) ** 2])
        gam = np.full(2, 2 * np.pi * 0.3e6)
        sigma = np.array([2 * np.pi * 1e6, 2 * np.pi * 0.5e6])
        normals = np.random.default_rng(5).standard_normal((300, 2))
        return omega, omega_c, kappa_c, gamma_c, w_tls, g2, gam, sigma, normals

    def test_numpy_matches_naive_average(self):
        omega, omega_c, kappa_c, gamma_c, w_tls, g2, gam, sigma, normals = self._problem()
        got = kernels.mc_column_numpy(omega, omega_c, kappa_c, gamma_c,
                                      w_tls, g2, gam, sigma, normals)
        acc = np.zeros(omega.size, dtype=complex)
        for s in range(normals.shape[0]):
            shifted = w_tls + sigma * normals[s]
            term = (g2 / (gam / 2 + 1j * (omega[:, None] - shifted[None, :]))).sum(1)
            acc += 1 - (kappa_c / 2) / ((kappa_c + gamma_c) / 2
                                        + 1j * (omega - omega_c) + term)
        np.testing.assert_allclose(got, acc / normals.shape[0], rtol=1e-10)

    @pytest.mark.skipif(not kernels.numba_available, reason="numba not installed")
    def test_numba_matches_numpy(self):
        omega, omega_c, kappa_c, gamma_c, w_tls, g2, gam, sigma, normals = self._problem()
        a = kernels.mc_column_numba(omega, omega_c, kappa_c, gamma_c,
                                    w_tls, g2, gam, sigma, normals)
        b = kernels.mc_column_numpy(omega, omega_c, kappa_c, gamma_c,
                                    w_tls, g2, gam, sigma, normals)
        np.testing.assert_allclose(a, b, rtol=1e-9)


def test_backend_flag_reporting():
    assert kernels.backend_name() in ("numba", "numpy")
    assert kernels.numba_enabled() == (kernels.backend_name() == "numba")

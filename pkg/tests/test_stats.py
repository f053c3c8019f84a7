"""Statistics module: inversion, reweighted moments, family fits, loss."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats as sstats

from tlspect.constants import DEBYE, EPS0, debye_to_si
from tlspect import stats as tstats
from tlspect.stats import (
    DipoleHistogram,
    calculated_mean_std,
    isotropic_density,
    loss_from_dipoles,
    loss_integral_general,
    material_constant,
    material_mean_stderr,
    material_to_measured,
    measured_to_material,
    missing_tls_sensitivity,
    mle_gamma,
    mle_modified_gaussian,
    mle_truncated_normal,
    modified_gaussian_pdf,
    modified_gaussian_sample,
    saturated_linewidth_integral,
    subset_summary,
    truncated_normal_pdf,
)

GEO = dict(volume=1.11e-17, thickness=20e-9, delta_v_bias=1.8e5 * 20e-9,
           f0=4.975e9, delta_f0=5.0e7)


class TestReweightedMoments:
    def test_hand_oracle(self):
        # p = 1,2,4: sum(1/p) = 7/4, so mean = 12/7 and
        # E[p^2] = sum(p)/sum(1/p) = 4, var = 4 - (12/7)^2 = 52/49
        mean, std = calculated_mean_std([1.0, 2.0, 4.0])
        assert mean == pytest.approx(12.0 / 7.0, rel=1e-12)
        assert std == pytest.approx(np.sqrt(52.0) / 7.0, rel=1e-12)

    def test_constant_sample_has_zero_spread(self):
        mean, std = calculated_mean_std([2.6, 2.6, 2.6])
        assert mean == pytest.approx(2.6)
        assert std == pytest.approx(0.0, abs=1e-7)

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            calculated_mean_std([1.0, 0.0, 2.0])
        with pytest.raises(ValueError):
            calculated_mean_std([])

    @given(st.lists(st.floats(0.1, 50.0), min_size=2, max_size=60))
    @settings(max_examples=120, deadline=None)
    def test_material_mean_below_sample_mean(self, values):
        # the 1/p reweighting can only pull the mean down
        p = np.asarray(values)
        mean, _ = calculated_mean_std(p)
        assert mean <= p.mean() + 1e-9

    @given(st.lists(st.floats(0.1, 50.0), min_size=2, max_size=40),
           st.floats(0.1, 10.0))
    @settings(max_examples=80, deadline=None)
    def test_scale_equivariance(self, values, scale):
        p = np.asarray(values)
        m1, s1 = calculated_mean_std(p)
        m2, s2 = calculated_mean_std(scale * p)
        assert m2 == pytest.approx(scale * m1, rel=1e-9)
        # near-identical samples leave std at the cancellation floor,
        # sqrt(eps) * mean, so the abs tolerance sits just above it
        assert s2 == pytest.approx(scale * s1, rel=1e-6, abs=2e-6 * m1)

    def test_stderr_tracks_bootstrap(self):
        rng = np.random.default_rng(42)
        p = rng.uniform(1.5, 4.5, 200)
        se = material_mean_stderr(p)
        boots = [calculated_mean_std(rng.choice(p, p.size))[0]
                 for _ in range(400)]
        assert se == pytest.approx(np.std(boots), rel=0.25)


class TestHistogramInversion:
    def test_expected_count_from_known_density(self):
        # seed a flat material density D0 over one bin and check that
        # material_to_measured predicts D0 * V * 2p * span * ln-band counts
        edges = np.array([2.5, 3.5])
        d0 = 1.0e44
        mat = DipoleHistogram(edges=edges, values=np.array([d0]),
                              kind="material", geometry=GEO)
        meas = material_to_measured(mat)
        span = GEO["delta_v_bias"] / GEO["thickness"]
        band = np.log((GEO["f0"] + GEO["delta_f0"] / 2)
                      / (GEO["f0"] - GEO["delta_f0"] / 2))
        p_si = debye_to_si(3.0)
        expected_per_debye = d0 * GEO["volume"] * 2 * p_si * span * band * DEBYE
        assert meas.values[0] == pytest.approx(expected_per_debye, rel=1e-12)

    def test_round_trip_identity(self):
        rng = np.random.default_rng(3)
        h = DipoleHistogram.from_samples(rng.uniform(1, 5, 500),
                                         np.linspace(0.5, 6.0, 14), GEO)
        back = material_to_measured(measured_to_material(h))
        np.testing.assert_allclose(back.values, h.values, rtol=1e-12)

    def test_from_samples_normalisation(self):
        # values are counts per debye, so sum(values * widths) = N
        h = DipoleHistogram.from_samples([1.1, 2.2, 2.3, 4.0],
                                         np.array([1.0, 2.0, 3.0, 5.0]), GEO)
        assert np.sum(h.values * h.widths) == pytest.approx(4.0)

    def test_kind_checked(self):
        h = DipoleHistogram.from_samples([2.0], np.array([1.0, 3.0]), GEO)
        with pytest.raises(ValueError):
            material_to_measured(h)
        with pytest.raises(ValueError):
            measured_to_material(measured_to_material(h))

    def test_validation(self):
        with pytest.raises(ValueError):
            DipoleHistogram(edges=[1.0, 1.0, 2.0], values=[1.0, 1.0],
                            kind="measured")
        with pytest.raises(ValueError):
            DipoleHistogram(edges=[1.0, 2.0], values=[1.0, 2.0],
                            kind="measured")
        with pytest.raises(ValueError):
            DipoleHistogram(edges=[1.0, 2.0], values=[1.0], kind="banana")


class TestDistributionFamilies:
    def test_truncated_normal_matches_scipy(self):
        mu, sigma = 2.78, 0.65
        x = np.array([0.5, 1.7, 2.78, 3.9])
        ours = truncated_normal_pdf(x, mu, sigma)
        ref = sstats.truncnorm.pdf(x, -mu / sigma, np.inf, loc=mu, scale=sigma)
        np.testing.assert_allclose(ours, ref, rtol=1e-12)

    @pytest.mark.parametrize("mu,sigma", [(2.7, 0.5), (0.4, 1.2), (-0.6, 0.9)])
    def test_pdfs_normalised(self, mu, sigma):
        hi = abs(mu) + 14 * sigma
        for pdf in (truncated_normal_pdf, modified_gaussian_pdf):
            val, _ = integrate.quad(lambda t: pdf(t, mu, sigma), 0, hi)
            assert val == pytest.approx(1.0, abs=1e-7)

    def test_modified_gaussian_norm_against_quad(self):
        mu, sigma = 1.9, 0.7
        num, _ = integrate.quad(
            lambda t: t * np.exp(-((t - mu) ** 2) / (2 * sigma ** 2)), 0, 30)
        assert tstats._modified_gaussian_norm(mu, sigma) == pytest.approx(
            num, rel=1e-10)

    def test_sampler_matches_quad_moments(self):
        rng = np.random.default_rng(11)
        mu, sigma = 2.0, 0.8
        xs = modified_gaussian_sample(mu, sigma, 40000, rng)
        m1, _ = integrate.quad(
            lambda t: t * modified_gaussian_pdf(t, mu, sigma), 0, 14)
        m2, _ = integrate.quad(
            lambda t: t * t * modified_gaussian_pdf(t, mu, sigma), 0, 14)
        assert xs.mean() == pytest.approx(m1, rel=0.01)
        assert np.mean(xs ** 2) == pytest.approx(m2, rel=0.02)


class TestMaximumLikelihood:
    def test_gamma_against_scipy_fit(self):
        rng = np.random.default_rng(5)
        x = rng.gamma(4.0, 1.0 / 1.5, 3000)
        fit = mle_gamma(x)
        a_ref, _, scale_ref = sstats.gamma.fit(x, floc=0)
        assert fit.params["alpha"] == pytest.approx(a_ref, rel=1e-3)
        assert fit.params["beta"] == pytest.approx(1.0 / scale_ref, rel=1e-3)
        assert fit.converged

    def test_truncated_normal_recovery(self):
        rng = np.random.default_rng(17)
        mu, sigma = 2.78, 0.65
        draw = rng.normal(mu, sigma, 30000)
        x = draw[draw > 0][:8000]
        fit = mle_truncated_normal(x)
        assert fit.params["mu"] == pytest.approx(mu, abs=4 * fit.stderr["mu"])
        assert fit.params["sigma"] == pytest.approx(
            sigma, abs=4 * fit.stderr["sigma"])
        assert fit.n == 8000

    def test_modified_gaussian_recovery(self):
        rng = np.random.default_rng(23)
        mu, sigma = 2.3, 0.9
        x = modified_gaussian_sample(mu, sigma, 6000, rng)
        fit = mle_modified_gaussian(x)
        assert fit.params["mu"] == pytest.approx(mu, abs=4 * fit.stderr["mu"])
        assert fit.params["sigma"] == pytest.approx(
            sigma, abs=4 * fit.stderr["sigma"])

    def test_loglik_is_sum_of_logpdf(self):
        rng = np.random.default_rng(29)
        x = rng.gamma(3.0, 0.8, 400)
        fit = mle_gamma(x)
        manual = np.sum(sstats.gamma.logpdf(
            x, fit.params["alpha"], scale=1.0 / fit.params["beta"]))
        assert fit.loglik == pytest.approx(manual, rel=1e-9)

    def test_family_selection_prefers_generator(self):
        # data drawn from the tilted gaussian should out-score gamma
        rng = np.random.default_rng(31)
        x = modified_gaussian_sample(2.6, 0.5, 4000, rng)
        l_mod = mle_modified_gaussian(x).loglik
        l_gam = mle_gamma(x).loglik
        assert l_mod > l_gam

    def test_input_validation(self):
        for fn in (mle_gamma, mle_truncated_normal, mle_modified_gaussian):
            with pytest.raises(ValueError):
                fn([1.0, 2.0])
            with pytest.raises(ValueError):
                fn([1.0, -2.0, 3.0])


class TestLossEstimators:
    def test_loss_matches_binned_density_route(self):
        # independent route: histogram -> material density -> pi/eps * sum D p^2 dp
        rng = np.random.default_rng(13)
        p = rng.uniform(2.0, 4.0, 400)
        tan_direct = loss_from_dipoles(p, GEO, eps_r=10.0)
        h = DipoleHistogram.from_samples(p, np.linspace(1.9, 4.1, 2000), GEO)
        mat = measured_to_material(h)
        p_si = debye_to_si(mat.centers)
        dp_si = debye_to_si(mat.widths)
        tan_binned = np.pi * np.sum(mat.values * p_si ** 2 * dp_si) / (10.0 * EPS0)
        assert tan_direct == pytest.approx(tan_binned, rel=1e-4)

    def test_material_constant_matches_binned_density_route(self):
        rng = np.random.default_rng(19)
        p = rng.uniform(1.5, 5.0, 300)
        p0_direct = material_constant(p, GEO)
        h = DipoleHistogram.from_samples(p, np.linspace(1.4, 5.1, 3000), GEO)
        mat = measured_to_material(h)
        p0_binned = np.sum(mat.values * debye_to_si(mat.widths))
        assert p0_direct == pytest.approx(p0_binned, rel=1e-4)

    def test_material_constant_recovers_seeded_ensemble(self):
        # draw defects from a known P0 over a wide band, observe the
        # subwindow, and invert the count back to P0
        from tlspect.synth import rng_for
        rng = rng_for(404, 0)
        p0_true = 0.4e44
        vol = GEO["volume"]
        span = 1.8e5
        f_lo, f_hi = 4.95e9, 5.0e9
        band_lo, band_hi = 4.5e9, 5.5e9
        p_fixed = debye_to_si(3.0)
        delta_max = p_fixed * span  # covers 2p * span/2
        n_total = int(round(p0_true * vol * 2 * delta_max
                            * np.log(band_hi / band_lo)))
        delta = rng.uniform(-delta_max, delta_max, n_total)
        # tunnelling energies drawn log-uniform, tracked here in Hz
        f_min = band_lo * (band_hi / band_lo) ** rng.uniform(0, 1, n_total)
        vertex = -delta / (2 * p_fixed)
        seen = (np.abs(vertex) <= span / 2) & (f_min >= f_lo) & (f_min <= f_hi)
        n_seen = int(np.count_nonzero(seen))
        geo = dict(volume=vol, field_span=span, f0=(f_lo + f_hi) / 2,
                   delta_f0=f_hi - f_lo)
        p0_est = material_constant(np.full(n_seen, 3.0), geo)
        assert p0_est == pytest.approx(p0_true, rel=4.0 / np.sqrt(n_seen))

    def test_loss_integral_low_power_low_t_limit(self):
        # isotropic density: tan d -> pi P0 p0^2 / (3 eps) within 1%
        p0_si = debye_to_si(3.0)
        dens = isotropic_density(p0_si)
        pconst = 1.0e44
        tan = loss_integral_general(lambda p: pconst * dens(p), 3.0,
                                    eps_r=10.0, temperature=0.02, rabi=0.0)
        exact = np.pi * pconst * p0_si ** 2 / (3.0 * 10.0 * EPS0)
        assert tan == pytest.approx(exact, rel=0.01)

    def test_line_integral_saturation_scaling(self):
        w0 = 2 * np.pi * 5e9
        base = saturated_linewidth_integral(0.02, 1e-6, 1e-6, 0.0, w0)
        sat = saturated_linewidth_integral(0.02, 1e-6, 1e-6, 3e6, w0)
        assert base == pytest.approx(np.pi, rel=0.01)
        assert sat / base == pytest.approx(1.0 / np.sqrt(1 + (3e6) ** 2 * 1e-12),
                                           rel=0.02)

    def test_line_integral_monotone_in_drive(self):
        w0 = 2 * np.pi * 5e9
        vals = [saturated_linewidth_integral(0.02, 1e-6, 1e-6, r, w0)
                for r in (0.0, 1e5, 1e6, 1e7)]
        assert np.all(np.diff(vals) < 0)

    def test_line_integral_temperature_suppression(self):
        w0 = 2 * np.pi * 5e9
        cold = saturated_linewidth_integral(0.02, 1e-6, 1e-6, 0.0, w0)
        hot = saturated_linewidth_integral(1.0, 1e-6, 1e-6, 0.0, w0)
        hbar_w = 1.054571817e-34 * w0
        kb = 1.380649e-23
        assert hot / cold == pytest.approx(
            np.tanh(hbar_w / (2 * kb * 1.0)) / np.tanh(hbar_w / (2 * kb * 0.02)),
            rel=0.01)


class TestSensitivityAndSubsets:
    def test_missing_tls_hand_oracle(self):
        # p = 1,2,3,4 with 25th percentile cut 1.75: small = {1}
        means = missing_tls_sensitivity([1.0, 2.0, 3.0, 4.0], [1, 2],
                                        percentile=25.0)
        m1 = 4.0 / (1.0 + 0.5 + 1.0 / 3.0 + 0.25)
        m2 = 5.0 / (2.0 + 0.5 + 1.0 / 3.0 + 0.25)
        assert means[0] == pytest.approx(m1, rel=1e-12)
        assert means[1] == pytest.approx(m2, rel=1e-12)

    def test_missing_tls_monotone(self):
        rng = np.random.default_rng(37)
        p = rng.uniform(0.5, 5.0, 300)
        means = missing_tls_sensitivity(p, [1, 2, 5, 10, 20])
        assert np.all(np.diff(means) <= 1e-12)

    def test_missing_tls_rejects_shrink(self):
        with pytest.raises(ValueError):
            missing_tls_sensitivity([1.0, 2.0, 3.0], [0.5])

    def test_subset_summary_null(self):
        rng = np.random.default_rng(41)
        a = rng.uniform(2, 4, 500)
        b = rng.uniform(2, 4, 500)
        out = subset_summary(a, b)
        assert out["p_value"] > 0.01
        assert out["n_a"] == 500

    def test_subset_summary_detects_shift(self):
        rng = np.random.default_rng(43)
        a = rng.normal(2.6, 0.3, 200) + 1
        b = rng.normal(3.1, 0.3, 200) + 1
        out = subset_summary(a, b)
        assert out["p_value"] < 1e-6
        assert out["mean_b"] > out["mean_a"]


class TestIsotropicDensity:
    def test_height_and_support(self):
        pdf = isotropic_density(2.5)
        assert pdf(1.0) == pytest.approx(0.4)
        assert pdf(2.4999) == pytest.approx(0.4)
        assert pdf(2.6) == 0.0
        assert pdf(-0.1) == 0.0

    def test_normalised(self):
        pdf = isotropic_density(3.3)
        val, _ = integrate.quad(pdf, -1, 5)
        assert val == pytest.approx(1.0, rel=1e-9)

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            isotropic_density(0.0)

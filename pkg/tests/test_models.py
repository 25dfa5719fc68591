import numpy as np
import pytest
from scipy import stats

from factorlab import autodiff as ad, models
from factorlab.models import ModelError, ModelSpec


def params_for(name, n_x, seed=0, x_scale=1.0):
    spec = models.spec_from_name(name, n_x)
    p = models.init_params(spec, np.random.default_rng(seed), x_scale=x_scale)
    return spec, p


class TestNaming:
    def test_parse_plain(self):
        assert models.parse_model_name("APT(1)") == ("APT", 1)
        assert models.parse_model_name("L-SVFM(2)") == ("L-SVFM", 2)

    def test_parse_monotone_variants(self):
        assert models.parse_model_name("M-NNFM(1)") == ("M-NNFM1", 1)
        assert models.parse_model_name("M-NNFM(2)") == ("M-NNFM2", 2)

    def test_roundtrip_display_name(self):
        for name in ("APT(2)", "SR-SVFM(1)", "NNFM(2)", "M-NNFM(1)"):
            spec = models.spec_from_name(name, 5)
            assert spec.name == name

    def test_bad_names(self):
        for bad in ("APT", "APT(x)", "FOO(1)", "APT[1]"):
            with pytest.raises(ModelError):
                models.parse_model_name(bad)


class TestSpecValidation:
    def test_factor_count_bounds(self):
        with pytest.raises(ModelError):
            ModelSpec("APT", 3, 10)
        with pytest.raises(ModelError):
            ModelSpec("APT", 0, 10)

    def test_needs_fewer_factors_than_assets(self):
        with pytest.raises(ModelError):
            ModelSpec("APT", 2, 2)
        ModelSpec("APT", 2, 3)

    def test_hybrids_are_two_factor(self):
        with pytest.raises(ModelError):
            ModelSpec("APT-L", 1, 5)
        with pytest.raises(ModelError):
            ModelSpec("M-NNFM1", 2, 5)
        with pytest.raises(ModelError):
            ModelSpec("M-NNFM2", 1, 5)

    def test_memory_width_default(self):
        assert ModelSpec("NNFM", 2, 5).n_h == 6
        assert ModelSpec("APT", 1, 5).n_h == 0


class TestTransform:
    def test_positivity_constraints(self):
        for name in ("APT(1)", "L-SVFM(1)", "SR-SVFM(1)", "APT-SR(2)"):
            spec, p = params_for(name, 4, seed=1)
            # push the raw values around; the transformed ones must stay legal
            p = {k: v - 3.0 for k, v in p.items()}
            tp = models.transform(spec, p)
            if "alpha" in tp:
                assert np.all(np.asarray(tp["alpha"]) > 0)
            if spec.vol_form == "const":
                assert np.all(np.asarray(tp["beta0"]) > 0)
            else:
                assert np.all(np.asarray(tp["beta"]) > 0)
                a = np.asarray(tp["a"])
                assert np.all((a > 0) & (a < 1))
            if spec.vol_form == "sqrt":
                assert np.all(np.asarray(tp["c"]) >= 0.5)

    def test_network_families_pass_through(self):
        spec, p = params_for("NNFM(1)", 3)
        assert models.transform(spec, p) is p


class TestDensities:
    def test_emission_density_matches_scipy(self):
        for name in ("APT(1)", "L-SVFM(1)", "SR-SVFM(1)", "NNFM(1)", "M-NNFM(2)"):
            n_x = 4
            spec, p = params_for(name, n_x, seed=2)
            z = np.abs(np.random.default_rng(3).standard_normal(spec.n_z)) + 0.2
            x = np.random.default_rng(4).standard_normal(n_x) * 0.5
            mu, var = models.emission(spec, models.transform(spec, p), z)
            expected = stats.norm.logpdf(x, loc=mu, scale=np.sqrt(var)).sum()
            got = models.log_emission_density(spec, p, x, z)
            np.testing.assert_allclose(float(got), expected, rtol=1e-10)

    def test_prior_density_matches_scipy(self):
        spec, p = params_for("L-SVFM(2)", 5, seed=5)
        state = models.FactorState(z=np.array([0.3, -0.2]), lstm=None)
        z_t = np.array([0.1, 0.4])
        mu, var = models.prior_step(spec, models.transform(spec, p), state)
        expected = stats.norm.logpdf(z_t, loc=mu, scale=np.sqrt(var)).sum()
        got = models.log_prior_transition(spec, p, z_t, state)
        np.testing.assert_allclose(float(got), expected, rtol=1e-10)

    def test_densities_reject_nonfinite(self):
        spec, p = params_for("APT(1)", 3)
        with pytest.raises(ValueError):
            models.log_emission_density(spec, p, np.array([np.nan, 0, 0]), np.zeros(1))

    def test_apt_prior_is_standard_normal(self):
        spec, p = params_for("APT(2)", 5)
        state = models.initial_state(spec, p)
        mu, var = models.prior_step(spec, models.transform(spec, p), state)
        np.testing.assert_array_equal(np.asarray(mu), 0.0)
        np.testing.assert_array_equal(np.asarray(var), 1.0)

    def test_sqrt_prior_uses_previous_level_as_variance(self):
        spec, p = params_for("SR-SVFM(1)", 3, seed=6)
        tp = models.transform(spec, p)
        state = models.FactorState(z=np.array([0.7]), lstm=None)
        mu, var = models.prior_step(spec, tp, state)
        np.testing.assert_allclose(np.asarray(var), 0.7)
        np.testing.assert_allclose(
            np.asarray(mu), np.asarray(tp["c"]) + np.asarray(tp["a"]) * 0.7
        )
        # clamped below
        state = models.FactorState(z=np.array([-3.0]), lstm=None)
        _, var = models.prior_step(spec, tp, state)
        np.testing.assert_allclose(np.asarray(var), models.SR_EPS)


class TestSimulate:
    def test_deterministic_given_seed(self):
        spec, p = params_for("NNFM(1)", 4, seed=7)
        x1, z1 = models.simulate(spec, p, T=20, seed=3)
        x2, z2 = models.simulate(spec, p, T=20, seed=3)
        np.testing.assert_array_equal(x1, x2)
        np.testing.assert_array_equal(z1, z2)
        x3, _ = models.simulate(spec, p, T=20, seed=4)
        assert not np.array_equal(x1, x3)

    def test_apt_cross_covariance_matches_loadings(self):
        # x_i = alpha_i z + beta0_i e_i with z, e standard normal, so
        # cov(x_i, x_j) = alpha_i alpha_j for i != j
        alpha = 0.5509
        spec = models.spec_from_name("APT(1)", 2)
        from factorlab.networks import inv_softplus

        p = {
            "alpha0": np.zeros(2),
            "alpha_raw": np.full((2, 1), inv_softplus(alpha)),
            "beta0_raw": np.full(2, inv_softplus(0.8237)),
        }
        x, _ = models.simulate(spec, p, T=50000, seed=0)
        cov = np.cov(x.T)
        np.testing.assert_allclose(cov[0, 1], alpha**2, atol=0.02)

    def test_lsvfm_factor_autocorrelation(self):
        spec, p = params_for("L-SVFM(1)", 3, seed=8)
        p["a_raw"] = np.array([float(np.log(0.9 / 0.1))])
        _, z = models.simulate(spec, p, T=50000, seed=1)
        z = z[:, 0]
        rho = np.corrcoef(z[:-1], z[1:])[0, 1]
        np.testing.assert_allclose(rho, 0.9, atol=0.02)

    def test_sqrt_factors_after_clamp_support_variance(self):
        spec, p = params_for("SR-SVFM(1)", 3, seed=9)
        _, z = models.simulate(spec, p, T=5000, seed=2)
        assert np.all(np.isfinite(z))


class TestSensitivity:
    def test_matches_finite_differences(self):
        for name in ("NNFM(1)", "M-NNFM(1)", "M-NNFM(2)"):
            spec, p = params_for(name, 3, seed=10)
            z = np.random.default_rng(11).standard_normal(spec.n_z) * 0.5 + 0.3
            dmu, dsigma = models.sensitivity(spec, p, z)
            h = 1e-6
            tp = models.transform(spec, p)
            for j in range(spec.n_z):
                zp, zm = z.copy(), z.copy()
                zp[j] += h
                zm[j] -= h
                mu_p, var_p = models.emission(spec, tp, zp)
                mu_m, var_m = models.emission(spec, tp, zm)
                np.testing.assert_allclose(dmu[:, j], (mu_p - mu_m) / (2 * h), atol=1e-5)
                sd_p, sd_m = np.sqrt(var_p), np.sqrt(var_m)
                np.testing.assert_allclose(
                    dsigma[:, j], (sd_p - sd_m) / (2 * h), atol=1e-5
                )

    def test_monotone_one_factor_signs(self):
        spec, p = params_for("M-NNFM(1)", 3, seed=12)
        for z in np.linspace(-3, 3, 25):
            dmu, dsigma = models.sensitivity(spec, p, np.array([z]))
            assert np.all(dmu <= 1e-12)
            assert np.all(dsigma >= -1e-12)

    def test_monotone_two_factor_separation(self):
        spec, p = params_for("M-NNFM(2)", 3, seed=13)
        for z in np.random.default_rng(14).standard_normal((25, 2)):
            dmu, dsigma = models.sensitivity(spec, p, z)
            np.testing.assert_array_equal(dsigma[:, 0], 0.0)
            np.testing.assert_array_equal(dmu[:, 1], 0.0)

    def test_rejects_parametric_families(self):
        spec, p = params_for("APT(1)", 3)
        with pytest.raises(ModelError):
            models.sensitivity(spec, p, np.zeros(1))


class TestSerialization:
    def test_roundtrip(self, tmp_path):
        for name in ("APT(2)", "SR-SVFM(2)", "M-NNFM(2)"):
            spec, p = params_for(name, 4, seed=15)
            path = tmp_path / f"{name}.json"
            models.save_model(str(path), spec, p)
            spec2, p2 = models.load_model(str(path))
            assert spec2 == spec
            assert sorted(p2) == sorted(p)
            for k in p:
                np.testing.assert_array_equal(p2[k], np.asarray(p[k]))

    def test_rejects_foreign_files(self, tmp_path):
        path = tmp_path / "x.json"
        path.write_text('{"format": "something-else"}')
        with pytest.raises(ModelError):
            models.load_model(str(path))

    def test_no_partial_file_on_failure(self, tmp_path):
        target = tmp_path / "sub" / "model.json"
        spec, p = params_for("APT(1)", 3)
        with pytest.raises(OSError):
            models.save_model(str(target), spec, p)
        assert not target.exists()

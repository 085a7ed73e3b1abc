import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from spatnorm import grf
from spatnorm.numerics import bessel_k


class TestMaternCov:
    def test_zero_distance_limit(self):
        p = grf.MaternParams(1.0, 0.2, 0.5)
        assert grf.matern_cov(p, 0.0) == 1.0
        p2 = grf.MaternParams(2.5, 0.1, 1.7)
        assert grf.matern_cov(p2, 0.0) == 2.5

    def test_exponential_closed_form(self):
        p = grf.MaternParams(1.0, 0.2, 0.5)
        assert grf.matern_cov(p, 0.2) == pytest.approx(math.exp(-1), rel=1e-13)
        for beta in (0.05, 0.234, 1.3):
            for d in (0.01, 0.1, 0.7, 1.4):
                got = grf.matern_cov(grf.MaternParams(1.0, beta, 0.5), d)
                assert got == pytest.approx(math.exp(-d / beta), abs=1e-12)

    def test_nu_one_bessel_oracle(self):
        # at nu=1, beta=1, d=1 the covariance is (d/beta) K_1(d/beta)
        p = grf.MaternParams(1.0, 1.0, 1.0)
        assert grf.matern_cov(p, 1.0) == pytest.approx(bessel_k(1.0, 1.0), rel=1e-12)
        assert grf.matern_cov(p, 1.0) == pytest.approx(0.6019072, abs=1e-7)

    def test_nugget_at_beta_zero(self):
        p = grf.MaternParams(1.5, 0.0, 0.5)
        assert grf.matern_cov(p, 0.0) == 1.5
        assert grf.matern_cov(p, 0.3) == 0.0

    def test_negative_distance_rejected(self):
        with pytest.raises(ValueError):
            grf.matern_cov(grf.MaternParams(1.0, 0.1, 0.5), -0.1)

    def test_continuity_at_zero(self):
        for nu in (0.5, 1.0, 2.3):
            p = grf.MaternParams(1.0, 0.3, nu)
            assert abs(grf.matern_cov(p, 1e-12) - grf.matern_cov(p, 0.0)) < 1e-6

    def test_nonincreasing_and_bounded(self):
        for nu in (0.5, 1.2, 2.5):
            p = grf.MaternParams(1.0, 0.25, nu)
            ds = np.linspace(0.0, 3.0, 60)
            vals = np.array([grf.matern_cov(p, d) for d in ds])
            assert np.all(np.diff(vals) <= 1e-15)
            assert np.all(vals <= 1.0) and vals[0] == 1.0

    def test_params_validation(self):
        with pytest.raises(ValueError):
            grf.MaternParams(0.0, 0.1, 0.5)
        with pytest.raises(ValueError):
            grf.MaternParams(1.0, -0.1, 0.5)
        with pytest.raises(ValueError):
            grf.MaternParams(1.0, 0.1, 0.0)


class TestBetaMax:
    def test_paper_value(self):
        assert grf.beta_max(0.5, 0.7) == pytest.approx(0.234, abs=5e-4)
        assert grf.beta_max(0.5, 0.7) == pytest.approx(0.7 / math.log(20), rel=1e-10)

    def test_closed_form_inversion(self):
        assert grf.beta_max(0.5, math.log(20)) == pytest.approx(1.0, rel=1e-10)

    def test_bisection_oracle_nu1(self):
        b = grf.beta_max(1.0, 0.7)
        corr = grf.matern_cov(grf.MaternParams(1.0, b, 1.0), 0.7)
        assert corr == pytest.approx(0.05, abs=1e-8)


class TestGridSpec:
    def test_unit_square_coordinates(self):
        g = grf.GridSpec("unit_square", 2, 2)
        pts = g.coordinates()
        assert pts.shape == (4, 2)
        assert g.diameter == pytest.approx(math.sqrt(2))

    def test_spacing_includes_endpoints(self):
        g = grf.GridSpec("unit_square", 60, 60)
        pts = g.coordinates()
        assert pts.min() == 0.0 and pts.max() == 1.0
        assert pts[1, 1] - pts[0, 1] == pytest.approx(1 / 59)

    def test_sphere_chordal_bound(self):
        g = grf.GridSpec("sphere", 8, 16, 6371.0)
        assert g.coordinates().shape == (128, 3)
        assert g.diameter <= 2 * 6371.0 + 1e-6

    def test_validation(self):
        with pytest.raises(ValueError):
            grf.GridSpec("unit_square", 1, 3)
        with pytest.raises(ValueError):
            grf.GridSpec("sphere", 4, 4, 0.0)
        with pytest.raises(ValueError):
            grf.GridSpec("torus", 4, 4)


class TestCovMatrix:
    def test_identity_at_beta_zero(self):
        g = grf.GridSpec("unit_square", 3, 3)
        c = grf.cov_matrix(g, grf.MaternParams(2.0, 0.0, 0.5))
        assert np.array_equal(c, 2.0 * np.eye(9))

    def test_matches_scalar_covariance(self):
        g = grf.GridSpec("unit_square", 4, 5)
        p = grf.MaternParams(1.3, 0.21, 1.5)
        c = grf.cov_matrix(g, p)
        pts = g.coordinates()
        rng = np.random.default_rng(0)
        for _ in range(25):
            i, j = rng.integers(0, 20, 2)
            d = float(np.linalg.norm(pts[i] - pts[j]))
            assert c[i, j] == pytest.approx(grf.matern_cov(p, d), rel=1e-10)
        assert np.allclose(c, c.T)
        assert np.allclose(np.diag(c), 1.3)

    def test_two_by_two_adjacent(self):
        g = grf.GridSpec("unit_square", 2, 2)
        c = grf.cov_matrix(g, grf.MaternParams(1.0, 0.234, 0.5))
        assert c[0, 1] == pytest.approx(math.exp(-1 / 0.234), rel=1e-10)

    def test_cholesky_with_jitter(self):
        g = grf.GridSpec("unit_square", 8, 8)
        chol = grf.cholesky_cov(g, grf.MaternParams(1.0, 5.0, 2.5))
        assert np.all(np.isfinite(chol))


class TestSampling:
    def test_deterministic(self):
        g = grf.GridSpec("unit_square", 4, 4)
        p = grf.MaternParams(1.0, 0.2, 0.5)
        a = grf.sample_field(g, p, 3, 42)
        b = grf.sample_field(g, p, 3, 42)
        for s1, s2 in zip(a, b):
            assert np.array_equal(s1.values, s2.values)
            assert s1.seed == s2.seed

    def test_iid_at_beta_zero(self):
        g = grf.GridSpec("unit_square", 5, 5)
        samples = grf.sample_field(g, grf.MaternParams(1.0, 0.0, 0.5), 100, 11)
        pooled = np.concatenate([s.values for s in samples])
        assert sps.kstest(pooled, "norm").pvalue > 0.01

    def test_mean_within_four_se(self):
        g = grf.GridSpec("unit_square", 5, 5)
        samples = grf.sample_field(g, grf.MaternParams(1.0, 0.15, 0.5), 200, 3)
        pooled = np.concatenate([s.values for s in samples])
        se = pooled.std() / math.sqrt(len(samples))  # sites within a sample are dependent
        assert abs(pooled.mean()) < 4 * se

    def test_monte_carlo_covariance(self):
        g = grf.GridSpec("unit_square", 3, 3)
        p = grf.MaternParams(1.3, 0.3, 0.5)
        samples = grf.sample_field(g, p, 20000, 7)
        v = np.stack([s.values for s in samples])
        emp = v.T @ v / len(v)
        assert np.abs(emp - grf.cov_matrix(g, p)).max() < 0.05

    def test_sample_metadata(self):
        g = grf.GridSpec("unit_square", 4, 4)
        s = grf.sample_field(g, grf.MaternParams(1.0, 0.1, 1.0), 1, 5)[0]
        assert s.label == "H0" and s.exponent_p == 1.0
        assert s.lattice().shape == (4, 4)


class TestSignedPower:
    def test_examples(self):
        assert grf.signed_power([0.0], 3.0)[0] == 0.0
        assert grf.signed_power([-2.0], 2.0)[0] == -4.0
        v = np.array([-1.7, 0.2, 3.1])
        assert np.allclose(grf.signed_power(v, 1.0), v)

    def test_rejects_p_below_one(self):
        with pytest.raises(ValueError):
            grf.signed_power([1.0], 0.5)

    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=30), st.floats(1.0, 4.0))
    @settings(max_examples=50, deadline=None)
    def test_monotone_and_odd(self, values, p):
        v = np.array(values)
        out = grf.signed_power(v, p)
        order = np.argsort(v)
        assert np.all(np.diff(out[order]) >= 0)
        assert np.allclose(grf.signed_power(-v, p), -out)

    def test_transform_sample_labels(self):
        g = grf.GridSpec("unit_square", 4, 4)
        s = grf.sample_field(g, grf.MaternParams(1.0, 0.1, 0.5), 1, 9)[0]
        t = grf.transform_sample(s, 1.6)
        assert t.label == "H1" and t.exponent_p == 1.6
        assert np.allclose(t.values, grf.signed_power(s.values, 1.6))
        with pytest.raises(ValueError):
            grf.transform_sample(s, 1.0)


class TestContainerIO:
    def test_grfs_round_trip(self, tmp_path):
        g = grf.GridSpec("unit_square", 3, 4)
        samples = grf.sample_field(g, grf.MaternParams(1.0, 0.2, 1.5), 4, 13)
        samples[2] = grf.transform_sample(samples[2], 1.8)
        path = tmp_path / "x.grfs"
        grf.write_grfs(path, samples)
        back = grf.read_grfs(path)
        assert len(back) == 4
        for s1, s2 in zip(samples, back):
            assert np.array_equal(s1.values, s2.values)
            assert (s1.beta, s1.nu, s1.exponent_p, s1.seed, s1.label) == (
                s2.beta,
                s2.nu,
                s2.exponent_p,
                s2.seed,
                s2.label,
            )
            assert s1.grid == s2.grid

    def test_sphere_round_trip(self, tmp_path):
        g = grf.GridSpec("sphere", 4, 8, 6371.0)
        samples = grf.sample_field(g, grf.MaternParams(1.0, 900.0, 0.5), 2, 1)
        path = tmp_path / "s.grfs"
        grf.write_grfs(path, samples)
        assert grf.read_grfs(path)[0].grid == g

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.grfs"
        path.write_bytes(b"NOTIT" + b"\0" * 40)
        with pytest.raises(ValueError):
            grf.read_grfs(path)

    def test_csv_export(self, tmp_path):
        g = grf.GridSpec("unit_square", 2, 2)
        samples = grf.sample_field(g, grf.MaternParams(1.0, 0.1, 0.5), 2, 3)
        path = tmp_path / "x.csv"
        grf.write_samples_csv(path, samples)
        lines = path.read_text().splitlines()
        assert lines[0].startswith("label,beta,nu,p,seed,v0")
        assert len(lines) == 3

    def test_label_invariant(self):
        g = grf.GridSpec("unit_square", 2, 2)
        with pytest.raises(ValueError):
            grf.FieldSample(g, np.zeros(4), 0.1, 0.5, 2.0, 0, "H0")
        with pytest.raises(ValueError):
            grf.FieldSample(g, np.zeros(4), 0.1, 0.5, 1.0, 0, "H1")

import math

import mpmath
import numpy as np
import pytest

from spatnorm import numerics as nm

mpmath.mp.dps = 30


class TestBesselK:
    def test_half_integer_closed_forms(self):
        assert nm.bessel_k(0.5, 1.0) == pytest.approx(math.sqrt(math.pi / 2) * math.exp(-1), rel=1e-14)
        assert nm.bessel_k(1.5, 2.0) == pytest.approx(math.sqrt(math.pi / 4) * math.exp(-2) * 1.5, rel=1e-14)

    def test_order_one(self):
        # reference value cross-checked against the high-precision oracle below
        assert nm.bessel_k(1.0, 1.0) == pytest.approx(0.6019072301972346, rel=1e-12)

    @pytest.mark.parametrize("order", [0.25, 0.5, 0.77, 1.0, 1.5, 2.3, 3.0, 4.99, 5.0])
    def test_against_mpmath_oracle(self, order):
        for x in [1e-6, 1e-3, 0.1, 0.5, 1.9999, 2.0, 2.1, 10.0, 50.0]:
            ref = float(mpmath.besselk(order, x))
            assert nm.bessel_k(order, x) == pytest.approx(ref, rel=1e-10)

    def test_recurrence(self):
        # K_{v+1}(x) = K_{v-1}(x) + (2v/x) K_v(x)
        for nu in np.linspace(1.05, 4.0, 9):
            for x in [0.2, 1.0, 3.0, 20.0]:
                lhs = nm.bessel_k(nu + 1, x)
                rhs = nm.bessel_k(nu - 1, x) + 2 * nu / x * nm.bessel_k(nu, x)
                assert lhs == pytest.approx(rhs, rel=1e-8)

    def test_domain_errors(self):
        with pytest.raises(ValueError):
            nm.bessel_k(0.0, 1.0)
        with pytest.raises(ValueError):
            nm.bessel_k(-1.0, 1.0)
        with pytest.raises(ValueError):
            nm.bessel_k(1.0, 0.0)
        with pytest.raises(ValueError):
            nm.bessel_k(1.0, -2.0)
        with pytest.raises(OverflowError):
            nm.bessel_k(1.0, 1e-301)

    def test_vectorized_matches_scalar(self):
        xs = np.array([0.3, 1.0, 5.0])
        vec = nm.bessel_k_vec(1.3, xs)
        for x, v in zip(xs, vec):
            assert v == nm.bessel_k(1.3, float(x))


def _phi_quadrature(z: float, n: int = 20001) -> float:
    # Simpson integration of the standard normal density on [-12, z]
    lo = -12.0
    xs = np.linspace(lo, z, n)
    ys = np.exp(-0.5 * xs * xs) / math.sqrt(2 * math.pi)
    h = (z - lo) / (n - 1)
    return float(h / 3 * (ys[0] + ys[-1] + 4 * ys[1:-1:2].sum() + 2 * ys[2:-1:2].sum()))


class TestNormalCdf:
    def test_center_and_tail(self):
        assert nm.std_normal_cdf(0.0) == 0.5
        assert abs(nm.std_normal_cdf(40.0) - 1.0) <= 1e-15

    def test_against_quadrature_oracle(self):
        for z in [-2.0, -0.3, 0.7, 1.959964]:
            assert nm.std_normal_cdf(z) == pytest.approx(_phi_quadrature(z), abs=1e-9)
        assert nm.std_normal_cdf(1.959964) == pytest.approx(0.975, abs=1e-6)

    def test_symmetry(self):
        for z in np.linspace(-10, 10, 41):
            assert abs(nm.std_normal_cdf(z) + nm.std_normal_cdf(-z) - 1.0) <= 1e-14

    def test_monotone(self):
        zs = np.linspace(-8, 8, 200)
        vals = nm.std_normal_cdf(zs)
        assert np.all(np.diff(vals) >= 0)


class TestQuantiles:
    def test_normal_median(self):
        assert nm.std_normal_quantile(0.5) == pytest.approx(0.0, abs=1e-12)

    def test_chi2_df2_closed_form(self):
        # chi2(2) CDF is 1 - exp(-x/2), so the 0.95 quantile is -2 ln 0.05
        assert nm.chi2_quantile(2, 0.95) == pytest.approx(-2 * math.log(0.05), abs=1e-6)
        assert nm.chi2_quantile(2, 0.95) == pytest.approx(5.991465, abs=1e-6)

    def test_normal_0975(self):
        assert nm.std_normal_quantile(0.975) == pytest.approx(1.959964, abs=1e-6)

    @pytest.mark.parametrize("p", np.arange(0.01, 1.0, 0.07))
    def test_inverse_property(self, p):
        assert nm.std_normal_cdf(nm.std_normal_quantile(p)) == pytest.approx(p, abs=1e-8)
        for df in (1, 2, 5):
            assert nm.chi2_cdf(df, nm.chi2_quantile(df, p)) == pytest.approx(p, abs=1e-8)

    def test_request_validation(self):
        with pytest.raises(ValueError):
            nm.QuantileRequest("standard_normal", 0.0)
        with pytest.raises(ValueError):
            nm.QuantileRequest("standard_normal", 1.0)
        with pytest.raises(ValueError):
            nm.QuantileRequest("chi_squared", 0.5)
        with pytest.raises(ValueError):
            nm.QuantileRequest("chi_squared", 0.5, df=0)
        with pytest.raises(ValueError):
            nm.QuantileRequest("poisson", 0.5)

    def test_request_dispatch(self):
        assert nm.quantile(nm.QuantileRequest("standard_normal", 0.975)) == pytest.approx(1.959964, abs=1e-6)
        assert nm.quantile(nm.QuantileRequest("chi_squared", 0.95, df=2)) == pytest.approx(5.991465, abs=1e-6)

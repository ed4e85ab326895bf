import numpy as np
import pytest

from vlgp.covariance import (
    CovarianceSpec,
    Locations,
    cov_grad,
    cov_matrix,
    cov_submatrix,
    cov_value,
)
from vlgp.errors import ConfigError, DataError

# closed-form anchor values, computed from the kernel definitions directly
VAL_NU15_AT_RHO = (1.0 + np.sqrt(3.0)) * np.exp(-np.sqrt(3.0))  # 0.4833577245965077
VAL_NU05_AT_RHO = 2.0 * np.exp(-1.0)  # 0.7357588823428847
GRAD_RHO_NU15 = 3.0 * np.exp(-np.sqrt(3.0))  # 0.5307636189532927


class TestValues:
    def test_zero_distance_is_marginal_variance(self):
        spec = CovarianceSpec(1.0, 0.05, 1.5)
        assert cov_value(spec, [0.3, 0.4], [0.3, 0.4]) == 1.0
        spec2 = CovarianceSpec(3.7, 0.2, 2.5)
        assert cov_value(spec2, [1.0], [1.0]) == 3.7

    @pytest.mark.parametrize("rho", [0.05, 0.3, 2.0])
    def test_nu15_at_distance_rho(self, rho):
        spec = CovarianceSpec(1.0, rho, 1.5)
        got = cov_value(spec, [0.0, 0.0], [rho, 0.0])
        assert got == pytest.approx(VAL_NU15_AT_RHO, rel=1e-12)

    def test_nu05_at_distance_rho(self):
        spec = CovarianceSpec(2.0, 0.7, 0.5)
        got = cov_value(spec, [0.0], [0.7])
        assert got == pytest.approx(VAL_NU05_AT_RHO, rel=1e-12)

    def test_symmetry_exact(self):
        spec = CovarianceSpec(1.3, 0.11, 2.5)
        rng = np.random.default_rng(0)
        for _ in range(20):
            s, s2 = rng.uniform(size=2), rng.uniform(size=2)
            assert cov_value(spec, s, s2) == cov_value(spec, s2, s)

    @pytest.mark.parametrize("nu", [0.5, 1.5, 2.5])
    def test_decay_in_distance(self, nu):
        spec = CovarianceSpec(1.0, 0.3, nu)
        r = np.linspace(0.0, 3.0, 200)
        vals = [cov_value(spec, [0.0], [ri]) for ri in r]
        assert np.all(np.diff(vals) <= 0)

    def test_invalid_spec_rejected(self):
        with pytest.raises(ConfigError):
            CovarianceSpec(-1.0, 0.1, 1.5)
        with pytest.raises(ConfigError):
            CovarianceSpec(1.0, 0.0, 1.5)
        with pytest.raises(ConfigError):
            CovarianceSpec(1.0, 0.1, 1.7)


class TestGradients:
    def test_sigma2_gradient_is_scaled_value(self):
        spec = CovarianceSpec(2.5, 0.4, 1.5)
        s, s2 = [0.1, 0.2], [0.3, 0.5]
        assert cov_grad(spec, s, s2, 0) == pytest.approx(
            cov_value(spec, s, s2) / 2.5, rel=1e-14
        )

    def test_rho_gradient_zero_at_zero_distance(self):
        spec = CovarianceSpec(1.0, 0.05, 1.5)
        assert cov_grad(spec, [0.2, 0.2], [0.2, 0.2], 1) == 0.0

    def test_rho_gradient_nu15_closed_form(self):
        spec = CovarianceSpec(1.0, 1.0, 1.5)
        got = cov_grad(spec, [0.0], [1.0], 1)
        assert got == pytest.approx(GRAD_RHO_NU15, rel=1e-12)
        # central finite difference at h = 1e-6
        h = 1e-6
        fp = cov_value(CovarianceSpec(1.0, 1.0 + h, 1.5), [0.0], [1.0])
        fm = cov_value(CovarianceSpec(1.0, 1.0 - h, 1.5), [0.0], [1.0])
        assert got == pytest.approx((fp - fm) / (2 * h), rel=1e-8)

    @pytest.mark.parametrize("nu", [0.5, 1.5, 2.5])
    def test_gradient_matches_finite_differences(self, nu):
        rng = np.random.default_rng(7)
        for _ in range(100):
            sigma2 = rng.uniform(0.2, 4.0)
            rho = rng.uniform(0.05, 2.0)
            r = rho * rng.uniform(0.05, 3.0)
            spec = CovarianceSpec(sigma2, rho, nu)
            s, s2 = [0.0], [r]
            for k, val in ((0, sigma2), (1, rho)):
                h = 1e-6 * val
                theta_p, theta_m = [sigma2, rho], [sigma2, rho]
                theta_p[k] += h
                theta_m[k] -= h
                fp = cov_value(CovarianceSpec(theta_p[0], theta_p[1], nu), s, s2)
                fm = cov_value(CovarianceSpec(theta_m[0], theta_m[1], nu), s, s2)
                fd = (fp - fm) / (2 * h)
                an = cov_grad(spec, s, s2, k)
                assert an == pytest.approx(fd, rel=1e-6, abs=1e-10)

    def test_invalid_parameter_index(self):
        spec = CovarianceSpec(1.0, 0.1, 1.5)
        with pytest.raises(ConfigError):
            cov_grad(spec, [0.0], [1.0], 2)


class TestSubmatrix:
    def test_single_entry(self):
        spec = CovarianceSpec(2.0, 0.1, 1.5)
        locs = Locations(np.random.default_rng(1).uniform(size=(5, 2)))
        M = cov_submatrix(spec, locs, [3], [3])
        assert M.shape == (1, 1) and M[0, 0] == 2.0

    def test_matches_elementwise_values(self):
        spec = CovarianceSpec(1.2, 0.3, 1.5)
        coords = np.array([[0.0, 0.0], [0.2, 0.1], [0.5, 0.9]])
        locs = Locations(coords)
        M = cov_submatrix(spec, locs, [0, 1, 2], [0, 1, 2])
        for i in range(3):
            for j in range(3):
                assert M[i, j] == pytest.approx(
                    cov_value(spec, coords[i], coords[j]), rel=1e-14
                )
        row = cov_submatrix(spec, locs, [0], [1, 2])
        assert row.shape == (1, 2)
        assert row[0, 0] == pytest.approx(cov_value(spec, coords[0], coords[1]))

    def test_out_of_range_index(self):
        spec = CovarianceSpec(1.0, 0.1, 1.5)
        locs = Locations(np.random.default_rng(2).uniform(size=(4, 2)))
        with pytest.raises(ConfigError):
            cov_submatrix(spec, locs, [0, 4], [0])

    @pytest.mark.parametrize("nu", [0.5, 1.5, 2.5])
    def test_positive_definite_small_n(self, nu):
        rng = np.random.default_rng(11)
        coords = rng.uniform(size=(50, 2))
        spec = CovarianceSpec(1.0, 0.2, nu)
        M = cov_matrix(spec, coords)
        assert np.linalg.eigvalsh(M).min() > 0


class TestLocations:
    def test_duplicates_rejected(self):
        coords = np.array([[0.1, 0.2], [0.5, 0.5], [0.1, 0.2]])
        with pytest.raises(DataError):
            Locations(coords)

    def test_near_duplicates_within_tolerance_rejected(self):
        coords = np.array([[0.1, 0.2], [0.1 + 1e-13, 0.2]])
        with pytest.raises(DataError):
            Locations(coords)

    def test_single_point_ok(self):
        locs = Locations(np.array([[0.3, 0.7]]))
        assert locs.n == 1 and locs.d == 2

    def test_non_finite_rejected(self):
        with pytest.raises(DataError):
            Locations(np.array([[0.0, np.nan]]))

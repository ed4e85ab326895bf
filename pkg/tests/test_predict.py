import numpy as np
import pytest

from tests.util import make_dataset
from vlgp.covariance import cov_matrix
from vlgp.errors import CapabilityError, CapacityError, ConfigError, NumericalError
from vlgp.laplace import BackendConfig, find_mode
from vlgp.likelihoods import get_likelihood
from vlgp.predict import (
    PredictiveDistribution,
    crps_from_samples,
    gaussian_log_score,
    latent_mean,
    latent_var_exact,
    latent_var_lanczos,
    latent_var_sim,
    predict_latent,
    response_moments,
    rmse,
    scores,
)
from vlgp.vecchia import prediction_blocks

CHOL = BackendConfig(backend="cholesky")
TIGHT = BackendConfig(backend="iterative", cg_tol=1e-8)


@pytest.fixture(scope="module")
def small_fit():
    ds = make_dataset(30, seed=50, m=29, rho=0.3)
    st = find_mode(ds["factor"], ds["lik"], ds["y_f"], np.zeros(30), CHOL)
    return ds, st


def _dense_laplace_predictive(ds, st, pred):
    """Posterior predictive through fully dense algebra (oracle)."""
    f = ds["factor"]
    Sig = cov_matrix(f.spec, f.coords)
    cross = cov_matrix(f.spec, pred, f.coords)
    prior_var = np.full(pred.shape[0], f.spec.sigma2)
    alpha = np.linalg.solve(Sig, cross.T)
    mean = alpha.T @ st.b
    post_prec = np.linalg.inv(Sig) + np.diag(st.W)
    post_cov = np.linalg.inv(post_prec)
    var = prior_var - np.einsum("ip,ip->p", cross.T, alpha)
    var = var + np.einsum("pi,ij,jp->p", alpha.T, post_cov, np.linalg.solve(Sig, cross.T))
    return mean, var


class TestLatentMean:
    def test_matches_dense_conditioning(self, small_fit):
        ds, st = small_fit
        pred = np.random.default_rng(0).uniform(size=(5, 2))
        blocks = prediction_blocks(ds["factor"], pred, m=30)
        omega = latent_mean(st, blocks, np.zeros(5))
        mean_oracle, _ = _dense_laplace_predictive(ds, st, pred)
        np.testing.assert_allclose(omega, mean_oracle, atol=1e-8)

    def test_far_point_reverts_to_fixed_effect(self, small_fit):
        ds, st = small_fit
        blocks = prediction_blocks(ds["factor"], np.array([[50.0, 50.0]]))
        omega = latent_mean(st, blocks, np.array([0.7]))
        assert omega[0] == pytest.approx(0.7, abs=1e-6)

    def test_zero_mode_gives_prior_mean(self, small_fit):
        ds, st = small_fit
        from dataclasses import replace

        st0 = replace(st, b=np.zeros_like(st.b))
        pred = np.random.default_rng(1).uniform(size=(3, 2))
        blocks = prediction_blocks(ds["factor"], pred)
        np.testing.assert_allclose(
            latent_mean(st0, blocks, np.array([1.0, 2.0, 3.0])), [1.0, 2.0, 3.0]
        )

    def test_dimension_mismatch(self, small_fit):
        ds, st = small_fit
        blocks = prediction_blocks(ds["factor"], np.array([[0.5, 0.5]]))
        with pytest.raises(ConfigError):
            latent_mean(st, blocks, np.zeros(2))


class TestExactVariance:
    def test_matches_dense_posterior(self, small_fit):
        ds, st = small_fit
        pred = np.random.default_rng(2).uniform(size=(6, 2))
        blocks = prediction_blocks(ds["factor"], pred, m=30)
        var = latent_var_exact(st, ds["factor"], blocks)
        _, var_oracle = _dense_laplace_predictive(ds, st, pred)
        np.testing.assert_allclose(var, var_oracle, atol=1e-8)

    def test_far_point_prior_variance(self, small_fit):
        ds, st = small_fit
        blocks = prediction_blocks(ds["factor"], np.array([[60.0, -40.0]]))
        var = latent_var_exact(st, ds["factor"], blocks)
        assert var[0] == pytest.approx(ds["spec"].sigma2, abs=1e-6)

    def test_full_covariance_psd(self, small_fit):
        ds, st = small_fit
        pred = np.random.default_rng(3).uniform(size=(50, 2))
        blocks = prediction_blocks(ds["factor"], pred)
        _, cov = latent_var_exact(st, ds["factor"], blocks, full=True)
        assert np.linalg.eigvalsh(cov).min() >= -1e-10

    def test_capacity_guard(self, small_fit):
        ds, st = small_fit
        blocks = prediction_blocks(ds["factor"], np.random.default_rng(4).uniform(size=(2100, 2)))
        with pytest.raises(CapacityError):
            latent_var_exact(st, ds["factor"], blocks, full=True)


class TestSimulationVariance:
    def test_sampler_covariance_is_system_matrix(self):
        ds = make_dataset(20, seed=51, m=5)
        st = find_mode(ds["factor"], ds["lik"], ds["y_f"], np.zeros(20), CHOL)
        f = ds["factor"]
        rng = np.random.default_rng(5)
        draws = np.empty((20, 10_000))
        for i in range(10_000):
            z1, z2 = rng.standard_normal(20), rng.standard_normal(20)
            draws[:, i] = np.sqrt(st.W) * z1 + f.B.T @ (z2 / np.sqrt(f.D))
        emp = draws @ draws.T / 10_000
        from tests.util import dense_system

        A = dense_system(f, st.W)
        assert np.abs(emp - A).max() < 15.0 * np.abs(A).max() / np.sqrt(10_000)

    def test_far_point_reduces_to_prior_term(self, small_fit):
        ds, st = small_fit
        blocks = prediction_blocks(ds["factor"], np.array([[55.0, 55.0]]))
        var = latent_var_sim(st, ds["factor"], blocks, s=2, seed=0, cfg=TIGHT)
        assert var[0] == pytest.approx(ds["spec"].sigma2, abs=1e-5)

    def test_mean_over_seeds_near_exact(self):
        ds = make_dataset(200, seed=52, m=15)
        st = find_mode(ds["factor"], ds["lik"], ds["y_f"], np.zeros(200), CHOL)
        pred = np.random.default_rng(6).uniform(size=(40, 2))
        blocks = prediction_blocks(ds["factor"], pred)
        exact = latent_var_exact(st, ds["factor"], blocks)
        ests = np.array(
            [
                latent_var_sim(st, ds["factor"], blocks, s=50, seed=s, cfg=TIGHT)
                for s in range(40)
            ]
        )
        se = ests.std(axis=0, ddof=1) / np.sqrt(40)
        z = (ests.mean(axis=0) - exact) / se
        assert np.abs(z).max() < 4.5  # 40 points, unbiased estimator

    def test_seed_determinism(self, small_fit):
        ds, st = small_fit
        pred = np.random.default_rng(7).uniform(size=(4, 2))
        blocks = prediction_blocks(ds["factor"], pred)
        a = latent_var_sim(st, ds["factor"], blocks, s=20, seed=3, cfg=TIGHT)
        b = latent_var_sim(st, ds["factor"], blocks, s=20, seed=3, cfg=TIGHT)
        np.testing.assert_array_equal(a, b)

    def test_s_guard(self, small_fit):
        ds, st = small_fit
        blocks = prediction_blocks(ds["factor"], np.array([[0.4, 0.9]]))
        with pytest.raises(ConfigError):
            latent_var_sim(st, ds["factor"], blocks, s=1, seed=0)


@pytest.fixture(scope="module")
def medium_fit():
    ds = make_dataset(200, seed=53, m=15, rho=0.1)
    st = find_mode(ds["factor"], ds["lik"], ds["y_f"], np.zeros(200), CHOL)
    pred = np.random.default_rng(8).uniform(size=(80, 2))
    blocks = prediction_blocks(ds["factor"], pred)
    exact = latent_var_exact(st, ds["factor"], blocks)
    return ds, st, blocks, exact


class TestLanczosVariance:
    @pytest.mark.parametrize("variant", ["none", "l1", "l2"])
    def test_full_rank_recovers_exact(self, medium_fit, variant):
        ds, st, blocks, exact = medium_fit
        var, order = latent_var_lanczos(st, ds["factor"], blocks, 200, variant)
        assert np.abs(var - exact).max() < 1e-6

    @pytest.mark.parametrize("variant", ["none", "l1", "l2"])
    def test_low_rank_undershoots(self, medium_fit, variant):
        ds, st, blocks, exact = medium_fit
        var, _ = latent_var_lanczos(st, ds["factor"], blocks, 10, variant)
        assert np.all(var <= exact + 1e-10)

    @pytest.mark.parametrize("variant", ["none", "l1", "l2"])
    def test_rmse_non_increasing_in_k(self, medium_fit, variant):
        ds, st, blocks, exact = medium_fit
        rmses = [
            np.sqrt(np.mean((latent_var_lanczos(st, ds["factor"], blocks, k, variant)[0] - exact) ** 2))
            for k in (10, 25, 50, 100)
        ]
        assert np.all(np.diff(rmses) <= 1e-10), rmses

    def test_preconditioned_beats_plain_at_fixed_rank(self, medium_fit):
        ds, st, blocks, exact = medium_fit
        for k in (25, 50):
            r_none = np.sqrt(np.mean((latent_var_lanczos(st, ds["factor"], blocks, k, "none")[0] - exact) ** 2))
            for variant in ("l1", "l2"):
                r_v = np.sqrt(np.mean((latent_var_lanczos(st, ds["factor"], blocks, k, variant)[0] - exact) ** 2))
                assert r_v <= r_none + 1e-12

    def test_rank_guard(self, medium_fit):
        ds, st, blocks, _ = medium_fit
        with pytest.raises(ConfigError):
            latent_var_lanczos(st, ds["factor"], blocks, 0, "none")
        with pytest.raises(ConfigError):
            latent_var_lanczos(st, ds["factor"], blocks, 10, "l3")

    def test_cross_method_consistency_without_oracle(self):
        # smoother field so a moderate Krylov rank nails the variances
        ds = make_dataset(2000, seed=41, m=20, rho=0.2)
        st = find_mode(ds["factor"], ds["lik"], ds["y_f"], np.zeros(2000), BackendConfig())
        pred = np.random.default_rng(9).uniform(size=(400, 2))
        blocks = prediction_blocks(ds["factor"], pred)
        sim = latent_var_sim(st, ds["factor"], blocks, s=1000, seed=1,
                             cfg=BackendConfig(cg_tol=1e-6))
        lz, _ = latent_var_lanczos(st, ds["factor"], blocks, 400, "l1")
        assert np.sqrt(np.mean((sim - lz) ** 2)) < 0.02
        assert np.abs(sim - lz).max() < 0.06


class TestResponseMoments:
    def test_gamma_closed_form_values(self):
        lik = get_likelihood("gamma", shape=2.0)
        pred = PredictiveDistribution(np.array([0.0, 0.3]), np.array([0.0, 0.2]), "exact")
        response_moments(pred, lik, "closed-form")
        assert pred.response_mean[0] == pytest.approx(1.0, rel=1e-14)
        assert pred.response_mean[1] == pytest.approx(np.exp(0.4), rel=1e-14)

    def test_closed_form_unavailable_for_bernoulli(self):
        pred = PredictiveDistribution(np.zeros(1), np.ones(1), "exact")
        with pytest.raises(CapabilityError):
            response_moments(pred, get_likelihood("bernoulli-logit"), "closed-form")

    def test_logit_simulation_probability(self):
        pred = PredictiveDistribution(np.zeros(1), np.ones(1), "exact")
        response_moments(pred, get_likelihood("bernoulli-logit"), "simulation",
                         n_s=100_000, seed=2)
        se = 0.5 / np.sqrt(100_000)
        assert abs(pred.response_mean[0] - 0.5) < 3 * se

    def test_simulation_determinism(self):
        lik = get_likelihood("gamma", shape=3.0)
        pred1 = PredictiveDistribution(np.array([0.1]), np.array([0.3]), "exact")
        pred2 = PredictiveDistribution(np.array([0.1]), np.array([0.3]), "exact")
        response_moments(pred1, lik, "simulation", n_s=500, seed=7)
        response_moments(pred2, lik, "simulation", n_s=500, seed=7)
        np.testing.assert_array_equal(pred1.response_samples, pred2.response_samples)


class TestScores:
    def test_perfect_prediction(self):
        n_p = 7
        truth = np.linspace(-1, 1, n_p)
        pred = PredictiveDistribution(truth.copy(), np.ones(n_p), "exact")
        assert scores(pred, truth, "rmse") == 0.0
        assert scores(pred, truth, "log-score") == pytest.approx(
            n_p * 0.5 * np.log(2 * np.pi), rel=1e-14
        )

    def test_single_point_log_score(self):
        pred = PredictiveDistribution(np.zeros(1), np.ones(1), "exact")
        got = scores(pred, np.array([1.0]), "log-score")
        assert got == pytest.approx(0.5 * np.log(2 * np.pi) + 0.5, rel=1e-14)  # 1.4189385

    def test_crps_degenerate_forecast_is_mae(self):
        samples = np.full((100, 3), 2.0)
        truth = np.array([1.0, 2.0, 4.0])
        got = crps_from_samples(samples, truth)
        assert got == pytest.approx(np.mean(np.abs(2.0 - truth)), rel=1e-12)

    def test_crps_closed_form_gaussian(self):
        # CRPS of N(0,1) forecast at y: y(2Phi(y)-1) + 2 phi(y) - 1/sqrt(pi)
        from scipy.stats import norm

        rng = np.random.default_rng(11)
        samples = rng.standard_normal((200_000, 1))
        y = 0.7
        want = y * (2 * norm.cdf(y) - 1) + 2 * norm.pdf(y) - 1 / np.sqrt(np.pi)
        got = crps_from_samples(samples, np.array([y]))
        assert got == pytest.approx(want, abs=5e-3)

    def test_negative_variance_rejected(self):
        pred = PredictiveDistribution(np.zeros(2), np.array([1.0, -0.1]), "exact")
        with pytest.raises(NumericalError):
            scores(pred, np.zeros(2), "log-score")

    def test_crps_requires_samples(self):
        pred = PredictiveDistribution(np.zeros(1), np.ones(1), "exact")
        with pytest.raises(ConfigError):
            scores(pred, np.zeros(1), "crps")

    def test_unknown_kind(self):
        pred = PredictiveDistribution(np.zeros(1), np.ones(1), "exact")
        with pytest.raises(ConfigError):
            scores(pred, np.zeros(1), "mae")


class TestPredictLatent:
    def test_methods_dispatch(self, small_fit):
        ds, st = small_fit
        pred_pts = np.random.default_rng(12).uniform(size=(8, 2))
        blocks = prediction_blocks(ds["factor"], pred_pts)
        F_p = np.zeros(8)
        p1 = predict_latent(st, ds["factor"], blocks, F_p, method="exact")
        p2 = predict_latent(st, ds["factor"], blocks, F_p, method="simulation",
                            cfg=TIGHT, s=4000, seed=0)
        p3 = predict_latent(st, ds["factor"], blocks, F_p, method="lanczos", k=30)
        np.testing.assert_allclose(p1.omega, p2.omega)
        np.testing.assert_allclose(p1.omega, p3.omega)
        assert np.abs(p2.var - p1.var).max() < 0.15
        assert p3.params["k"] == 30
        with pytest.raises(ConfigError):
            predict_latent(st, ds["factor"], blocks, F_p, method="magic")


class TestTrainingLocationRecovery:
    def test_means_near_training_points_track_the_mode(self):
        # exact duplicates of training points are rejected by contract, so
        # probe just beside them: the predictive mean should reproduce b*
        ds = make_dataset(200, seed=54, m=30, rho=0.1)
        st = find_mode(ds["factor"], ds["lik"], ds["y_f"], np.zeros(200), CHOL)
        f = ds["factor"]
        pred = f.coords[:100] + 1e-6
        blocks = prediction_blocks(f, pred, m=60)
        omega = latent_mean(st, blocks, np.zeros(100))
        corr = np.corrcoef(omega, st.b[:100])[0, 1]
        assert corr > 0.99, corr

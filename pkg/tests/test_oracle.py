import numpy as np
import pytest
from scipy.stats import multivariate_normal

from danp.datagen import GeneratorSpec, eq_cov_matrix, sample_task
from danp.linalg import chol_with_jitter, mvn_loglik
from danp.models import ForwardPassCounter, danp_joint_loglik
from danp.noising import FidelityLevel, NoiseSchedule, augment_task, compound_params
from danp.oracle import (
    NoisedGpModel,
    OracleDenoiser,
    _joint_cov,
    eq_kernel,
    noised_gp_conditional,
    oracle_joint_loglik,
)

LS = 0.25
GEN = GeneratorSpec(kind="gp", gp_lengthscale=LS)
SCHEDULE = NoiseSchedule.from_beta(2, 0.2114949014794547)
MODEL = NoisedGpModel(lengthscale=LS, schedule=SCHEDULE)


class TestEqKernel:
    def test_values(self):
        assert eq_kernel(0.0, 0.0, LS) == 1.0
        assert eq_kernel(0.0, 0.25, LS) == pytest.approx(np.exp(-0.5))
        assert eq_kernel(0.0, 1.0, LS) == pytest.approx(np.exp(-8.0))

    def test_matches_datagen_matrix(self):
        xs = np.linspace(-1, 1, 5)
        np.testing.assert_allclose(
            eq_kernel(xs.reshape(-1, 1), xs.reshape(1, -1), LS),
            eq_cov_matrix(xs, xs, LS))

    def test_invalid_lengthscale(self):
        with pytest.raises(ValueError):
            eq_kernel(0.0, 0.0, 0.0)


class TestConditionalClosedForms:
    def test_single_context_point(self):
        pred = noised_gp_conditional(MODEL, ([0.0], [1.0]), [], 0, [0.25])
        assert pred.mean[0] == pytest.approx(np.exp(-0.5), abs=1e-9)
        assert pred.cov[0, 0] == pytest.approx(1.0 - np.exp(-1.0), abs=1e-9)

    def test_empty_context_is_prior(self):
        pred = noised_gp_conditional(MODEL, ([], []), [], 0, [0.3, -0.4])
        np.testing.assert_allclose(pred.mean, 0.0)
        np.testing.assert_allclose(pred.cov, eq_cov_matrix([0.3, -0.4],
                                                           [0.3, -0.4], LS))

    def test_far_query_reverts_to_prior(self):
        for f in range(SCHEDULE.levels + 1):
            pred = noised_gp_conditional(MODEL, ([-2.0], [1.0]), [], f, [2.0])
            scale, var = compound_params(SCHEDULE, f)
            assert abs(pred.mean[0]) < 1e-8
            assert pred.cov[0, 0] == pytest.approx(scale**2 + var, abs=1e-8)

    def test_variance_never_exceeds_prior(self):
        rng = np.random.default_rng(0)
        task = sample_task(GEN, rng, nc_range=(10, 10), nt=20)
        pred = noised_gp_conditional(
            MODEL, (task.context_x, task.context_y), [], 0, task.target_x)
        assert np.all(np.diag(pred.cov) <= 1.0 + 1e-10)

    def test_context_order_irrelevant(self):
        rng = np.random.default_rng(1)
        task = sample_task(GEN, rng, nc_range=(6, 6), nt=5)
        perm = rng.permutation(6)
        a = noised_gp_conditional(
            MODEL, (task.context_x, task.context_y), [], 0, task.target_x)
        b = noised_gp_conditional(
            MODEL, (task.context_x[perm], task.context_y[perm]), [], 0,
            task.target_x)
        np.testing.assert_allclose(a.mean, b.mean, atol=1e-10)
        np.testing.assert_allclose(a.cov, b.cov, atol=1e-10)

    def test_noisier_level_constraint(self):
        lvl = FidelityLevel(f=1, x=[0.0], y=[0.5])
        with pytest.raises(ValueError):
            noised_gp_conditional(MODEL, ([], []), [lvl], 1, [0.2])

    def test_observed_level_shrinks_variance(self):
        prior = noised_gp_conditional(MODEL, ([], []), [], 0, [0.0])
        lvl = FidelityLevel(f=2, x=[0.0], y=[0.4])
        post = noised_gp_conditional(MODEL, ([], []), [lvl], 0, [0.0])
        assert post.cov[0, 0] < prior.cov[0, 0]


class TestJointLoglik:
    def test_no_context_standard_normal(self):
        task_like = type("T", (), {})()
        task_like.context_x = np.zeros(0)
        task_like.context_y = np.zeros(0)
        task_like.target_x = np.array([0.0])
        task_like.target_y = np.array([0.0])
        ll = oracle_joint_loglik(MODEL, task_like)
        assert ll == pytest.approx(-0.5 * np.log(2 * np.pi), abs=1e-9)

    def test_against_independent_dense_implementation(self):
        rng = np.random.default_rng(2)
        task = sample_task(GEN, rng, nc_range=(4, 4), nt=8)
        ll = oracle_joint_loglik(MODEL, task)
        # independent route: conditional density as ratio of joint to marginal
        all_x = np.concatenate([task.context_x, task.target_x])
        all_y = np.concatenate([task.context_y, task.target_y])
        k_all = eq_cov_matrix(all_x, all_x, LS) + 1e-10 * np.eye(all_x.size)
        k_ctx = k_all[:4, :4]
        joint = multivariate_normal(mean=np.zeros(12), cov=k_all,
                                    allow_singular=True).logpdf(all_y)
        marg = multivariate_normal(mean=np.zeros(4), cov=k_ctx,
                                   allow_singular=True).logpdf(task.context_y)
        assert ll == pytest.approx(joint - marg, abs=1e-5)

    def test_duplicated_target_input_is_finite(self):
        task = sample_task(GEN, np.random.default_rng(3), nc_range=(3, 3), nt=4)
        task.target_x[1] = task.target_x[0]
        task.target_y[1] = task.target_y[0]
        assert np.isfinite(oracle_joint_loglik(MODEL, task))


class TestCorrelatedNoiseJoint:
    def test_matches_augment_chain_statistics(self):
        # condition on a fixed level-0 value; the residual covariance across
        # levels at the same input must match the correlated-noise model
        from danp.datagen import Task

        n = 100_000
        y0 = 0.7
        task = Task(context_x=[], context_y=[], target_x=np.zeros(n),
                    target_y=np.full(n, y0))
        aug = augment_task(task, SCHEDULE, np.random.default_rng(4))
        beta = SCHEDULE.beta
        r1 = aug.levels[0].y - (1 - beta) ** 0.5 * y0
        r2 = aug.levels[1].y - (1 - beta) * y0
        v1 = beta - beta * (1 - beta)
        v2 = beta - beta * (1 - beta) ** 2
        assert r1.var() == pytest.approx(v1, rel=0.02)
        assert r2.var() == pytest.approx(v2, rel=0.02)
        emp_cross = np.mean(r1 * r2)
        expected_cross = (1 - beta) ** 0.5 * v1
        assert emp_cross == pytest.approx(expected_cross, rel=0.05)
        cov = _joint_cov(MODEL, [0.0, 0.0], [1, 2], correlated_noise=True)
        assert cov[0, 1] - (1 - beta) ** 1.5 == pytest.approx(expected_cross,
                                                             abs=1e-12)

    def test_no_psd_failures_over_seeded_tasks(self):
        failures = 0
        for seed in range(1000):
            rng = np.random.default_rng(seed)
            task = sample_task(GEN, rng, nc_range=(0, 5), nt=10)
            aug = augment_task(task, SCHEDULE, rng)
            xs = np.concatenate([lv.x for lv in aug.levels] + [task.target_x])
            fs = np.concatenate([np.full(10, lv.f) for lv in aug.levels]
                                + [np.zeros(10, dtype=int)])
            ys = np.concatenate([lv.y for lv in aug.levels] + [task.target_y])
            cov = _joint_cov(MODEL, xs, fs, correlated_noise=True)
            try:
                chol_with_jitter(cov)
                assert np.isfinite(mvn_loglik(ys, np.zeros(xs.size), cov))
            except Exception:
                failures += 1
        assert failures == 0


class TestOracleDenoiser:
    def test_layer_predict_counts_and_reduces(self):
        oracle = OracleDenoiser(MODEL)
        task = sample_task(GEN, np.random.default_rng(5), nc_range=(5, 5), nt=6)
        counter = ForwardPassCounter()
        pred = oracle.layer_predict((task.context_x, task.context_y), [], 0,
                                    task.target_x, counter=counter)
        assert counter.count == 1
        direct = noised_gp_conditional(
            MODEL, (task.context_x, task.context_y), [], 0, task.target_x)
        np.testing.assert_array_equal(pred.mean, direct.mean)

    def test_deployment_pipeline_deterministic(self):
        oracle = OracleDenoiser(MODEL)
        task = sample_task(GEN, np.random.default_rng(6), nc_range=(3, 3), nt=8)
        counter = ForwardPassCounter()
        ll_a = danp_joint_loglik(oracle, task, 4, np.random.default_rng(7),
                                 counter=counter, aux_points_per_level=10)
        ll_b = danp_joint_loglik(oracle, task, 4, np.random.default_rng(7),
                                 aux_points_per_level=10)
        assert ll_a == ll_b
        assert np.isfinite(ll_a)
        assert counter.count == 4 * (SCHEDULE.levels + 1)

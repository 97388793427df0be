import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from danp.datagen import (
    GeneratorSpec,
    SawtoothParams,
    SquareParams,
    build_test_metadataset,
    eq_cov_matrix,
    eval_sawtooth,
    eval_square,
    load_metadataset,
    sample_function_params,
    sample_gp_values,
    sample_task,
    save_metadataset,
)

SAW = GeneratorSpec(kind="sawtooth")
SQ = GeneratorSpec(kind="square")
GP = GeneratorSpec(kind="gp")


class TestFunctionParams:
    def test_sawtooth_ranges(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            p = sample_function_params(SAW, rng)
            assert 2.0 <= p.omega <= 4.0
            assert p.d in (-1, 1)
            assert 1.0 / p.omega <= p.phi <= 1.0

    def test_square_ranges(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            p = sample_function_params(SQ, rng)
            assert 1.0 <= p.omega <= 3.0
            assert 1.0 / p.omega <= p.phi <= 1.0

    def test_omega_mean_monte_carlo(self):
        # U(2, 4) has mean 3
        rng = np.random.default_rng(42)
        omegas = [sample_function_params(SAW, rng).omega for _ in range(100_000)]
        assert abs(np.mean(omegas) - 3.0) < 0.02

    def test_deterministic_under_seed(self):
        p1 = sample_function_params(SAW, np.random.default_rng(7))
        p2 = sample_function_params(SAW, np.random.default_rng(7))
        assert p1 == p2

    def test_gp_kind_rejected(self):
        with pytest.raises(ValueError):
            sample_function_params(GP, np.random.default_rng(0))


class TestWaveEvaluation:
    def test_sawtooth_direct(self):
        p = SawtoothParams(omega=2, d=1, phi=0.5)
        assert eval_sawtooth(p, 0.75) == pytest.approx(0.5)

    def test_sawtooth_mod_convention(self):
        p = SawtoothParams(omega=2, d=1, phi=0.5)
        # omega*(x - phi) = -1; -1 mod 1 = 0
        assert eval_sawtooth(p, 0.0) == pytest.approx(0.0)

    def test_sawtooth_negative_argument(self):
        p = SawtoothParams(omega=3, d=-1, phi=0.4)
        # 3*(-0.2 - 0.4) = -1.8; -1.8 mod 1 = 0.2
        assert eval_sawtooth(p, 0.2) == pytest.approx(0.2)

    def test_square_direct(self):
        p = SquareParams(omega=1, phi=0.5)
        assert eval_square(p, 0.6) == 1.0  # floor(0.1) = 0
        assert eval_square(p, 1.6) == 0.0  # floor(1.1) = 1

    def test_square_negative_floor(self):
        p = SquareParams(omega=1, phi=0.5)
        # floor(-0.1) = -1; -1 mod 2 = 1 under the nonnegative convention
        assert eval_square(p, 0.4) == 0.0

    @given(st.floats(-10, 10), st.integers(0, 10_000))
    @settings(max_examples=60, deadline=None)
    def test_sawtooth_range_and_periodicity(self, x, seed):
        p = sample_function_params(SAW, np.random.default_rng(seed))
        y = eval_sawtooth(p, x)
        assert 0.0 <= y < 1.0
        if p.d == 1:
            assert eval_sawtooth(p, x + 1.0 / p.omega) == pytest.approx(y, abs=1e-12)

    @given(st.floats(-10, 10), st.integers(0, 10_000))
    @settings(max_examples=60, deadline=None)
    def test_square_binary(self, x, seed):
        p = sample_function_params(SQ, np.random.default_rng(seed))
        assert eval_square(p, x) in (0.0, 1.0)


class TestGpSampler:
    def test_empty(self):
        assert sample_gp_values([], 0.25, np.random.default_rng(0)).size == 0

    def test_marginal_variance(self):
        rng = np.random.default_rng(1)
        draws = np.array([sample_gp_values([0.3], 0.25, rng)[0]
                          for _ in range(100_000)])
        assert abs(draws.var() - 1.0) < 0.02

    def test_pairwise_correlation(self):
        # k(0, 0.25) with l = 0.25 is exp(-1/2)
        rng = np.random.default_rng(2)
        draws = np.array([sample_gp_values([0.0, 0.25], 0.25, rng)
                          for _ in range(100_000)])
        corr = np.corrcoef(draws.T)[0, 1]
        assert abs(corr - np.exp(-0.5)) < 0.01

    def test_three_point_covariance(self):
        xs = np.array([-0.3, 0.1, 0.5])
        rng = np.random.default_rng(3)
        draws = np.array([sample_gp_values(xs, 0.25, rng) for _ in range(100_000)])
        emp = np.cov(draws.T)
        expected = eq_cov_matrix(xs, xs, 0.25)
        assert np.max(np.abs(emp - expected)) < 0.02


class TestTaskSampling:
    def test_default_sizes(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            task = sample_task(SAW, rng)
            assert task.n_target == 50
            assert 0 <= task.n_context <= 30

    def test_inputs_within_range(self):
        rng = np.random.default_rng(1)
        for spec in (SAW, SQ, GP):
            task = sample_task(spec, rng)
            lo, hi = spec.input_range
            for xs in (task.context_x, task.target_x):
                assert np.all((xs >= lo) & (xs <= hi))

    def test_gp_task_outputs_consistent_joint(self):
        # context and target values come from one joint draw, so a context
        # point close to a target point should be highly correlated with it
        rng = np.random.default_rng(2)
        task = sample_task(GP, rng, nc_range=(10, 10))
        assert np.all(np.isfinite(task.context_y))
        assert np.all(np.isfinite(task.target_y))


class TestMetadataset:
    def test_counts(self):
        tasks = build_test_metadataset(SAW, np.random.default_rng(0))
        assert len(tasks) == 310
        sizes = [t.n_context for t in tasks]
        assert sorted(set(sizes)) == list(range(31))
        assert sizes.count(17) == 10

    def test_regeneration_identical(self):
        a = build_test_metadataset(SQ, np.random.default_rng(5))
        b = build_test_metadataset(SQ, np.random.default_rng(5))
        for ta, tb in zip(a, b):
            np.testing.assert_array_equal(ta.target_y, tb.target_y)
            np.testing.assert_array_equal(ta.context_x, tb.context_x)

    def test_export_import_roundtrip(self, tmp_path):
        tasks = build_test_metadataset(
            GP, np.random.default_rng(9), tasks_per_size=2, max_context=4, nt=7)
        path = tmp_path / "meta.txt"
        save_metadataset(tasks, GP, 9, path)
        loaded, spec, seed = load_metadataset(path)
        assert seed == 9
        assert spec.kind == "gp"
        assert len(loaded) == len(tasks)
        for ta, tb in zip(tasks, loaded):
            np.testing.assert_array_equal(ta.context_y, tb.context_y)
            np.testing.assert_array_equal(ta.target_x, tb.target_x)

    def test_export_deterministic_bytes(self, tmp_path):
        tasks = build_test_metadataset(
            SAW, np.random.default_rng(3), tasks_per_size=1, max_context=3)
        save_metadataset(tasks, SAW, 3, tmp_path / "a.txt")
        save_metadataset(tasks, SAW, 3, tmp_path / "b.txt")
        assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()

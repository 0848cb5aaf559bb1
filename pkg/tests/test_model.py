import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from activerep.model import (
    PENDULUM_POLY_LAYOUT,
    Dimensions,
    FeatureOperator,
    TargetSpec,
    TaskSpace,
    apply_feature,
    feature_second_moment,
    fourier_feature,
    identity_feature,
    load_ground_truth,
    make_ground_truth,
    pendulum_poly_feature,
    sample_mixture,
    sample_task,
    save_ground_truth,
)


class TestDimensions:
    def test_rejects_k_above_lifted_dims(self):
        with pytest.raises(ValueError):
            Dimensions(5, 5, 4, 4, 4, 6)

    def test_rejects_small_source_block(self):
        with pytest.raises(ValueError):
            Dimensions(5, 5, 10, 4, 10, 2)

    def test_rejects_zero_dims(self):
        with pytest.raises(ValueError):
            Dimensions(0, 5, 4, 4, 4, 1)

    def test_target_dim(self):
        assert Dimensions(5, 5, 10, 6, 10, 2).d_w_target == 4


class TestMakeGroundTruth:
    def test_well_conditioned_min_singular_value(self):
        gt = make_ground_truth(Dimensions(6, 6, 4, 4, 4, 2), "well", seed=1)
        s = np.linalg.svd(gt.b_w_source, compute_uv=False)
        assert s.min() ** 2 == pytest.approx(2.0, abs=1e-9)
        assert s.max() / s.min() <= 1 + 1e-6

    @pytest.mark.parametrize("seed", [0, 1, 7])
    def test_orthonormal_representation(self, seed):
        gt = make_ground_truth(Dimensions(15, 15, 8, 6, 8, 3), "ill", kappa=3.0, seed=seed)
        assert np.allclose(gt.b_x.T @ gt.b_x, np.eye(3), atol=1e-10)

    @pytest.mark.parametrize("kappa", [2.0, 8.0, 20.0])
    def test_ill_conditioning_ratio(self, kappa):
        gt = make_ground_truth(Dimensions(10, 10, 40, 40, 40, 4), "ill", kappa=kappa, seed=2)
        s = np.linalg.svd(gt.b_w_source, compute_uv=False)
        assert s[0] / s[-1] == pytest.approx(kappa, rel=0.01)

    def test_column_band(self):
        gt = make_ground_truth(Dimensions(10, 10, 40, 40, 40, 4), "ill", kappa=8, seed=4)
        norms = np.linalg.norm(gt.b_w_source, axis=0)
        assert norms.min() >= 0.9 and norms.max() <= 1.1

    def test_synthetic_recipe_dimensions(self):
        dims = Dimensions(200, 200, 80, 80, 80, 4)
        gt = make_ground_truth(dims, "ill", kappa=5.0, seed=0)
        assert gt.b_x.shape == (200, 4) and gt.b_w.shape == (4, 80)

    def test_deterministic(self):
        a = make_ground_truth(Dimensions(8, 8, 6, 4, 6, 2), "ill", kappa=2, seed=9)
        b = make_ground_truth(Dimensions(8, 8, 6, 4, 6, 2), "ill", kappa=2, seed=9)
        assert np.array_equal(a.b_x, b.b_x) and np.array_equal(a.b_w, b.b_w)

    def test_rejects_bad_kappa(self):
        with pytest.raises(ValueError):
            make_ground_truth(Dimensions(4, 4, 4, 4, 4, 2), "ill", kappa=0.5)

    def test_fourier_features(self):
        gt = make_ground_truth(Dimensions(3, 30, 6, 6, 6, 2), psi_x="fourier", seed=1)
        assert gt.psi_x.kind == "fourier" and gt.b_x.shape == (30, 2)


class TestSampling:
    def test_zero_task_noiseless_labels(self, small_truth, rng):
        s = sample_task(small_truth, np.zeros(10), 50, rng)
        assert np.all(s.labels == 0)

    def test_noiseless_matches_formula(self, small_truth, rng):
        worst = 0.0
        for _ in range(1000 // 50):
            w = small_truth.task_space.sample_uniform(rng, 1)[0]
            s = sample_task(small_truth, w, 50, rng)
            pred = s.inputs @ small_truth.b_x @ small_truth.b_w @ w
            worst = max(worst, np.max(np.abs(pred - s.labels)))
        assert worst <= 1e-12

    def test_label_variance(self, rng):
        gt = make_ground_truth(Dimensions(10, 10, 6, 6, 6, 2), "well", sigma=1.0, seed=0)
        w = np.zeros(6)
        w[0] = 1.0
        s = sample_task(gt, w, 10_000, rng)
        expected = np.linalg.norm(gt.head(w)) ** 2 + 1.0
        assert np.var(s.labels) == pytest.approx(expected, rel=0.1)

    def test_rejects_outside_ball(self, small_truth, rng):
        with pytest.raises(ValueError):
            sample_task(small_truth, np.full(10, 0.5), 5, rng)

    def test_reproducible(self, ill_truth):
        w = np.eye(8)[0]
        a = sample_task(ill_truth, w, 20, np.random.default_rng(1))
        b = sample_task(ill_truth, w, 20, np.random.default_rng(1))
        assert np.array_equal(a.labels, b.labels) and np.array_equal(a.inputs, b.inputs)


class TestFeatures:
    def test_fourier_zero_phase(self):
        op = FeatureOperator("fourier", 3, 5, np.ones((5, 3)), np.zeros(5))
        assert np.array_equal(apply_feature(op, np.zeros(3)), np.ones(5))

    def test_identity(self, rng):
        v = rng.standard_normal(4)
        assert np.array_equal(apply_feature(identity_feature(4), v), v)

    def test_pendulum_poly_unit_wind(self):
        out = apply_feature(pendulum_poly_feature(), np.array([1, 1, 0, 0, 0, 0.0]))
        entries = dict(zip(PENDULUM_POLY_LAYOUT, out))
        for name in ("cx*cy", "cx^2", "cx^3", "cy^2", "cy^3", "cx^2*cy", "cy^2*cx"):
            assert entries[name] == 1.0
        # the two wind components occupy the leading linear slots
        assert entries["c_x"] == 1.0 and entries["c_y"] == 1.0
        for name in ("g_hat", "alpha1", "alpha2", "dummy"):
            assert entries[name] == 0.0

    def test_pendulum_poly_physical_slots(self):
        out = apply_feature(pendulum_poly_feature(), np.array([0, 0, 0.3, 0.4, 0.5, 1.0]))
        entries = dict(zip(PENDULUM_POLY_LAYOUT, out))
        assert (entries["alpha1"], entries["alpha2"], entries["g_hat"], entries["dummy"]) == (
            0.3, 0.4, 0.5, 1.0)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            apply_feature(identity_feature(3), np.zeros(4))

    @given(st.integers(0, 2**31 - 1))
    def test_fourier_bounded(self, seed):
        rng = np.random.default_rng(seed)
        op = fourier_feature(3, 7, rng)
        out = apply_feature(op, rng.standard_normal((5, 3)) * 10)
        assert np.all(np.abs(out) <= 1.0)

    def test_fourier_second_moment_monte_carlo(self, rng):
        op = fourier_feature(2, 6, rng)
        X = rng.standard_normal((200_000, 2))
        F = apply_feature(op, X)
        assert np.allclose(F.T @ F / X.shape[0], feature_second_moment(op), atol=0.01)


class TestTaskSpace:
    @given(st.integers(0, 2**31 - 1), st.floats(0.1, 3.0))
    def test_uniform_samples_inside(self, seed, radius):
        space = TaskSpace.ball(7, axes=range(5), radius=radius)
        W = space.sample_uniform(np.random.default_rng(seed), 50)
        assert all(space.contains(w) for w in W)

    def test_projection_keeps_members(self):
        space = TaskSpace.ball(3)
        w = np.array([0.1, 0.2, 0.3])
        assert np.array_equal(space.project(w), w)
        assert np.linalg.norm(space.project(np.array([3.0, 4.0, 0.0]))) == pytest.approx(1.0)

    def test_one_hot_membership(self):
        space = TaskSpace("one_hot", 4, (0, 1, 2, 3))
        assert space.contains(np.eye(4)[2])
        assert not space.contains(np.array([0.5, 0.5, 0, 0]))


class TestTargetSpec:
    def test_weights_must_sum_to_one(self):
        with pytest.raises(ValueError):
            TargetSpec(np.eye(2), np.array([0.3, 0.3]), np.eye(2), 10, 10)

    def test_vectors_must_be_spanned(self):
        with pytest.raises(ValueError):
            TargetSpec(np.array([[1.0, 1.0, 0.0]]), np.ones(1), np.array([[1.0, 0, 0]]), 10, 10)

    def test_mixture_sizes(self, small_truth, rng):
        tgt = TargetSpec(np.eye(10)[:3], np.array([0.5, 0.25, 0.25]), np.eye(10)[:3], 9, 3)
        parts = sample_mixture(small_truth, tgt, 9, rng)
        assert sum(p.n for p in parts) == 9


def test_ground_truth_round_trip(tmp_path):
    gt = make_ground_truth(Dimensions(3, 12, 6, 4, 6, 2), "ill", kappa=3, psi_x="fourier",
                           sigma=0.5, seed=11)
    save_ground_truth(gt, tmp_path / "truth")
    back = load_ground_truth(tmp_path / "truth")
    assert np.array_equal(back.b_x, gt.b_x) and np.array_equal(back.b_w, gt.b_w)
    assert np.array_equal(back.psi_x.A, gt.psi_x.A) and back.sigma == gt.sigma
    assert back.dims == gt.dims

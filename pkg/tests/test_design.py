import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from activerep.design import (
    ClippedEig,
    DesignProblem,
    RankDeficientError,
    SamplingPlan,
    SingularDesignError,
    adaptive_source_search,
    budget_target_aware,
    clip_target_covariance,
    default_clip_threshold,
    design_objective,
    frank_wolfe_design,
    solve_ball_closed_form,
    write_plans_csv,
)
from activerep.model import TaskSpace, apply_feature, identity_feature, pendulum_poly_feature

from .oracles_ref import ball_points, feasible_perturbations, grid_design_optimum

seeds = st.integers(0, 2**31 - 1)


def random_psd(rng, k):
    G = rng.standard_normal((k, k))
    return G @ G.T


class TestClip:
    def test_drops_tiny_eigenvalue(self):
        c = clip_target_covariance(np.diag([1.0, 1e-9]), 1e-3)
        assert c.m == 1 and c.values[0] == pytest.approx(1.0)
        assert abs(abs(c.vectors[0, 0]) - 1.0) < 1e-12

    @pytest.mark.parametrize("k", [2, 3, 5])
    def test_uniform_target(self, k):
        c = clip_target_covariance(np.eye(k) / k, 0.5 / k)
        assert c.m == k and np.allclose(c.values, 1.0 / k)

    @given(seeds)
    def test_full_reconstruction(self, seed):
        S = random_psd(np.random.default_rng(seed), 4)
        c = clip_target_covariance(S, 0.0)
        assert np.allclose((c.vectors * c.values) @ c.vectors.T, S, atol=1e-9)

    @given(seeds, st.floats(0, 5), st.floats(0, 5))
    def test_monotone_in_gamma(self, seed, g1, g2):
        S = random_psd(np.random.default_rng(seed), 5)
        lo, hi = sorted((g1, g2))
        assert clip_target_covariance(S, hi).m <= clip_target_covariance(S, lo).m

    def test_all_clipped_is_empty(self):
        assert clip_target_covariance(np.eye(2) * 0.1, 1.0).m == 0

    def test_rejects_asymmetric(self):
        with pytest.raises(ValueError):
            clip_target_covariance(np.array([[1.0, 0.1], [0.0, 1.0]]), 0.0)


class TestClosedForm:
    def test_identity_map(self):
        c = ClippedEig(np.array([[1.0], [0.0]]), np.array([0.25]), 0.0)
        w_prime, tasks = solve_ball_closed_form(np.eye(2), c)
        assert np.allclose(w_prime[:, 0], [0.5, 0.0]) and np.allclose(tasks, w_prime)

    @pytest.mark.parametrize("k,d", [(2, 8), (4, 80), (3, 10)])
    def test_uniform_case_norm(self, k, d, rng):
        Q, _ = np.linalg.qr(rng.standard_normal((d, k)))
        B = math.sqrt(d / k) * Q.T
        c = clip_target_covariance(np.eye(k) / k, 0.5 / k)
        w_prime, _ = solve_ball_closed_form(B, c)
        assert np.allclose(np.sum(w_prime**2, axis=0), 1.0 / d, atol=1e-9)

    @given(seeds)
    def test_constraint_and_null_space(self, seed):
        rng = np.random.default_rng(seed)
        B = rng.standard_normal((3, 7))
        c = clip_target_covariance(random_psd(rng, 3), 0.0)
        w_prime, tasks = solve_ball_closed_form(B, c)
        T = c.targets()
        assert np.all(np.linalg.norm(B @ w_prime - T, axis=0)
                      <= 1e-8 * (1 + np.linalg.norm(T, axis=0)))
        null = np.linalg.svd(B)[2][3:].T
        assert np.max(np.abs(null.T @ w_prime)) <= 1e-8 * max(1.0, np.abs(w_prime).max())
        assert np.all(np.linalg.norm(tasks, axis=0) <= 1 + 1e-12)

    def test_brute_force_minimality(self, rng):
        B = rng.standard_normal((2, 5))
        c = clip_target_covariance(random_psd(rng, 2), 0.0)
        w_prime, _ = solve_ball_closed_form(B, c)
        for i in range(c.m):
            V = feasible_perturbations(B, w_prime[:, i], 10_000, rng)
            assert np.max(np.linalg.norm(V @ B.T - B @ w_prime[:, i], axis=1)) < 1e-6
            assert np.linalg.norm(w_prime[:, i]) <= np.linalg.norm(V, axis=1).min()

    def test_projection_only_outside_ball(self):
        c = ClippedEig(np.eye(2), np.array([4.0, 0.01]), 0.0)
        w_prime, tasks = solve_ball_closed_form(np.eye(2), c)
        assert np.allclose(tasks[:, 0], [1.0, 0.0])
        assert np.allclose(tasks[:, 1], w_prime[:, 1])

    def test_rank_deficient(self):
        c = ClippedEig(np.eye(2)[:, :1], np.ones(1), 0.0)
        with pytest.raises(RankDeficientError):
            solve_ball_closed_form(np.array([[1.0, 0.0], [2.0, 0.0]]), c)

    def test_empty_clip(self):
        c = ClippedEig(np.zeros((2, 0)), np.zeros(0), 1.0)
        w_prime, tasks = solve_ball_closed_form(np.eye(2), c)
        assert w_prime.shape == (2, 0)

    @given(seeds, st.integers(20, 2000))
    def test_exploitation_trace_bound(self, seed, n2):
        rng = np.random.default_rng(seed)
        B = rng.standard_normal((3, 6))
        c = clip_target_covariance(random_psd(rng, 3), 1e-3)
        w_prime, tasks = solve_ball_closed_form(B, c, radius=np.inf)
        m = c.m
        # each column sampled n2 / m times
        mom = sum(n2 / m * np.outer(w, w) for w in w_prime.T)
        # the information matrix may have rank m < 3, so use the pseudoinverse
        lhs = np.trace(np.linalg.pinv(B @ mom @ B.T, rcond=1e-10, hermitian=True)
                       @ B @ w_prime @ w_prime.T @ B.T)
        assert lhs == pytest.approx(m * m / n2, rel=1e-6)


class TestBudget:
    def test_arithmetic(self):
        assert budget_target_aware(np.array([[1.0]]), 0.25, 8) == (128, [128])

    def test_uniform_case(self):
        k, d, eps = 4, 80, 0.125
        W = np.full((d, k), 0.0)
        W[:k, :k] = np.eye(k) / math.sqrt(d)
        total, per = budget_target_aware(W, eps, 8)
        assert total == math.ceil(k * 8 / eps**2 / d)
        assert len(per) == k

    @given(st.floats(1e-3, 1.0), st.floats(0.01, 2.0))
    def test_eps_halving_quadruples(self, eps, norm):
        W = np.array([[norm]])
        t1, _ = budget_target_aware(W, eps, 8)
        t2, _ = budget_target_aware(W, eps / 2, 8)
        assert abs(t2 - 4 * t1) <= 4

    def test_empty(self):
        assert budget_target_aware(np.zeros((3, 0)), 0.5, 8) == (0, [])

    def test_bad_eps(self):
        with pytest.raises(ValueError):
            budget_target_aware(np.ones((1, 1)), 0.0, 8)

    def test_default_threshold(self):
        assert default_clip_threshold(2, 8, 4, 64) == pytest.approx(8 * 16**1.5 * 0.25)


class TestPlan:
    @given(st.lists(st.floats(0.01, 1.0), min_size=1, max_size=8), st.integers(1, 10_000))
    def test_weighted_rounding(self, weights, total):
        tasks = np.eye(8)[: len(weights)]
        plan = SamplingPlan.weighted(tasks, weights, total)
        assert plan.total_budget <= plan.spent <= total + len(weights)
        assert np.isclose(plan.weights.sum(), 1.0)

    def test_uniform(self):
        plan = SamplingPlan.uniform(np.eye(3), 10)
        assert plan.per_task_budget == [4, 4, 4]

    def test_csv(self, tmp_path):
        p = tmp_path / "plans.csv"
        write_plans_csv(p, [(1, "explore", SamplingPlan.uniform(np.eye(2), 4))])
        lines = p.read_text().splitlines()
        assert lines[0] == "epoch,stage,w0,w1,budget" and len(lines) == 3


class TestFrankWolfe:
    def test_single_direction_target(self, rng):
        # f1 is the only candidate reaching the unit circle, so it is a vertex
        # of the symmetrised candidate hull and the c-optimal design is a point mass
        C = 0.5 * ball_points(rng, 6, 2)
        C[0] = [0.8, 0.6]
        f1 = C[0]
        q = frank_wolfe_design(DesignProblem(lambda w: w, np.outer(f1, f1)), C, iters=500)
        assert q[0] >= 0.99

    def test_orthonormal_basis_uniform(self):
        q = frank_wolfe_design(DesignProblem(lambda w: w, np.eye(3)), np.eye(3), iters=50)
        assert np.allclose(q, 1 / 3, atol=1e-9)

    @pytest.mark.parametrize("seed", range(5))
    def test_eight_candidates_grid(self, seed):
        rng = np.random.default_rng(seed)
        C = ball_points(rng, 8, 2)
        F = np.array(C)
        q = frank_wolfe_design(DesignProblem(lambda w: w, np.eye(2)), C, iters=300)
        assert design_objective(F, q, np.eye(2)) <= 1.05 * grid_design_optimum(F, np.eye(2))

    @given(seeds)
    def test_descent_and_simplex(self, seed):
        rng = np.random.default_rng(seed)
        C = ball_points(rng, 10, 3)
        G = rng.standard_normal((3, 3))
        hist = []
        q = frank_wolfe_design(DesignProblem(lambda w: w, G @ G.T), C, iters=40, history=hist)
        assert np.all(np.diff(hist) <= 1e-9 * max(abs(hist[0]), 1.0))
        assert q.sum() == pytest.approx(1.0) and np.all(q >= 0)

    def test_singular_start(self):
        C = np.array([[1.0, 0.0], [2.0, 0.0]])
        with pytest.raises(SingularDesignError) as exc:
            frank_wolfe_design(DesignProblem(lambda w: w, np.eye(2)), C)
        assert exc.value.rank == 1

    def test_rejects_bad_target(self):
        with pytest.raises(ValueError):
            DesignProblem(lambda w: w, np.array([[1.0, 2.0], [0.0, 1.0]]))
        with pytest.raises(ValueError):
            DesignProblem(lambda w: w, -np.eye(2))

    def test_iters_positive(self):
        with pytest.raises(ValueError):
            frank_wolfe_design(DesignProblem(lambda w: w, np.eye(2)), np.eye(2), iters=0)


class TestAdaptiveSearch:
    def test_planted_solution(self):
        psi = identity_feature(4)
        hits = 0
        for seed in range(20):
            rng = np.random.default_rng(seed)
            B = rng.standard_normal((2, 4))
            w_star = ball_points(rng, 1, 4)[0] * 0.8
            t = B @ w_star
            w = adaptive_source_search(psi, B, t, seed=seed)
            hits += np.linalg.norm(B @ w - t) <= 0.05 * np.linalg.norm(t)
        assert hits >= 18

    def test_degenerate_single_point(self):
        psi = identity_feature(3)
        space = TaskSpace.ball(3)
        w = adaptive_source_search(psi, np.eye(3)[:2], np.zeros(2), rounds=1, pool=1, seed=4,
                                   space=space)
        expected = space.sample_uniform(np.random.default_rng(4), 1)[0]
        assert np.array_equal(w, expected)

    def test_pendulum_rounds_improve(self):
        psi = pendulum_poly_feature()
        space = TaskSpace.ball(6, axes=range(5), radius=1.5)
        gains = []
        for seed in range(20):
            rng = np.random.default_rng(seed)
            B = rng.standard_normal((3, psi.output_dim))
            w_star = space.sample_uniform(rng, 1)[0]
            t = B @ apply_feature(psi, w_star)
            objs = [np.linalg.norm(B @ apply_feature(psi, adaptive_source_search(
                psi, B, t, rounds=r, pool=64, seed=seed, space=space)) - t) for r in (1, 5)]
            gains.append(objs[0] - objs[1])
        assert np.median(gains) > 0

    def test_argument_checks(self):
        psi = identity_feature(2)
        with pytest.raises(ValueError):
            adaptive_source_search(psi, np.eye(2), np.zeros(2), rounds=0)
        with pytest.raises(ValueError):
            adaptive_source_search(psi, np.eye(3), np.zeros(2))

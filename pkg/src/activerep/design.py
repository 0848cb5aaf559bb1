"""Optimal-design subproblems used to pick source tasks."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy import optimize

from .model import FeatureOperator, TaskSpace, apply_feature

__all__ = [
    "ClippedEig",
    "SamplingPlan",
    "DesignProblem",
    "RankDeficientError",
    "SingularDesignError",
    "clip_target_covariance",
    "solve_ball_closed_form",
    "design_objective",
    "frank_wolfe_design",
    "adaptive_source_search",
    "budget_target_aware",
    "default_clip_threshold",
    "write_plans_csv",
]


class RankDeficientError(ValueError):
    """The estimated source map lost rank; more exploration is needed."""


class SingularDesignError(ValueError):
    def __init__(self, rank, k):
        super().__init__(f"moment matrix is singular at the start: rank {rank} < {k}")
        self.rank = rank


@dataclass(frozen=True, eq=False)
class ClippedEig:
    vectors: np.ndarray
    values: np.ndarray
    gamma: float

    @property
    def m(self) -> int:
        return int(self.values.shape[0])

    def targets(self):
        """Columns u_i * sqrt(lambda_i)."""
        return self.vectors * np.sqrt(self.values)


@dataclass(eq=False)
class SamplingPlan:
    tasks: np.ndarray            # one task vector per row
    weights: np.ndarray
    total_budget: int
    per_task_budget: list[int]

    @classmethod
    def uniform(cls, tasks, total_budget):
        tasks = np.atleast_2d(np.asarray(tasks, dtype=float))
        m = tasks.shape[0]
        if m == 0 or total_budget <= 0:
            return cls(tasks.reshape(0, tasks.shape[-1]), np.zeros(0), 0, [])
        per = math.ceil(total_budget / m)
        return cls(tasks, np.full(m, 1.0 / m), int(total_budget), [per] * m)

    @classmethod
    def weighted(cls, tasks, weights, total_budget):
        tasks = np.atleast_2d(np.asarray(tasks, dtype=float))
        weights = np.asarray(weights, dtype=float)
        weights = weights / weights.sum()
        per = [int(math.ceil(q * total_budget)) for q in weights]
        return cls(tasks, weights, int(total_budget), per)

    @property
    def spent(self) -> int:
        return int(sum(self.per_task_budget))


@dataclass(frozen=True, eq=False)
class DesignProblem:
    f_map: object
    target_mat: np.ndarray
    space: TaskSpace | None = None

    def __post_init__(self):
        A = np.asarray(self.target_mat, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError("target matrix must be square")
        if np.max(np.abs(A - A.T)) > 1e-10:
            raise ValueError("target matrix must be symmetric")
        if np.linalg.eigvalsh(A).min() < -1e-10:
            raise ValueError("target matrix must be PSD")
        object.__setattr__(self, "target_mat", A)


def default_clip_threshold(k, d_w, d_x, n1, const=8.0):
    return const * (k * d_w) ** 1.5 * math.sqrt(d_x / n1)


def clip_target_covariance(sigma_hat, gamma) -> ClippedEig:
    """Eigenpairs of ``sigma_hat`` with eigenvalue at least ``gamma``, descending."""
    S = np.asarray(sigma_hat, dtype=float)
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    if np.max(np.abs(S - S.T), initial=0.0) > 1e-8:
        raise ValueError("target covariance must be symmetric")
    vals, vecs = np.linalg.eigh(0.5 * (S + S.T))
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    keep = (vals >= gamma) & (vals > 0)
    return ClippedEig(vecs[:, keep], vals[keep], float(gamma))


def solve_ball_closed_form(b_hat_source, clipped: ClippedEig, rank_tol=1e-8, radius=1.0):
    """Minimum-norm preimages of ``u_i sqrt(lambda_i)`` and their ball projections.

    Returns ``(w_prime, tasks)``, both ``d x m``.  Minimisers inside the ball
    are kept as they are; only those outside are scaled back to the sphere.
    """
    B = np.asarray(b_hat_source, dtype=float)
    k, d = B.shape
    if clipped.m == 0:
        return np.zeros((d, 0)), np.zeros((d, 0))
    U, s, Vt = np.linalg.svd(B, full_matrices=False)
    if s.shape[0] < k or s[-1] <= rank_tol * max(s[0], 1.0):
        raise RankDeficientError(
            f"estimated source map is rank deficient (sigma_min={s[-1]:.3e}); re-explore"
        )
    T = clipped.targets()
    w_prime = Vt.T @ ((U.T @ T) / s[:, None])
    resid = np.linalg.norm(B @ w_prime - T, axis=0)
    scale = 1.0 + np.linalg.norm(T, axis=0)
    if np.any(resid > 1e-8 * scale):
        raise RankDeficientError("minimum-norm solve failed to meet the constraint")
    norms = np.linalg.norm(w_prime, axis=0)
    tasks = w_prime / np.maximum(1.0, norms / radius)
    return w_prime, tasks


def budget_target_aware(w_prime_cols, eps_j, beta3):
    """Total stage-3 budget and its uniform split over the columns of ``w_prime_cols``."""
    W = np.asarray(w_prime_cols, dtype=float)
    if eps_j <= 0:
        raise ValueError("eps_j must be positive")
    if W.ndim != 2 or W.shape[1] == 0:
        return 0, []
    m = W.shape[1]
    peak = float(np.max(np.sum(W * W, axis=0)))
    total = math.ceil(m * beta3 * peak / eps_j**2 - 1e-9)
    per = math.ceil(total / m)
    return int(total), [per] * m


def _features(problem, candidates):
    return np.array([np.asarray(problem.f_map(c), dtype=float) for c in candidates])


def design_objective(F, q, A):
    """lambda_max(M(q)^{-1} A) with M(q) = sum_i q_i f_i f_i^T."""
    M = (F.T * q) @ F
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        return math.inf
    # eigenvalues of M^{-1} A equal those of L^{-1} A L^{-T}
    Li = np.linalg.solve(L, np.eye(L.shape[0]))
    C = Li @ A @ Li.T
    return float(np.linalg.eigvalsh(0.5 * (C + C.T))[-1])


def _eig_parts(F, q, A_half):
    M = (F.T * q) @ F
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        return None
    Minv = scipy.linalg.cho_solve((L, True), np.eye(M.shape[0]))
    C = A_half @ Minv @ A_half
    vals, vecs = np.linalg.eigh(0.5 * (C + C.T))
    return Minv, vals, vecs


def _smoothed(vals, mu):
    """Log-sum-exp upper surrogate of lambda_max at temperature ``mu``."""
    top = vals[-1]
    return float(top + mu * np.log(np.sum(np.exp((vals - top) / mu))))


def _smoothed_value(F, q, A_half, mu):
    parts = _eig_parts(F, q, A_half)
    return math.inf if parts is None else _smoothed(parts[1], mu)


def _smoothed_gradient(F, Minv, vals, vecs, A_half, mu):
    w = np.exp((vals - vals[-1]) / mu)
    w /= w.sum()
    # d lambda_j / d q_i = -(z_j^T A^{1/2} M^{-1} f_i)^2
    P = (F @ Minv @ A_half @ vecs) ** 2
    return -(P @ w)


def _psd_sqrt(A):
    vals, vecs = np.linalg.eigh(A)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def frank_wolfe_design(problem: DesignProblem, candidates, iters=200, tol=1e-9,
                       history=None):
    """Weights over ``candidates`` approximately minimising the design objective.

    Pairwise Frank-Wolfe on a log-sum-exp smoothing of the eigenvalues of
    ``A^{1/2} M(q)^{-1} A^{1/2}``.  The temperature starts at a tenth of the
    objective and halves whenever a step stops paying off, so the iterates
    track the nonsmooth optimum.  The best weights seen under the exact
    objective are returned and ``history`` records that running best.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    F = _features(problem, candidates)
    n, k = F.shape
    A = problem.target_mat
    if A.shape != (k, k):
        raise ValueError(f"target matrix must be {k}x{k}")
    rank = np.linalg.matrix_rank(F)
    if rank < k:
        raise SingularDesignError(rank, k)
    A_half = _psd_sqrt(A)
    q = np.full(n, 1.0 / n)
    best_q, best = q.copy(), design_objective(F, q, A)
    if history is not None:
        history.append(best)
    mu = 0.1 * max(best, 1e-300)
    floor = 1e-7 * max(best, 1e-300)
    for _ in range(iters):
        Minv, vals, vecs = _eig_parts(F, q, A_half)
        cur = _smoothed(vals, mu)
        g = _smoothed_gradient(F, Minv, vals, vecs, A_half, mu)
        to = int(np.argmin(g))
        active = np.flatnonzero(q > 0)
        away = int(active[np.argmax(g[active])])
        # Frank-Wolfe duality gap of the surrogate
        fw_gap = float(g @ q - g[to])
        moved = False
        if to != away and g[away] > g[to]:
            cap = q[away]

            def along(t, to=to, away=away):
                qq = q.copy()
                qq[to] += t
                qq[away] = max(qq[away] - t, 0.0)
                return min(_smoothed_value(F, qq, A_half, mu), 1e300)

            res = optimize.minimize_scalar(
                along, bounds=(0.0, cap), method="bounded",
                options={"xatol": 1e-7 * cap + 1e-15},
            )
            val, t = min((along(cap), cap), (float(res.fun), float(res.x)))
            if t > 0 and val < cur:
                q[to] += t
                q[away] = max(q[away] - t, 0.0)
                q /= q.sum()
                moved = True
        if not moved or fw_gap < mu:
            if mu < floor and (not moved or fw_gap < tol * max(abs(cur), 1.0)):
                break
            mu = max(0.5 * mu, 0.5 * floor)
        exact = design_objective(F, q, A)
        if exact < best:
            best, best_q = exact, q.copy()
        if history is not None:
            history.append(best)
    return best_q


def adaptive_source_search(psi_w: FeatureOperator, b_hat, target_vec, rounds=5,
                           pool=64, seed=None, space: TaskSpace | None = None):
    """Shrinking-ball random search for ``argmin_w ||b_hat psi_w(w) - target_vec||``."""
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    if pool < 1:
        raise ValueError("pool must be >= 1")
    b_hat = np.asarray(b_hat, dtype=float)
    t = np.asarray(target_vec, dtype=float)
    if b_hat.shape != (t.shape[0], psi_w.output_dim):
        raise ValueError("b_hat must be k x d_psi_w matching target_vec")
    if space is None:
        space = TaskSpace.ball(psi_w.input_dim)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    def objective(W):
        return np.linalg.norm(apply_feature(psi_w, W) @ b_hat.T - t, axis=1)

    best_w, best_val = None, math.inf
    radius = space.radius
    for _ in range(rounds):
        W = space.sample_uniform(rng, pool, center=best_w, radius=radius)
        vals = objective(W)
        i = int(np.argmin(vals))
        if vals[i] < best_val:
            best_w, best_val = W[i], float(vals[i])
        radius *= 0.5
    return best_w


def write_plans_csv(path, rows):
    """``rows`` are ``(epoch, stage, SamplingPlan)``; one CSV line per task."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        width = max((p.tasks.shape[1] for _, _, p in rows if p.tasks.size), default=0)
        wr.writerow(["epoch", "stage"] + [f"w{i}" for i in range(width)] + ["budget"])
        for epoch, stage, plan in rows:
            for task, budget in zip(plan.tasks, plan.per_task_budget):
                wr.writerow([epoch, stage] + [repr(float(v)) for v in task] + [budget])

"""Evaluation metrics: excess risk, subspace distances, design trace, task counts."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import TargetSpec, apply_feature, feature_second_moment, sample_mixture
from .oracles import finetune_target

__all__ = [
    "MetricsSnapshot",
    "excess_risk",
    "sin_angle",
    "dis_similarity",
    "design_trace",
    "long_term_task_count",
    "make_evaluator",
]


@dataclass
class MetricsSnapshot:
    er: float
    test_mse: float
    sin_angle: float = math.nan
    dis_similarity: float = math.nan
    design_trace: float = math.nan
    long_term_tasks: int = 0
    cumulative_budget: int = 0


def excess_risk(b_x_hat, env, target: TargetSpec, n_test=0, seed=None, exact=None,
                ridge=0.0):
    """Fine-tune a head on fresh mixed target data, then score it.

    With ``exact`` (default whenever ``env`` exposes the true model and a
    closed-form feature moment) the test error is the population value
    ``sum_m p_m (b - beta_m)^T E[psi psi^T] (b - beta_m) + sigma^2``;
    otherwise it is the mean squared error on ``n_test`` fresh mixed points.
    Returns ``(er, test_mse)`` with ``er = max(test_mse - sigma^2, 0)``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    z_target = sample_mixture(env, target, target.n_target, rng)
    w_avg = finetune_target(b_x_hat, z_target, ridge)
    coef = b_x_hat @ w_avg
    sigma2 = float(env.sigma) ** 2
    if exact is None:
        exact = hasattr(env, "regression_vector") and env.psi_x.kind in ("identity", "fourier")
    if exact:
        cov = feature_second_moment(env.psi_x)
        mse = sigma2
        for w0, p in zip(target.vectors, target.weights):
            diff = coef - env.regression_vector(w0)
            mse += p * float(diff @ cov @ diff)
    else:
        if n_test < 1:
            raise ValueError("n_test must be positive for the sampled estimate")
        test = sample_mixture(env, target, n_test, rng)
        sq = [np.sum((s.features @ coef - s.labels) ** 2) for s in test if s.n]
        mse = float(np.sum(sq) / n_test)
    return float(max(mse - sigma2, 0.0)), float(mse)


def _check_pair(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def sin_angle(b_hat, b_true):
    """Sine of the largest principal angle, ``||(I - B B^T) B_hat||_2``."""
    b_hat, b_true = _check_pair(b_hat, b_true)
    resid = b_hat - b_true @ (b_true.T @ b_hat)
    return float(min(np.linalg.norm(resid, ord=2), 1.0))


def dis_similarity(u, u_hat):
    """Worst column projection norm ``min_i ||u_i^T U_hat||``."""
    u, u_hat = _check_pair(u, u_hat)
    return float(min(np.min(np.linalg.norm(u.T @ u_hat, axis=1)), 1.0))


def design_trace(b_w, counts, target_cov):
    """``Tr((B sum_w n_w w w^T B^T)^{-1} B E[w0 w0^T] B^T)``; ``inf`` when singular.

    ``counts`` maps task vectors (tuples or arrays) to sample counts, or is a
    sequence of ``(w, n_w)`` pairs.
    """
    b_w = np.asarray(b_w, dtype=float)
    items = counts.items() if hasattr(counts, "items") else counts
    d = b_w.shape[1]
    moment = np.zeros((d, d))
    for w, n in items:
        w = np.asarray(w, dtype=float)
        moment += n * np.outer(w, w)
    M = b_w @ moment @ b_w.T
    T = b_w @ np.asarray(target_cov, dtype=float) @ b_w.T
    rank = np.linalg.matrix_rank(M)
    if rank < M.shape[0]:
        return math.inf
    return float(np.trace(np.linalg.solve(M, T)))


def long_term_task_count(trace, alpha=1.0, eps=None, threshold=None,
                         exclude_stages=("warmup",)):
    """Distinct tasks whose cumulative sample count reaches ``eps^-alpha``.

    ``trace`` is an :class:`~activerep.learner.ExperimentTrace` or any
    iterable of ``(task_key, stage, n)`` records.
    """
    if threshold is None:
        if eps is None:
            raise ValueError("give eps or threshold")
        threshold = eps ** (-alpha)
    records = trace.sample_records() if hasattr(trace, "sample_records") else trace
    totals = {}
    for key, stage, n in records:
        if stage in exclude_stages:
            continue
        totals[key] = totals.get(key, 0) + n
    return sum(1 for n in totals.values() if n >= threshold)


def make_evaluator(env, target: TargetSpec, eval_seed, n_test=0, alpha=1.0, eps=None,
                   ridge=0.0):
    """Callback ``(b_x_hat, trace) -> MetricsSnapshot`` used by the learner.

    Every call reuses the same evaluation seed, so estimates from different
    strategies and epochs see the same fine-tuning draw.
    """
    has_truth = hasattr(env, "b_x") and hasattr(env, "b_w")
    second = target.second_moment()

    def evaluate(b_x_hat, trace):
        er, mse = excess_risk(b_x_hat, env, target, n_test, seed=eval_seed, ridge=ridge)
        snap = MetricsSnapshot(er, mse, cumulative_budget=trace.cumulative_budget)
        if has_truth:
            snap.sin_angle = sin_angle(b_x_hat, env.b_x)
            snap.dis_similarity = dis_similarity(env.b_x, b_x_hat)
            if env.psi_w.kind == "identity":
                counts = [(np.asarray(k), n) for k, n in trace.task_counts().items()]
                snap.design_trace = design_trace(env.b_w, counts, second)
        e = eps if eps is not None else _last_eps(trace)
        snap.long_term_tasks = long_term_task_count(trace, alpha, eps=e)
        return snap

    return evaluate


def _last_eps(trace):
    recs = getattr(trace, "records", [])
    return recs[-1].eps if recs else 1.0

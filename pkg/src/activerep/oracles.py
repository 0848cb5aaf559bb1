"""Offline training oracles for the bilinear model.

All representation learners work on per-task sufficient statistics
(``Phi^T Phi``, ``Phi^T y``, ``y^T y``), which keeps the cost independent of
the number of samples once those are accumulated.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .model import TaskSample

__all__ = [
    "ModelEstimate",
    "TrainConfig",
    "TaskStats",
    "DivergenceError",
    "task_stats",
    "fit_task_head",
    "assemble_bw",
    "assemble_bw_lstsq",
    "alt_min_representation",
    "spectral_init",
    "erm_loss_and_grad",
    "joint_erm",
    "finetune_target",
    "orthonormalize",
]

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    am_iters: int = 25
    gd_steps: int = 500
    gd_lr: float = 1.0
    batch: int = 0
    ridge: float = 0.0
    seed: int = 0
    am_tol: float = 1e-10

    def __post_init__(self):
        if self.am_iters < 1 or self.gd_steps < 0:
            raise ValueError("iteration counts must be positive")
        if self.gd_lr < 0:
            raise ValueError("gd_lr must be non-negative")
        if self.ridge < 0 or self.batch < 0:
            raise ValueError("ridge and batch must be non-negative")


@dataclass(eq=False)
class ModelEstimate:
    b_x_hat: np.ndarray
    b_w_source_hat: np.ndarray | None = None
    b_w_target_hat: np.ndarray | None = None
    heads: np.ndarray | None = None          # k x T, one column per training task
    loss_history: list[float] = field(default_factory=list)


@dataclass(eq=False)
class TaskStats:
    S: np.ndarray
    r: np.ndarray
    c: float
    n: int


def _features(sample: TaskSample):
    if sample.features is None:
        raise ValueError("TaskSample has no lifted features")
    return sample.features


def task_stats(sample: TaskSample) -> TaskStats:
    phi = _features(sample)
    y = sample.labels
    return TaskStats(phi.T @ phi, phi.T @ y, float(y @ y), sample.n)


def orthonormalize(B, heads=None, tol=1e-12):
    """QR-orthonormalise columns of ``B``; ``heads`` are mapped so products are preserved."""
    Q, R = np.linalg.qr(B)
    d = np.abs(np.diag(R))
    if d.size == 0 or d.min() <= tol * max(d.max(), 1.0):
        raise np.linalg.LinAlgError("representation collapsed to lower rank")
    sign = np.sign(np.diag(R))
    Q, R = Q * sign, R * sign[:, None]
    if heads is None:
        return Q
    return Q, R @ heads


def fit_task_head(b_x_hat, sample: TaskSample, ridge=0.0):
    """Least-squares head for one task on top of a frozen representation."""
    Z = _features(sample) @ b_x_hat
    y = sample.labels
    k = Z.shape[1]
    if ridge > 0:
        Z = np.vstack([Z, np.sqrt(ridge) * np.eye(k)])
        y = np.concatenate([y, np.zeros(k)])
    sol, _, rank, _ = np.linalg.lstsq(Z, y, rcond=None)
    if rank < k:
        raise np.linalg.LinAlgError(f"singular head regression (rank {rank} < {k})")
    return sol


def assemble_bw(heads, vs, tol=1e-8):
    """``sum_i heads_i v_i^T`` for an orthonormal set ``vs``."""
    H = np.column_stack([np.asarray(h, dtype=float) for h in heads])
    V = np.column_stack([np.asarray(v, dtype=float) for v in vs])
    if H.shape[1] != V.shape[1]:
        raise ValueError("need one head per task vector")
    gram = V.T @ V
    if np.max(np.abs(gram - np.eye(V.shape[1]))) > tol:
        raise ValueError("task vectors are not orthonormal")
    return H @ V.T


def assemble_bw_lstsq(heads, vs):
    """Minimum-norm ``B`` with ``B v_i = heads_i`` (pseudoinverse of the task set)."""
    H = np.column_stack([np.asarray(h, dtype=float) for h in heads])
    V = np.column_stack([np.asarray(v, dtype=float) for v in vs])
    return H @ np.linalg.pinv(V)


def _random_orthonormal(d, k, rng):
    Q, _ = np.linalg.qr(rng.standard_normal((d, k)))
    return Q


def spectral_init(samples, k, rng=None):
    """Top-k eigenvectors of the mean-adjusted label-weighted feature moment."""
    phi = np.vstack([_features(s) for s in samples])
    y = np.concatenate([s.labels for s in samples])
    N = y.shape[0]
    y2 = y * y
    M = (phi.T * y2) @ phi / N - y2.mean() * (phi.T @ phi) / N
    vals, vecs = np.linalg.eigh(0.5 * (M + M.T))
    vals, vecs = vals[::-1], vecs[:, ::-1]
    gap = vals[k - 1] - vals[k] if vals.shape[0] > k else np.inf
    if not gap > 1e-6:
        warnings.warn("spectral gap below 1e-6; falling back to a random orthonormal init")
        rng = rng if rng is not None else np.random.default_rng(0)
        return _random_orthonormal(phi.shape[1], k, rng)
    return vecs[:, :k]


def _heads_given_b(B, stats, ridge=0.0):
    k = B.shape[1]
    H = np.empty((k, len(stats)))
    for t, st in enumerate(stats):
        G = B.T @ st.S @ B + ridge * np.eye(k)
        H[:, t] = scipy.linalg.lstsq(G, B.T @ st.r)[0]
    return H


def _b_given_heads(H, stats, d):
    k = H.shape[0]
    G = np.zeros((k * d, k * d))
    rhs = np.zeros(k * d)
    for t, st in enumerate(stats):
        h = H[:, t]
        G += np.kron(np.outer(h, h), st.S)
        rhs += np.kron(h, st.r)
    sol = scipy.linalg.lstsq(G, rhs)[0]
    return sol.reshape(k, d).T


def _objective(B, H, stats):
    total = 0.0
    for t, st in enumerate(stats):
        v = B @ H[:, t]
        total += st.c - 2.0 * v @ st.r + v @ st.S @ v
    return total


def alt_min_representation(samples, k, cfg: TrainConfig | None = None, init=None,
                           history=None):
    """Alternating least squares for the shared representation.

    Heads are refit per task given ``B``; ``B`` is refit from the stacked
    problem given the heads and then re-orthonormalised.  Each round is two
    exact minimisations, so the squared residual never increases.
    """
    cfg = cfg or TrainConfig()
    if len(samples) < 1:
        raise ValueError("need at least one task")
    stats = [s if isinstance(s, TaskStats) else task_stats(s) for s in samples]
    d = stats[0].S.shape[0]
    if init is None:
        rng = np.random.default_rng(cfg.seed)
        B = spectral_init(samples, k, rng)
    else:
        B = orthonormalize(np.asarray(init, dtype=float))
    prev = np.inf
    for _ in range(cfg.am_iters):
        H = _heads_given_b(B, stats, cfg.ridge)
        B = _b_given_heads(H, stats, d)
        B, H = orthonormalize(B, H)
        obj = _objective(B, H, stats)
        if history is not None:
            history.append(obj)
        if prev - obj <= cfg.am_tol * max(abs(obj), 1e-300):
            break
        prev = obj
    return B


def _stack(stats):
    return (np.array([st.S for st in stats]), np.array([st.r for st in stats]),
            np.array([st.c for st in stats]), sum(st.n for st in stats))


def erm_loss_and_grad(B, H, stats):
    """Mean squared loss over all tasks and its gradients w.r.t. ``B`` and ``H``."""
    S, r, c, N = stats if isinstance(stats, tuple) else _stack(stats)
    V = B @ H                                   # d x T, column t is B h_t
    SV = np.matmul(S, V.T[:, :, None])[:, :, 0].T
    loss = float(np.sum(c) - 2.0 * np.sum(V * r.T) + np.sum(V * SV))
    resid = SV - r.T
    gB = 2.0 * resid @ H.T
    gH = 2.0 * B.T @ resid
    return loss / N, gB / N, gH / N


def _lipschitz_b(H, stats, N, v0=None, iters=100, rtol=1e-6):
    """Largest eigenvalue of the ``B``-block Hessian ``(2/N) sum_t h_t h_t^T (x) S_t``.

    Matrix-free power iteration; returns ``(value, eigvec)`` so the next call
    can warm start.  A 2% safety margin covers the residual underestimate.
    """
    S = stats[0] if isinstance(stats, tuple) else np.array([st.S for st in stats])
    k, d = H.shape[0], S.shape[1]
    rng = np.random.default_rng(0)
    X = rng.standard_normal((d, k)) if v0 is None else np.array(v0, dtype=float)
    X /= np.linalg.norm(X)
    lam = 0.0
    for _ in range(iters):
        # apply X -> sum_t S_t X h_t h_t^T
        Y = np.matmul(S, (X @ H).T[:, :, None])[:, :, 0].T @ H.T
        new = float(np.sum(X * Y))
        nrm = np.linalg.norm(Y)
        if nrm == 0.0:
            return 0.0, X
        X = Y / nrm
        if abs(new - lam) <= rtol * abs(new):
            lam = new
            break
        lam = new
    return 1.02 * 2.0 / N * max(lam, nrm), X


def joint_erm(samples, init: ModelEstimate | None = None, cfg: TrainConfig | None = None,
              k=None) -> ModelEstimate:
    """Gradient descent on the joint squared loss with per-task heads.

    Block gradient steps (heads, then ``B``) each scaled by ``gd_lr`` over
    the exact block Lipschitz constant, so ``gd_lr <= 1`` is monotone.
    """
    cfg = cfg or TrainConfig()
    if not samples:
        raise ValueError("joint_erm needs at least one task")
    stats = [s if isinstance(s, TaskStats) else task_stats(s) for s in samples]
    N = sum(st.n for st in stats)
    if init is not None:
        B = np.array(init.b_x_hat, dtype=float)
    else:
        if k is None:
            raise ValueError("k is required without an initial estimate")
        B = spectral_init(samples, k, np.random.default_rng(cfg.seed))
    k = B.shape[1]
    if init is not None and init.heads is not None and init.heads.shape == (k, len(stats)):
        H = np.array(init.heads, dtype=float)
    else:
        H = _heads_given_b(B, stats, cfg.ridge)
    if cfg.batch:
        return _joint_erm_minibatch(samples, B, H, cfg)

    packed = _stack(stats)
    loss0 = erm_loss_and_grad(B, H, packed)[0]
    history = [loss0]
    # round-off floor so a realizable (zero-loss) start is not flagged
    floor = 1e-12 * (sum(st.c for st in stats) / N + 1.0)
    vec = None
    for _ in range(cfg.gd_steps):
        if cfg.gd_lr == 0:
            break
        _, _, gH = erm_loss_and_grad(B, H, packed)
        Lh = 2.0 / N * np.linalg.eigvalsh(B.T @ packed[0] @ B)[:, -1]
        H = H - cfg.gd_lr * gH / np.where(Lh > 0, Lh, np.inf)
        _, gB, _ = erm_loss_and_grad(B, H, packed)
        L, vec = _lipschitz_b(H, packed, N, vec)
        if L > 0:
            B = B - cfg.gd_lr / L * gB
        loss = erm_loss_and_grad(B, H, packed)[0]
        history.append(loss)
        if not np.isfinite(loss) or loss > 10.0 * max(loss0, 0.0) + floor:
            raise DivergenceError(
                f"joint ERM diverged: loss {loss:.4g} vs initial {loss0:.4g} (lr={cfg.gd_lr})"
            )
        if abs(history[-2] - loss) <= 1e-15 * max(abs(loss), floor):
            break
    B, H = orthonormalize(B, H)
    return ModelEstimate(B, heads=H, loss_history=history)


def _joint_erm_minibatch(samples, B, H, cfg):
    rng = np.random.default_rng(cfg.seed)
    phi = np.vstack([_features(s) for s in samples])
    y = np.concatenate([s.labels for s in samples])
    task = np.concatenate([np.full(s.n, t) for t, s in enumerate(samples)])
    N = y.shape[0]
    scale = np.linalg.norm(phi, ord=2) ** 2 / N * max(np.max(np.sum(H * H, axis=0)), 1.0)
    step = cfg.gd_lr / (2.0 * max(scale, 1e-12))

    def full_loss():
        pred = np.einsum("ij,ij->i", phi @ B, H[:, task].T)
        return float(np.mean((pred - y) ** 2))

    loss0 = full_loss()
    history = [loss0]
    floor = 1e-12 * (float(np.mean(y * y)) + 1.0)
    for _ in range(cfg.gd_steps):
        idx = rng.choice(N, size=min(cfg.batch, N), replace=False)
        P, Ht, yt, tt = phi[idx], H[:, task[idx]], y[idx], task[idx]
        Z = P @ B
        resid = np.einsum("ij,ji->i", Z, Ht) - yt
        gB = 2.0 * P.T @ (resid[:, None] * Ht.T) / idx.size
        gZ = 2.0 * Z * resid[:, None] / idx.size
        gH = np.zeros_like(H)
        np.add.at(gH.T, tt, gZ)
        B = B - step * gB
        H = H - step * gH
        loss = full_loss()
        history.append(loss)
        if not np.isfinite(loss) or loss > 10.0 * max(loss0, 0.0) + floor:
            raise DivergenceError(f"mini-batch ERM diverged: loss {loss:.4g}")
    B, H = orthonormalize(B, H)
    return ModelEstimate(B, heads=H, loss_history=history)


def finetune_target(b_x_hat, z_target, ridge=0.0):
    """Single head fit on pooled target data against a frozen representation."""
    samples = [z_target] if isinstance(z_target, TaskSample) else list(z_target)
    phi = np.vstack([_features(s) for s in samples])
    y = np.concatenate([s.labels for s in samples])
    pooled = TaskSample(np.zeros(0), np.zeros((y.shape[0], 0)), y, phi)
    return fit_task_head(b_x_hat, pooled, ridge)

"""Independent reference computations used as test oracles."""

import numpy as np
from scipy.spatial import ConvexHull


def grid_design_optimum(F, A, res=100):
    """Brute-force min of lambda_max(M(q)^{-1} A) for 2-dim features.

    Moment matrices of 2-dim features live in R^3 (m11, m12, m22).  The
    objective decreases in the Loewner order, so its minimum over the convex
    hull of the candidate moments lies on a hull facet; every facet is a
    triangle, and each is searched on a barycentric grid of step ``1/res``.
    """
    P = np.stack([F[:, 0] ** 2, F[:, 0] * F[:, 1], F[:, 1] ** 2], axis=1)
    hull = ConvexHull(P)
    a = np.arange(res + 1) / res
    I, J = np.meshgrid(a, a, indexing="ij")
    keep = I + J <= 1 + 1e-12
    grid = np.stack([I[keep], J[keep], 1 - I[keep] - J[keep]], axis=1).clip(0)
    best = np.inf
    for simplex in hull.simplices:
        M = grid @ P[simplex]
        det = M[:, 0] * M[:, 2] - M[:, 1] ** 2
        ok = det > 1e-14
        M, det = M[ok], det[ok]
        i11, i12, i22 = M[:, 2] / det, -M[:, 1] / det, M[:, 0] / det
        n11 = i11 * A[0, 0] + i12 * A[1, 0]
        n12 = i11 * A[0, 1] + i12 * A[1, 1]
        n21 = i12 * A[0, 0] + i22 * A[1, 0]
        n22 = i12 * A[0, 1] + i22 * A[1, 1]
        tr, dt = n11 + n22, n11 * n22 - n12 * n21
        lam = (tr + np.sqrt(np.clip(tr**2 - 4 * dt, 0, None))) / 2
        if lam.size:
            best = min(best, float(lam.min()))
    return best


def ball_points(rng, n, d):
    W = rng.standard_normal((n, d))
    return W / np.maximum(1.0, np.linalg.norm(W, axis=1, keepdims=True))


def feasible_perturbations(B, w, n, rng, scale=1.0):
    """Random points of the affine set ``{v : B v = B w}``."""
    _, s, Vt = np.linalg.svd(B)
    null = Vt[np.sum(s > 1e-12):].T
    return w[None, :] + scale * rng.standard_normal((n, null.shape[1])) @ null.T


def sandwich_instance(rng, k, d):
    """Random ``(B_W, B_hat, M)`` satisfying the exploration-basis premise.

    The perturbation size is scaled so that
    ``8 ||B - B_hat|| ||B|| ||M|| <= lambda_min(B M B^T) / 2``.
    """
    B = rng.standard_normal((k, d))
    G = rng.standard_normal((d, d))
    M = G @ G.T / d + 0.5 * np.eye(d)
    lam = np.linalg.eigvalsh(B @ M @ B.T)[0]
    E = rng.standard_normal((k, d))
    bound = 0.5 * lam / (8 * np.linalg.norm(B, 2) * np.linalg.norm(M, 2))
    E *= rng.uniform(0.0, 1.0) * bound / np.linalg.norm(E, 2)
    return B, B + E, M


def direct_erm_loss(B, H, samples):
    """Mean squared residual computed from the raw samples."""
    total = sum(np.sum((s.features @ B @ H[:, t] - s.labels) ** 2)
                for t, s in enumerate(samples))
    return total / sum(s.n for s in samples)


def central_difference(fun, X, h=1e-6):
    G = np.zeros_like(X)
    for idx in np.ndindex(X.shape):
        E = np.zeros_like(X)
        E[idx] = h
        G[idx] = (fun(X + E) - fun(X - E)) / (2 * h)
    return G

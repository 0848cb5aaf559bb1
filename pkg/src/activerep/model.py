"""Task spaces, feature operators and the hidden bilinear ground truth.

Labels follow ``y = psi_x(x)^T B_X B_W psi_w(w) + xi`` with ``x ~ N(0, I)`` and
``xi ~ N(0, sigma^2)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "Dimensions",
    "TaskSpace",
    "FeatureOperator",
    "GroundTruthModel",
    "TaskSample",
    "TargetSpec",
    "identity_feature",
    "fourier_feature",
    "pendulum_poly_feature",
    "apply_feature",
    "feature_second_moment",
    "make_ground_truth",
    "sample_task",
    "sample_mixture",
    "save_ground_truth",
    "load_ground_truth",
    "PENDULUM_POLY_LAYOUT",
]

BALL_TOL = 1e-9


@dataclass(frozen=True)
class Dimensions:
    d_x: int
    d_psi_x: int
    d_w: int
    d_w_source: int
    d_psi_w: int
    k: int

    def __post_init__(self):
        for name in ("d_x", "d_psi_x", "d_w", "d_w_source", "d_psi_w", "k"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_w_source > self.d_w:
            raise ValueError(f"d_w_source={self.d_w_source} exceeds d_w={self.d_w}")
        if 2 * self.d_w_source < self.d_w:
            raise ValueError(
                f"d_w_source={self.d_w_source} must be at least half of d_w={self.d_w}"
            )
        if self.k > min(self.d_psi_x, self.d_psi_w):
            raise ValueError(
                f"k={self.k} exceeds min(d_psi_x={self.d_psi_x}, d_psi_w={self.d_psi_w})"
            )

    @property
    def d_w_target(self) -> int:
        return self.d_w - self.d_w_source


@dataclass(frozen=True)
class TaskSpace:
    """A ball (or one-hot set) living on a subset of coordinates of R^dim."""

    kind: str
    dim: int
    axes: tuple[int, ...]
    radius: float = 1.0

    def __post_init__(self):
        if self.kind not in ("ball", "one_hot"):
            raise ValueError(f"unknown task space kind {self.kind!r}")
        if any(a < 0 or a >= self.dim for a in self.axes):
            raise ValueError("task space axes out of range")

    @classmethod
    def ball(cls, dim, axes=None, radius=1.0):
        axes = tuple(range(dim)) if axes is None else tuple(int(a) for a in axes)
        return cls("ball", dim, axes, float(radius))

    def contains(self, w, tol=BALL_TOL) -> bool:
        w = np.asarray(w, dtype=float)
        if w.shape != (self.dim,):
            return False
        off = np.delete(w, list(self.axes))
        if off.size and np.max(np.abs(off)) > tol:
            return False
        sub = w[list(self.axes)]
        if self.kind == "ball":
            return float(np.linalg.norm(sub)) <= self.radius + tol
        nz = np.flatnonzero(np.abs(sub) > tol)
        return nz.size == 1 and abs(sub[nz[0]] - 1.0) <= tol

    def embed(self, sub):
        """Place coordinates given on ``axes`` into the ambient space."""
        sub = np.atleast_2d(np.asarray(sub, dtype=float))
        out = np.zeros((sub.shape[0], self.dim))
        out[:, list(self.axes)] = sub
        return out

    def restrict(self, w):
        w = np.asarray(w, dtype=float)
        return w[..., list(self.axes)]

    def project(self, w):
        """Radial projection onto the ball (identity for members)."""
        w = np.array(w, dtype=float)
        sub = self.restrict(w)
        norm = np.linalg.norm(sub)
        out = np.zeros(self.dim)
        out[list(self.axes)] = sub / max(1.0, norm / self.radius)
        return out

    def one_hot_basis(self):
        return self.embed(np.eye(len(self.axes)))

    def sample_uniform(self, rng, n, center=None, radius=None):
        """Uniform draws from the ball around ``center``, projected back into the space."""
        r = self.radius if radius is None else float(radius)
        m = len(self.axes)
        g = rng.standard_normal((n, m))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        g *= r * rng.random((n, 1)) ** (1.0 / m)
        if center is not None:
            g += self.restrict(center)
        norms = np.linalg.norm(g, axis=1, keepdims=True)
        g /= np.maximum(1.0, norms / self.radius)
        return self.embed(g)


@dataclass(frozen=True, eq=False)
class FeatureOperator:
    kind: str
    input_dim: int
    output_dim: int
    A: np.ndarray | None = None
    B: np.ndarray | None = None

    def __post_init__(self):
        if self.kind == "identity" and self.input_dim != self.output_dim:
            raise ValueError("identity feature requires output_dim == input_dim")
        if self.kind == "fourier":
            if self.A is None or self.B is None:
                raise ValueError("fourier feature needs A and B")
            if self.A.shape != (self.output_dim, self.input_dim) or self.B.shape != (
                self.output_dim,
            ):
                raise ValueError("fourier A/B shapes do not match dims")
        if self.kind == "pendulum_poly" and (self.input_dim, self.output_dim) != (6, 13):
            raise ValueError("pendulum_poly maps R^6 -> R^13")
        if self.kind not in ("identity", "fourier", "pendulum_poly"):
            raise ValueError(f"unknown feature kind {self.kind!r}")

    def __call__(self, v):
        return apply_feature(self, v)


def identity_feature(d):
    return FeatureOperator("identity", d, d)


def fourier_feature(d_in, d_out, rng, scale=1.0):
    A = scale * rng.standard_normal((d_out, d_in))
    B = rng.standard_normal(d_out)
    return FeatureOperator("fourier", d_in, d_out, A, B)


PENDULUM_POLY_LAYOUT = (
    "c_x", "c_y", "g_hat", "alpha1", "alpha2",
    "cx*cy", "cx^2", "cx^2*cy", "cx^3", "cy^2", "cy^2*cx", "cy^3", "dummy",
)


def pendulum_poly_feature():
    return FeatureOperator("pendulum_poly", 6, 13)


def _pendulum_poly(w):
    cx, cy, a1, a2, gh, dummy = (w[:, i] for i in range(6))
    return np.stack(
        [cx, cy, gh, a1, a2,
         cx * cy, cx**2, cx**2 * cy, cx**3, cy**2, cy**2 * cx, cy**3,
         dummy],
        axis=1,
    )


def apply_feature(op: FeatureOperator, v):
    """Lift a vector, or each row of a matrix, through ``op``."""
    v = np.asarray(v, dtype=float)
    single = v.ndim == 1
    rows = np.atleast_2d(v)
    if rows.shape[1] != op.input_dim:
        raise ValueError(
            f"{op.kind} feature expects input dim {op.input_dim}, got {rows.shape[1]}"
        )
    if op.kind == "identity":
        out = rows.copy()
    elif op.kind == "fourier":
        out = np.cos(rows @ op.A.T + op.B)
    else:
        out = _pendulum_poly(rows)
    return out[0] if single else out


def feature_second_moment(op: FeatureOperator):
    """E[psi(x) psi(x)^T] for x ~ N(0, I), in closed form."""
    if op.kind == "identity":
        return np.eye(op.output_dim)
    if op.kind != "fourier":
        raise ValueError(f"no closed-form second moment for {op.kind}")
    # E cos(a.x+b) cos(a'.x+b') = (e^{-|a-a'|^2/2} cos(b-b') + e^{-|a+a'|^2/2} cos(b+b')) / 2
    A, B = op.A, op.B
    sq = np.sum(A * A, axis=1)
    gram = A @ A.T
    minus = sq[:, None] + sq[None, :] - 2 * gram
    plus = sq[:, None] + sq[None, :] + 2 * gram
    return 0.5 * (
        np.exp(-0.5 * minus) * np.cos(B[:, None] - B[None, :])
        + np.exp(-0.5 * plus) * np.cos(B[:, None] + B[None, :])
    )


@dataclass(eq=False)
class TaskSample:
    w: np.ndarray
    inputs: np.ndarray
    labels: np.ndarray
    features: np.ndarray | None = None

    @property
    def n(self) -> int:
        return int(self.labels.shape[0])


@dataclass(frozen=True, eq=False)
class GroundTruthModel:
    dims: Dimensions
    b_x: np.ndarray
    b_w: np.ndarray
    psi_x: FeatureOperator
    psi_w: FeatureOperator
    sigma: float
    seed: int = 0
    conditioning: str = "well"
    kappa: float = 1.0
    radius: float = 1.0

    def __post_init__(self):
        d = self.dims
        if self.b_x.shape != (d.d_psi_x, d.k):
            raise ValueError(f"b_x shape {self.b_x.shape} != {(d.d_psi_x, d.k)}")
        if self.b_w.shape != (d.k, d.d_psi_w):
            raise ValueError(f"b_w shape {self.b_w.shape} != {(d.k, d.d_psi_w)}")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        for arr in (self.b_x, self.b_w):
            arr.setflags(write=False)

    @property
    def b_w_source(self):
        return self.b_w[:, : self.dims.d_w_source]

    @property
    def b_w_target(self):
        return self.b_w[:, self.dims.d_w_source:]

    @property
    def source_space(self) -> TaskSpace:
        return TaskSpace.ball(self.dims.d_w, range(self.dims.d_w_source), self.radius)

    @property
    def task_space(self) -> TaskSpace:
        return TaskSpace.ball(self.dims.d_w, None, self.radius)

    def head(self, w):
        """True representation coefficients B_W psi_w(w)."""
        return self.b_w @ apply_feature(self.psi_w, w)

    def regression_vector(self, w):
        """Coefficient vector in lifted-input space, B_X B_W psi_w(w)."""
        return self.b_x @ self.head(w)

    def sample(self, w, n, rng) -> TaskSample:
        return sample_task(self, w, n, rng)


def _spectrum(k, total_sq, conditioning, kappa):
    if conditioning == "well" or k == 1:
        s = np.ones(k)
    else:
        s = kappa ** (-np.arange(k) / (k - 1))
    return s * np.sqrt(total_sq / np.sum(s**2))


def _synthesize(k, d, spectrum, rng, iters=500):
    """k x d matrix with exact singular values and near-unit columns."""
    U, _ = np.linalg.qr(rng.standard_normal((k, k)))
    V, _ = np.linalg.qr(rng.standard_normal((d, k)))
    M = U @ np.diag(spectrum) @ V.T
    # Alternate unit-column and exact-spectrum projections; finish on the spectrum.
    for _ in range(iters):
        M = M / np.linalg.norm(M, axis=0, keepdims=True)
        U, _, Vt = np.linalg.svd(M, full_matrices=False)
        M = U @ np.diag(spectrum) @ Vt
    return M


def make_ground_truth(
    dims: Dimensions,
    conditioning="well",
    kappa=1.0,
    psi_x="identity",
    psi_w="identity",
    sigma=1.0,
    seed=0,
    col_band=(0.9, 1.1),
    freq_scale=1.0,
) -> GroundTruthModel:
    """Build a ground truth deterministically from ``seed``.

    ``conditioning`` is ``"well"`` (all source singular values equal
    ``sqrt(d_w_source / k)``) or ``"ill"`` (geometric spectrum whose ratio of
    extremes is ``kappa``).  Column norms of the source block land inside
    ``col_band``.
    """
    if kappa < 1:
        raise ValueError(f"kappa must be >= 1, got {kappa}")
    if conditioning not in ("well", "ill"):
        raise ValueError(f"conditioning must be 'well' or 'ill', got {conditioning!r}")
    if dims.k > dims.d_psi_w:
        raise ValueError(f"k={dims.k} exceeds d_psi_w={dims.d_psi_w}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0]))

    G = rng.standard_normal((dims.d_psi_x, dims.k))
    b_x, _ = np.linalg.qr(G)

    if psi_x == "identity":
        if dims.d_psi_x != dims.d_x:
            raise ValueError("identity psi_x needs d_psi_x == d_x")
        px = identity_feature(dims.d_x)
    elif psi_x == "fourier":
        px = fourier_feature(dims.d_x, dims.d_psi_x, rng, scale=freq_scale)
    else:
        raise ValueError(f"unsupported psi_x {psi_x!r}")
    if psi_w != "identity":
        raise ValueError("synthetic ground truth supports identity psi_w only")
    if dims.d_psi_w != dims.d_w:
        raise ValueError("identity psi_w needs d_psi_w == d_w")
    pw = identity_feature(dims.d_w)

    d_s, d_t = dims.d_w_source, dims.d_w_target
    if d_s < dims.k:
        raise ValueError(f"d_w_source={d_s} smaller than k={dims.k}")
    s = _spectrum(dims.k, float(d_s), conditioning, kappa)
    source = _synthesize(dims.k, d_s, s, rng)
    blocks = [source]
    if d_t:
        if d_t >= dims.k:
            target = _synthesize(dims.k, d_t, _spectrum(dims.k, float(d_t), "well", 1.0), rng)
        else:
            target = rng.standard_normal((dims.k, d_t))
            target /= np.linalg.norm(target, axis=0, keepdims=True)
        blocks.append(target)
    b_w = np.hstack(blocks)

    norms = np.linalg.norm(source, axis=0)
    lo, hi = col_band
    if norms.min() < lo - 1e-9 or norms.max() > hi + 1e-9:
        raise RuntimeError(
            f"column norms {norms.min():.3f}..{norms.max():.3f} escaped band {col_band}"
        )
    return GroundTruthModel(dims, b_x, b_w, px, pw, float(sigma), int(seed),
                            conditioning, float(kappa))


def sample_task(gt: GroundTruthModel, w, n, rng) -> TaskSample:
    """Draw ``n`` i.i.d. labelled points for task ``w``."""
    w = np.asarray(w, dtype=float)
    if n < 0:
        raise ValueError("n must be non-negative")
    if not gt.task_space.contains(w):
        raise ValueError(f"task vector outside task space (norm {np.linalg.norm(w):.6g})")
    X = rng.standard_normal((n, gt.dims.d_x))
    phi = apply_feature(gt.psi_x, X) if n else np.zeros((0, gt.dims.d_psi_x))
    y = phi @ gt.regression_vector(w)
    if gt.sigma > 0:
        y = y + gt.sigma * rng.standard_normal(n)
    return TaskSample(w.copy(), X, y, phi)


@dataclass(frozen=True, eq=False)
class TargetSpec:
    """Target mixture plus the spanning set used for few-shot target data."""

    vectors: np.ndarray
    weights: np.ndarray
    dot_w: np.ndarray
    n_target: int
    dot_n_target: int

    def __post_init__(self):
        vectors = np.atleast_2d(np.asarray(self.vectors, dtype=float))
        weights = np.asarray(self.weights, dtype=float).ravel()
        dot_w = np.atleast_2d(np.asarray(self.dot_w, dtype=float))
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "dot_w", dot_w)
        if weights.shape[0] != vectors.shape[0]:
            raise ValueError("one weight per target vector required")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
            raise ValueError("target weights must be non-negative and sum to 1")
        if dot_w.shape[1] != vectors.shape[1]:
            raise ValueError("dot_w and vectors must share the task dimension")
        if np.linalg.matrix_rank(dot_w, tol=1e-9) < dot_w.shape[0]:
            raise ValueError("dot_w vectors must be linearly independent")
        # the mixture must live inside span(dot_w)
        coef, *_ = np.linalg.lstsq(dot_w.T, vectors.T, rcond=None)
        if np.max(np.abs(dot_w.T @ coef - vectors.T), initial=0.0) > 1e-8:
            raise ValueError("target vectors are not spanned by dot_w")

    @classmethod
    def single(cls, w0, n_target, dot_n_target):
        w0 = np.asarray(w0, dtype=float)
        return cls(w0[None, :], np.ones(1), w0[None, :] / np.linalg.norm(w0),
                   n_target, dot_n_target)

    def second_moment(self):
        return (self.vectors.T * self.weights) @ self.vectors


def _split(n, weights):
    """Largest-remainder apportionment of ``n`` over ``weights``."""
    raw = np.asarray(weights, dtype=float) * n
    base = np.floor(raw).astype(int)
    short = int(n - base.sum())
    if short > 0:
        order = np.argsort(-(raw - base), kind="stable")
        base[order[:short]] += 1
    return base


def sample_mixture(env, target: TargetSpec, n, rng) -> list[TaskSample]:
    """``n`` target points apportioned over the mixture components."""
    counts = _split(n, target.weights)
    return [env.sample(w, int(c), rng) for w, c in zip(target.vectors, counts)]


_META_KEYS = ("d_x", "d_psi_x", "d_w", "d_w_source", "d_psi_w", "k")


def save_ground_truth(gt: GroundTruthModel, prefix) -> tuple[Path, Path]:
    """Write ``prefix.csv`` (header) and ``prefix.bin`` (float64 row-major)."""
    prefix = Path(prefix)
    meta_path = prefix.with_suffix(".csv")
    bin_path = prefix.with_suffix(".bin")
    arrays = [gt.b_x, gt.b_w]
    if gt.psi_x.kind == "fourier":
        arrays += [gt.psi_x.A, gt.psi_x.B]
    with open(meta_path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["key", "value"])
        for key in _META_KEYS:
            wr.writerow([key, getattr(gt.dims, key)])
        wr.writerow(["sigma", repr(gt.sigma)])
        wr.writerow(["seed", gt.seed])
        wr.writerow(["conditioning", gt.conditioning])
        wr.writerow(["kappa", repr(gt.kappa)])
        wr.writerow(["radius", repr(gt.radius)])
        wr.writerow(["psi_x", gt.psi_x.kind])
        wr.writerow(["psi_w", gt.psi_w.kind])
        wr.writerow(["shapes", ";".join("x".join(map(str, a.shape)) for a in arrays)])
    blob = np.concatenate([np.ascontiguousarray(a, dtype="<f8").ravel() for a in arrays])
    blob.tofile(bin_path)
    return meta_path, bin_path


def load_ground_truth(prefix) -> GroundTruthModel:
    prefix = Path(prefix)
    with open(prefix.with_suffix(".csv"), newline="") as fh:
        rows = list(csv.reader(fh))
    meta = {k: v for k, v in rows[1:]}
    dims = Dimensions(**{k: int(meta[k]) for k in _META_KEYS})
    shapes = [tuple(int(x) for x in s.split("x")) for s in meta["shapes"].split(";")]
    blob = np.fromfile(prefix.with_suffix(".bin"), dtype="<f8")
    arrays, pos = [], 0
    for shp in shapes:
        size = int(np.prod(shp))
        arrays.append(blob[pos: pos + size].reshape(shp).copy())
        pos += size
    if pos != blob.size:
        raise ValueError("binary payload does not match header shapes")
    if meta["psi_x"] == "fourier":
        A, B = arrays[2], arrays[3]
        px = FeatureOperator("fourier", dims.d_x, dims.d_psi_x, A, B)
    else:
        px = identity_feature(dims.d_x)
    return GroundTruthModel(
        dims, arrays[0], arrays[1], px, identity_feature(dims.d_w),
        float(meta["sigma"]), int(meta["seed"]), meta["conditioning"],
        float(meta["kappa"]), float(meta["radius"]),
    )

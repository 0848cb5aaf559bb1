"""Multi-environment pendulum with a parametric residual torque.

Angles are measured from upright, so ``m l g sin(theta)`` is destabilising.
The residual ``f`` combines cubic air drag from a wind vector, linear and
quadratic damping, and the torque left over from a wrong gravity estimate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .model import (
    FeatureOperator,
    TaskSample,
    TaskSpace,
    TargetSpec,
    apply_feature,
    pendulum_poly_feature,
)

__all__ = [
    "PendulumEnv",
    "PendulumState",
    "DivergenceError",
    "residual_f",
    "step",
    "rollout",
    "collect_data",
    "control_rollout",
    "PendulumProblem",
    "TARGET_OBSERVED",
    "TARGET_ACTUAL",
]

G_TRUE = 9.81
# what the learner sees for the target, and what actually generates its data
TARGET_OBSERVED = np.array([0.0, 0.0, 0.0, 0.0, 0.0, 1.0])
TARGET_ACTUAL = np.array([0.0, 0.0, 1.0, 0.5, 0.0, 0.0])


class DivergenceError(RuntimeError):
    """The simulated state left the finite range."""


@dataclass(frozen=True)
class PendulumEnv:
    """Physical parameters; ``w = (c_x, c_y, alpha1, alpha2, g_hat, dummy)``.

    ``drag`` scales the air-drag torque (1 is the nominal model, 0 removes it).
    """

    w: tuple = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    m: float = 1.0
    l: float = 1.0
    g_true: float = G_TRUE
    dt: float = 0.02
    drag: float = 1.0

    def __post_init__(self):
        w = tuple(float(v) for v in np.asarray(self.w, dtype=float).ravel())
        if len(w) != 6:
            raise ValueError("w must have 6 entries")
        if w[5] not in (0.0, 1.0):
            raise ValueError("dummy entry must be 0 or 1")
        if self.dt <= 0 or self.m <= 0 or self.l <= 0:
            raise ValueError("dt, m and l must be positive")
        if self.drag < 0:
            raise ValueError("drag must be non-negative")
        object.__setattr__(self, "w", w)

    @property
    def wind(self):
        return np.array(self.w[:2])

    @property
    def alpha1(self):
        return self.w[2]

    @property
    def alpha2(self):
        return self.w[3]

    @property
    def g_hat(self):
        return self.w[4]

    @classmethod
    def from_w(cls, w, **kw):
        return cls(tuple(np.asarray(w, dtype=float)), **kw)


@dataclass(frozen=True)
class PendulumState:
    theta: float
    theta_dot: float

    def __post_init__(self):
        if not (math.isfinite(self.theta) and math.isfinite(self.theta_dot)):
            raise DivergenceError(f"non-finite pendulum state ({self.theta}, {self.theta_dot})")

    def as_array(self):
        return np.array([self.theta, self.theta_dot])


def _cross2(ax, ay, bx, by):
    return ax * by - ay * bx


def residual_f(state, env: PendulumEnv):
    """Residual torque at ``state`` (a PendulumState or an ``(..., 2)`` array)."""
    if isinstance(state, PendulumState):
        return float(residual_f(state.as_array(), env))
    x = np.asarray(state, dtype=float)
    th, thd = x[..., 0], x[..., 1]
    s, c = np.sin(th), np.cos(th)
    cx, cy = env.w[0], env.w[1]
    rx = cx - env.l * thd * c
    ry = cy + env.l * thd * s
    mag2 = rx * rx + ry * ry
    drag = env.drag * _cross2(env.l * s, -env.l * c, mag2 * rx, mag2 * ry)
    damping = env.alpha1 * thd + env.alpha2 * thd * np.abs(thd)
    gravity = env.m * env.l * (env.g_true - env.g_hat) * s
    return drag - damping + gravity


def _accel(x, u, env, f=None):
    f = residual_f(x, env) if f is None else f
    return (u + f + env.m * env.l * env.g_hat * np.sin(x[..., 0])) / (env.m * env.l**2)


def step(state, u, env: PendulumEnv, dt=None, check=True):
    """One RK4 step under a control held constant over ``dt``.

    Accepts a PendulumState or an ``(..., 2)`` array of states (batched).
    With ``check`` a non-finite result raises :class:`DivergenceError`.
    """
    h = env.dt if dt is None else float(dt)
    single = isinstance(state, PendulumState)
    x = state.as_array() if single else np.asarray(state, dtype=float)
    u = np.asarray(u, dtype=float)

    def deriv(z):
        return np.stack([z[..., 1], _accel(z, u, env)], axis=-1)

    k1 = deriv(x)
    k2 = deriv(x + 0.5 * h * k1)
    k3 = deriv(x + 0.5 * h * k2)
    k4 = deriv(x + h * k3)
    out = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    if check and not np.all(np.isfinite(out)):
        raise DivergenceError("pendulum state became non-finite")
    if single:
        return PendulumState(float(out[0]), float(out[1]))
    return out


def rollout(x0, env, policy, steps):
    """States visited under ``policy(x) -> u``; returns ``(steps + 1, ..., 2)``."""
    x = np.asarray(x0, dtype=float)
    traj = [x]
    for _ in range(steps):
        x = step(x, policy(x), env)
        traj.append(x)
    return np.array(traj)


def collect_data(env: PendulumEnv, n, rng, noise_var=0.5, episode=100, thin=10,
                 kp=15.0, kd=10.0, u_noise=2.0, setpoint=1.2, psi_x=None,
                 task_w=None) -> TaskSample:
    """Random-excitation data: PD toward random setpoints plus Gaussian torque noise.

    Episodes of ``episode`` steps run in parallel, each from a random reset
    with its own setpoint; states are recorded before every step and labelled
    with the residual plus Gaussian noise of variance ``noise_var``.  Only
    every ``thin``-th state of an episode is kept, which spreads ``n`` samples
    over more independent episodes.  An
    episode whose state leaves ``|theta| <= 2, |theta_dot| <= 6`` (possible
    with negative damping) is restarted from a fresh random state.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    w = np.asarray(env.w if task_w is None else task_w, dtype=float)
    n = int(n)
    if n <= 0:
        feats = np.zeros((0, psi_x.output_dim)) if psi_x is not None else None
        return TaskSample(w, np.zeros((0, 2)), np.zeros(0), feats)
    if episode % thin:
        raise ValueError("thin must divide the episode length")
    n_ep = math.ceil(n * thin / episode)

    def reset(size):
        return np.column_stack([rng.uniform(-1.0, 1.0, size), rng.uniform(-2.0, 2.0, size)])

    x = reset(n_ep)
    target = rng.uniform(-setpoint, setpoint, n_ep)
    states = np.empty((episode, n_ep, 2))
    scale = env.m * env.l**2
    for t in range(episode):
        states[t] = x
        u = scale * (kp * (target - x[:, 0]) - kd * x[:, 1]) + u_noise * rng.standard_normal(n_ep)
        with np.errstate(all="ignore"):
            x = step(x, u, env, check=False)
        bad = ~(np.all(np.isfinite(x), axis=1) & (np.abs(x[:, 0]) <= 2.0)
                & (np.abs(x[:, 1]) <= 6.0))
        if bad.any():
            x[bad] = reset(int(bad.sum()))
    X = states[::thin].transpose(1, 0, 2).reshape(-1, 2)[:n]
    y = residual_f(X, env) + math.sqrt(noise_var) * rng.standard_normal(n)
    feats = apply_feature(psi_x, X) if psi_x is not None else None
    return TaskSample(w, X, y, feats)


DEFAULT_STARTS = ((0.5, 0.0), (-0.5, 0.0), (0.3, 0.5), (-0.3, -0.5))


def control_rollout(env_true: PendulumEnv, f_hat, kp=15.0, kd=8.0, horizon=500,
                    starts=DEFAULT_STARTS, g_hat=None):
    """Mean ``||x||`` under the model-based controller, averaged over ``starts``.

    ``f_hat(X)`` maps an ``(n, 2)`` state array to predicted residuals; use
    ``None`` for the zero predictor.  Raises :class:`DivergenceError` if the
    closed loop blows up.
    """
    if kp <= 0 or kd <= 0:
        raise ValueError("gains must be positive")
    gh = env_true.g_hat if g_hat is None else g_hat
    m, l = env_true.m, env_true.l

    def policy(x):
        fh = 0.0 if f_hat is None else np.asarray(f_hat(x), dtype=float)
        return -m * l * gh * np.sin(x[:, 0]) - fh - m * l**2 * (kp * x[:, 0] + kd * x[:, 1])

    x0 = np.asarray(starts, dtype=float).reshape(-1, 2)
    traj = rollout(x0, env_true, policy, int(horizon))
    norms = np.linalg.norm(traj[1:], axis=-1)
    if np.max(norms) > 1e3:
        raise DivergenceError("closed loop diverged")
    return float(np.mean(norms))


@dataclass(eq=False)
class PendulumProblem:
    """Learner-facing environment over pendulum tasks.

    Source tasks have the dummy entry 0 and physical parameters inside a
    ball of ``radius`` over the first five coordinates.  A task whose dummy
    entry is 1 is the unknown target, simulated with ``actual_target``.
    """

    psi_x: FeatureOperator
    k: int = 8
    sigma: float = math.sqrt(0.5)
    radius: float = 1.5
    actual_target: np.ndarray = field(default_factory=lambda: TARGET_ACTUAL.copy())
    base: PendulumEnv = field(default_factory=PendulumEnv)
    psi_w: FeatureOperator = field(default_factory=pendulum_poly_feature)

    @classmethod
    def create(cls, seed=0, d_psi_x=60, freq_scale=1.0, **kw):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0]))
        A = freq_scale * rng.standard_normal((d_psi_x, 2)) / np.array([1.0, 2.0])
        B = rng.uniform(0.0, 2.0 * math.pi, d_psi_x)
        return cls(FeatureOperator("fourier", 2, d_psi_x, A, B), **kw)

    @property
    def source_space(self):
        return TaskSpace.ball(6, axes=range(5), radius=self.radius)

    @property
    def task_space(self):
        return TaskSpace.ball(6, radius=max(self.radius, 1.0))

    def physical(self, w):
        w = np.asarray(w, dtype=float)
        return self.actual_target if w[5] == 1.0 else w

    def env_for(self, w):
        return replace(self.base, w=tuple(self.physical(w)))

    def sample(self, w, n, rng) -> TaskSample:
        env = self.env_for(w)
        return collect_data(env, n, rng, noise_var=self.sigma**2, psi_x=self.psi_x, task_w=w)

    def target(self, n_target=1000, dot_n_target=1000):
        return TargetSpec.single(TARGET_OBSERVED, n_target, dot_n_target)

    def predictor(self, b_x_hat, head):
        coef = np.asarray(b_x_hat) @ np.asarray(head)
        return lambda X: apply_feature(self.psi_x, np.atleast_2d(X)) @ coef

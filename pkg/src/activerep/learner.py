"""Passive, target-agnostic and target-aware sampling strategies.

A run is a sequential state machine (:class:`ActiveLearner`).  Randomness
comes from named streams split off one master seed (see :func:`streams`), so
a trace is a pure function of ``(config, seed)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .design import (
    DesignProblem,
    RankDeficientError,
    SamplingPlan,
    adaptive_source_search,
    budget_target_aware,
    clip_target_covariance,
    default_clip_threshold,
    frank_wolfe_design,
    solve_ball_closed_form,
)
from .evaluation import MetricsSnapshot, dis_similarity
from .model import TargetSpec, TaskSample, _split, apply_feature
from .oracles import (
    ModelEstimate,
    TrainConfig,
    alt_min_representation,
    assemble_bw,
    assemble_bw_lstsq,
    fit_task_head,
    joint_erm,
    task_stats,
)

__all__ = [
    "STREAMS",
    "streams",
    "StageBudgets",
    "LearnerConfig",
    "EpochRecord",
    "ExperimentTrace",
    "ActiveLearner",
    "compute_q1",
    "save_task_gate",
    "run_warmup",
    "run_epoch_target_aware",
    "run_target_aware",
    "run_target_agnostic",
    "run_passive",
]

log = logging.getLogger(__name__)

# Stream ids under SeedSequence([master, id]).
STREAMS = {"truth": 0, "sampling": 1, "training": 2, "eval": 3, "target": 4, "design": 5}


def streams(master_seed):
    return {name: np.random.default_rng(np.random.SeedSequence([int(master_seed), i]))
            for name, i in STREAMS.items()}


@dataclass
class StageBudgets:
    n0: int
    n1_scale: float
    n2_policy: str = "formula"
    n2_fixed: int = 0
    beta1: float = 1.0
    beta2: float = 1.0
    beta3: float = 8.0
    epochs: int = 3
    budget_cap: int | None = None

    def __post_init__(self):
        if self.n0 < 1 or self.n1_scale <= 0 or self.epochs < 1:
            raise ValueError("budgets must be strictly positive")
        if self.n2_policy not in ("formula", "fixed"):
            raise ValueError(f"unknown n2_policy {self.n2_policy!r}")
        if self.n2_policy == "fixed" and self.n2_fixed < 1:
            raise ValueError("fixed n2 policy needs n2_fixed >= 1")
        if min(self.beta1, self.beta2, self.beta3) <= 0:
            raise ValueError("beta constants must be positive")

    @staticmethod
    def eps(j):
        return 2.0 ** (-j)

    def n1(self, j):
        return int(math.ceil(self.beta2 * self.n1_scale * self.eps(j) ** (-4.0 / 3.0) - 1e-9))

    @classmethod
    def from_theory(cls, k, d_x, d_w, kappa_bar=None, sigma_low=1.0, delta=0.1, epochs=3,
                    beta1=1.0, beta2=1.0, beta3=8.0):
        """Budgets with every dimension factor of the theory formulas kept."""
        kb = math.sqrt(d_w) if kappa_bar is None else kappa_bar
        n0 = beta1 * kb**2 * (k**3 * d_x * kb**2
                              + d_w**1.5 / sigma_low**2 * math.sqrt(k + math.log(1 / delta)))
        scale = (k ** (5 / 3) * d_w ** (2 / 3) * d_x ** (1 / 3)
                 * (k ** (2 / 3) * d_w ** (1 / 3) * sigma_low ** (-4 / 3)
                    + kb**2 * sigma_low ** (-2 / 3)))
        return cls(int(math.ceil(n0)), scale, beta1=beta1, beta2=beta2, beta3=beta3,
                   epochs=epochs)


@dataclass
class LearnerConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    clip_const: float = 8.0
    clip_gamma: float | None = None
    gate_threshold: float | None = 0.8
    reuse_dot_target: bool = False
    explore_oracle: str = "altmin"
    exploit_oracle: str = "erm"
    passive_oracle: str = "erm"
    rank_tol: float = 1e-8
    candidate_pool: int = 64
    search_rounds: int = 5
    search_pool: int = 256
    fw_iters: int = 600
    passive_tasks: int = 20

    def __post_init__(self):
        for name in ("explore_oracle", "exploit_oracle", "passive_oracle"):
            if getattr(self, name) not in ("altmin", "erm"):
                raise ValueError(f"{name} must be 'altmin' or 'erm'")


@dataclass
class EpochRecord:
    epoch: int
    eps: float
    stage: str
    plan: SamplingPlan
    spent: int
    cumulative_budget: int
    distinct_tasks: int
    metrics: MetricsSnapshot | None = None
    note: str = ""


@dataclass
class ExperimentTrace:
    records: list[EpochRecord] = field(default_factory=list)
    samples: list[tuple[tuple, str, int]] = field(default_factory=list)
    evaluations: list[tuple[int, int, object]] = field(default_factory=list)

    @property
    def cumulative_budget(self) -> int:
        return sum(n for _, _, n in self.samples)

    def sample_records(self):
        return list(self.samples)

    def distinct_tasks(self, stages=None) -> int:
        return len({key for key, st, n in self.samples
                    if n > 0 and (stages is None or st in stages)})

    def task_counts(self, exclude_stages=()):
        counts = {}
        for key, st, n in self.samples:
            if st not in exclude_stages:
                counts[key] = counts.get(key, 0) + n
        return counts


def task_key(w):
    return tuple(float(x) for x in np.round(np.asarray(w, dtype=float), 12))


def compute_q1(b_w_source_hat, k, tol=1e-10):
    """Top-k right singular vectors (columns) and whether the full rank was available."""
    B = np.asarray(b_w_source_hat, dtype=float)
    if not np.any(B):
        raise ValueError("estimated source map is zero")
    _, s, Vt = np.linalg.svd(B, full_matrices=False)
    r = int(np.sum(s > tol * s[0]))
    m = min(k, r)
    if m < k:
        log.warning("source map estimate has rank %d < k=%d", r, k)
    return Vt[:m].T, m == k


def save_task_gate(prev_tasks, new_tasks, threshold=0.8):
    """True when the exploration basis moved enough to be recomputed."""
    return dis_similarity(np.asarray(prev_tasks), np.asarray(new_tasks)) <= threshold


def _orthonormal_cols(M):
    U, s, _ = np.linalg.svd(M, full_matrices=False)
    return U[:, s > 1e-10 * max(s[0], 1e-300)]


class ActiveLearner:
    """Holds data, estimates and the trace for one run on one environment.

    ``env`` needs ``psi_x``, ``psi_w``, ``source_space`` and
    ``sample(w, n, rng)``; for the bilinear ball case ``psi_w`` is the identity.
    """

    def __init__(self, env, budgets: StageBudgets, cfg: LearnerConfig | None = None,
                 seed=0, target: TargetSpec | None = None, evaluator=None):
        self.env = env
        self.budgets = budgets
        self.cfg = cfg or LearnerConfig()
        self.seed = int(seed)
        self.rng = streams(seed)
        self.target = target
        self.evaluator = evaluator
        self.space = env.source_space
        self.k = env.b_x.shape[1] if hasattr(env, "b_x") else env.k
        self.linear_w = env.psi_w.kind == "identity"
        self.data: dict[tuple, TaskSample] = {}
        self.stage_keys = {"warmup": [], "explore": [], "exploit": [], "passive": []}
        self.trace = ExperimentTrace()
        self.b_x_hat = None           # exploration estimate
        self.b_x_final = None         # estimate handed to evaluation
        self.b_w_source_hat = None
        self.b_w_target_hat = None
        self.q1_tasks = None          # rows are task vectors
        self.q1_weights = None
        self.dot_target = None

    # ------------------------------------------------------------ data
    def _collect(self, plan: SamplingPlan, stage, rng=None):
        rng = rng or self.rng["sampling"]
        for w, n in zip(plan.tasks, plan.per_task_budget):
            if n <= 0:
                continue
            if self.space.kind == "ball" and not self.env.task_space.contains(w):
                raise ValueError("plan task outside the task space")
            key = task_key(w)
            fresh = self.env.sample(w, int(n), rng)
            if key in self.data:
                old = self.data[key]
                self.data[key] = TaskSample(
                    old.w, np.vstack([old.inputs, fresh.inputs]),
                    np.concatenate([old.labels, fresh.labels]),
                    np.vstack([old.features, fresh.features]),
                )
            else:
                self.data[key] = fresh
            if key not in self.stage_keys[stage]:
                self.stage_keys[stage].append(key)
            self.trace.samples.append((key, stage, int(n)))

    def _samples(self, *stages):
        keys = []
        for st in stages:
            for key in self.stage_keys[st]:
                if key not in keys:
                    keys.append(key)
        return keys, [self.data[k] for k in keys]

    def _record(self, epoch, stage, plan, note=""):
        rec = EpochRecord(epoch, StageBudgets.eps(epoch) if epoch else 1.0, stage, plan,
                          plan.spent, self.trace.cumulative_budget,
                          self.trace.distinct_tasks(), None, note)
        self.trace.records.append(rec)
        return rec

    def _fit(self, samples, oracle, init):
        tc = self.cfg.train
        if oracle == "altmin":
            return alt_min_representation(samples, self.k, tc, init=init)
        start = ModelEstimate(init) if init is not None else None
        if start is None:
            start = ModelEstimate(alt_min_representation(samples, self.k, tc))
        return joint_erm(samples, start, tc).b_x_hat

    def _heads(self, samples):
        return [fit_task_head(self.b_x_hat, s, self.cfg.train.ridge) for s in samples]

    def _lift_w(self, W):
        return apply_feature(self.env.psi_w, np.atleast_2d(W))

    def _source_map(self, samples, orthonormal):
        heads = self._heads(samples)
        if self.linear_w:
            vs = [self.space.restrict(s.w) for s in samples]
            B = assemble_bw(heads, vs) if orthonormal else assemble_bw_lstsq(heads, vs)
            return B
        return assemble_bw_lstsq(heads, list(self._lift_w(np.array([s.w for s in samples]))))

    def _candidates(self, rng):
        return self.space.sample_uniform(rng, self.cfg.candidate_pool)

    # ---------------------------------------------------------- stages
    def warmup(self):
        """Coarse exploration over the source space and the first estimates."""
        n0 = self.budgets.n0
        if self.linear_w:
            tasks = self.space.one_hot_basis()
            plan = SamplingPlan.uniform(tasks, n0)
        else:
            cands = self._candidates(self.rng["design"])
            feats = self._lift_w(cands)
            basis = _orthonormal_cols(feats.T)
            prob = DesignProblem(lambda w: basis.T @ apply_feature(self.env.psi_w, w),
                                 np.eye(basis.shape[1]))
            q = frank_wolfe_design(prob, cands, iters=self.cfg.fw_iters)
            tasks, q = self._prune(cands, q, n0, feats @ basis)
            plan = self._plan(tasks, q, n0)
        self._collect(plan, "warmup")
        _, samples = self._samples("warmup")
        self.b_x_hat = alt_min_representation(samples, self.k, self.cfg.train)
        self.b_x_final = self.b_x_hat
        self.b_w_source_hat = self._source_map(samples, orthonormal=self.linear_w)
        self._set_q1()
        self._record(0, "warmup", plan)
        return self

    def _prune(self, cands, q, budget, feats):
        """Support of a design with enough tasks to span ``feats``.

        Tasks are taken in decreasing weight, first all with at least ``2k``
        planned samples, then more until the kept features have full rank.
        """
        floor = 2.0 * self.k / max(budget, 1)
        order = np.argsort(q, kind="stable")[::-1]
        full = np.linalg.matrix_rank(feats)
        keep = []
        for i in order:
            if q[i] < floor and keep and np.linalg.matrix_rank(feats[keep]) >= full:
                break
            keep.append(int(i))
        keep = sorted(keep)
        return cands[keep], q[keep] / q[keep].sum()

    def _plan(self, tasks, weights, budget):
        plan = SamplingPlan.weighted(tasks, weights, budget)
        plan.per_task_budget = [max(n, 2 * self.k) for n in plan.per_task_budget]
        return plan

    def _set_q1(self):
        if self.linear_w:
            V, _ = compute_q1(self.b_w_source_hat, self.k)
            self.q1_tasks = self.space.embed(V.T)
            self.q1_weights = np.full(V.shape[1], 1.0 / V.shape[1])
        else:
            cands = self._candidates(self.rng["design"])
            B = self.b_w_source_hat
            prob = DesignProblem(lambda w: B @ apply_feature(self.env.psi_w, w),
                                 np.eye(self.k))
            q = frank_wolfe_design(prob, cands, iters=self.cfg.fw_iters)
            feats = self._lift_w(cands) @ B.T
            self.q1_tasks, self.q1_weights = self._prune(cands, q, self.budgets.n1(1), feats)

    def explore(self, j, n1=None):
        """Stage 2: uniform exploration over the q1 support and refits."""
        n1 = self.budgets.n1(j) if n1 is None else int(n1)
        if self.linear_w:
            plan = SamplingPlan.uniform(self.q1_tasks, n1)
        else:
            plan = self._plan(self.q1_tasks, self.q1_weights, n1)
        self._collect(plan, "explore")
        _, samples = self._samples("explore")
        self.b_x_hat = self._fit(samples, self.cfg.explore_oracle, self.b_x_hat)
        self.b_x_final = self.b_x_hat
        current = [self.data[task_key(w)] for w in self.q1_tasks]
        orth = self.linear_w and len(current) == self.q1_tasks.shape[0]
        new_map = self._source_map(current, orthonormal=orth)
        self.b_w_source_hat = new_map
        rec = self._record(j, "explore", plan)
        if self.linear_w and self.cfg.gate_threshold is not None:
            V_new, _ = compute_q1(new_map, self.k)
            V_old = self.space.restrict(self.q1_tasks).T
            if V_new.shape == V_old.shape and save_task_gate(V_old, V_new,
                                                             self.cfg.gate_threshold):
                self.q1_tasks = self.space.embed(V_new.T)
                rec.note = "q1 recomputed"
        return rec

    def _target_map(self):
        tgt = self.target
        if self.dot_target is None or not self.cfg.reuse_dot_target:
            counts = _split(tgt.dot_n_target, np.full(tgt.dot_w.shape[0], 1.0 / tgt.dot_w.shape[0]))
            rng = self.rng["target"]
            self.dot_target = [self.env.sample(w, int(c), rng) for w, c in zip(tgt.dot_w, counts)]
        heads = self._heads(self.dot_target)
        if self.linear_w:
            return assemble_bw_lstsq(heads, list(tgt.dot_w))
        return assemble_bw_lstsq(heads, list(self._lift_w(tgt.dot_w)))

    def target_covariance(self):
        """Exact finite-mixture second moment of the estimated target coefficients."""
        self.b_w_target_hat = self._target_map()
        F = self._lift_w(self.target.vectors) @ self.b_w_target_hat.T
        return (F.T * self.target.weights) @ F

    def clip_threshold(self, j):
        if self.cfg.clip_gamma is not None:
            return float(self.cfg.clip_gamma)
        return default_clip_threshold(self.k, self.space.dim, self.env.psi_x.output_dim,
                                      self.budgets.n1(j), self.cfg.clip_const)

    def _search(self, t):
        # eigenvectors carry no sign and psi_w is not odd, so try both
        B = self.b_w_source_hat
        best, best_err = None, np.inf
        for sign in (1.0, -1.0):
            w = adaptive_source_search(self.env.psi_w, B, sign * t, self.cfg.search_rounds,
                                       self.cfg.search_pool, self.rng["design"], self.space)
            err = np.linalg.norm(B @ apply_feature(self.env.psi_w, w) - sign * t)
            if err < best_err:
                best, best_err = w, err
        return best

    def exploit(self, j):
        """Stage 3: target-aware tasks, their budget, and the final refit."""
        if self.target is None:
            raise ValueError("target-aware exploitation needs a TargetSpec")
        clipped = clip_target_covariance(self.target_covariance(), self.clip_threshold(j))
        empty = SamplingPlan.uniform(np.zeros((0, self.space.dim)), 0)
        if clipped.m == 0:
            log.info("epoch %d: every target eigenvalue clipped; stage 3 skipped", j)
            return self._record(j, "exploit", empty, "clipped empty")
        if self.linear_w:
            B = self.b_w_source_hat
            try:
                w_prime, tasks = solve_ball_closed_form(B, clipped, self.cfg.rank_tol,
                                                        self.space.radius)
            except RankDeficientError as exc:
                log.warning("epoch %d: %s", j, exc)
                return self._record(j, "exploit", empty, "rank deficient")
            tasks = self.space.embed(tasks.T)
        else:
            tasks = np.array([self._search(t) for t in clipped.targets().T])
            w_prime = self.space.restrict(tasks).T
        if self.budgets.n2_policy == "formula":
            total, _ = budget_target_aware(w_prime, self.budgets.eps(j), self.budgets.beta3)
        else:
            total = self.budgets.n2_fixed
        plan = SamplingPlan.uniform(tasks, total)
        self._collect(plan, "exploit")
        _, samples = self._samples("explore", "exploit")
        self.b_x_final = self._fit(samples, self.cfg.exploit_oracle, self.b_x_hat)
        rec = self._record(j, "exploit", plan)
        rec.w_prime = w_prime
        return rec

    def evaluate(self, label):
        if self.evaluator is None:
            return None
        snap = self.evaluator(self.b_x_final, self.trace)
        if self.trace.records:
            self.trace.records[-1].metrics = snap
        self.trace.evaluations.append((label, self.trace.cumulative_budget, snap))
        return snap

    def estimate(self) -> ModelEstimate:
        return ModelEstimate(self.b_x_final, self.b_w_source_hat, self.b_w_target_hat)


def run_warmup(env, budgets, cfg=None, seed=0, target=None, evaluator=None):
    learner = ActiveLearner(env, budgets, cfg, seed, target, evaluator).warmup()
    return learner


def run_epoch_target_aware(j, learner: ActiveLearner):
    learner.explore(j)
    learner.exploit(j)
    learner.evaluate(j)
    return learner


def run_target_aware(env, target, budgets, cfg=None, seed=0, evaluator=None):
    learner = run_warmup(env, budgets, cfg, seed, target, evaluator)
    for j in range(1, budgets.epochs + 1):
        if budgets.budget_cap is not None and learner.trace.cumulative_budget >= budgets.budget_cap:
            break
        run_epoch_target_aware(j, learner)
    return learner


def run_target_agnostic(env, budgets, cfg=None, seed=0, checkpoints=None, evaluator=None):
    """Warmup, then exploration on the fixed q1 support.

    Without ``checkpoints`` a single exploration of ``n1(1)`` samples is made.
    With ``checkpoints`` (cumulative budgets) exploration is topped up to each
    checkpoint in turn and the model is evaluated there.
    """
    cfg = cfg or LearnerConfig()
    gate_off = LearnerConfig(**{**cfg.__dict__, "gate_threshold": None})
    learner = ActiveLearner(env, budgets, gate_off, seed, None, evaluator).warmup()
    if checkpoints is None:
        learner.explore(1)
        learner.evaluate(1)
        return learner
    for i, cap in enumerate(checkpoints, start=1):
        extra = int(cap) - learner.trace.cumulative_budget
        if extra > 0:
            learner.explore(i, n1=extra)
        learner.evaluate(i)
    return learner


def run_passive(env, checkpoints, cfg=None, seed=0, evaluator=None):
    """Uniform sampling over a fixed source set, refit at each cumulative budget.

    ``checkpoints`` is one total budget or an increasing sequence of them.
    """
    cfg = cfg or LearnerConfig()
    checkpoints = [checkpoints] if np.isscalar(checkpoints) else list(checkpoints)
    dummy = StageBudgets(n0=1, n1_scale=1.0)
    learner = ActiveLearner(env, dummy, cfg, seed, None, evaluator)
    space = learner.space
    if learner.linear_w:
        tasks = space.one_hot_basis()
    else:
        tasks = space.sample_uniform(learner.rng["design"], cfg.passive_tasks)
    d = tasks.shape[0]
    have = np.zeros(d, dtype=int)
    for i, total in enumerate(checkpoints, start=1):
        want = _split(int(total), np.full(d, 1.0 / d))
        want = np.maximum(want, have)
        plan = SamplingPlan(tasks, np.full(d, 1.0 / d), int(total), list(want - have))
        learner._collect(plan, "passive")
        have = want
        _, samples = learner._samples("passive")
        init = learner.b_x_final
        if cfg.passive_oracle == "erm":
            base = alt_min_representation(samples, learner.k, cfg.train, init=init)
            learner.b_x_final = joint_erm(samples, ModelEstimate(base), cfg.train).b_x_hat
        else:
            learner.b_x_final = alt_min_representation(samples, learner.k, cfg.train, init=init)
        learner.b_x_hat = learner.b_x_final
        learner._record(i, "passive", plan)
        learner.evaluate(i)
    return learner

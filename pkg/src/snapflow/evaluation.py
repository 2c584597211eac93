"""Offline metrics, step sweeps and closed-loop rollouts on a point-mass task.

The toy task: a point ``p`` in the plane must reach a goal ``g``.  A policy
emits a chunk of ``H`` planar actions in units of the per-step bound (so
chunk entries are O(1)); the environment executes them clipped to unit
norm and scaled by ``max_step``.  The expert chunk walks straight at the
goal, with small Gaussian jitter in the recorded actions.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .flow import NFECounter, euler_sample
from .numerics import batch_cosine, make_rng, percentile


# ---------------------------------------------------------------------------
# Environment and expert data


@dataclass
class ToyEnv:
    horizon: int = 8
    max_step: float = 0.1
    budget: int = 60
    success_radius: float = 0.05
    arena: float = 1.0
    fixed_length: bool = False
    p: np.ndarray = field(default_factory=lambda: np.zeros(2))
    g: np.ndarray = field(default_factory=lambda: np.zeros(2))
    t: int = 0
    first_hit: Optional[int] = None

    def reset(self, p, g) -> np.ndarray:
        self.p = np.asarray(p, dtype=np.float64).copy()
        self.g = np.asarray(g, dtype=np.float64).copy()
        self.t = 0
        self.first_hit = 0 if self._at_goal() else None
        return self.observe()

    def _at_goal(self) -> bool:
        return bool(np.linalg.norm(self.p - self.g) < self.success_radius)

    def observe(self) -> np.ndarray:
        return np.concatenate([self.p, self.g])

    @property
    def success(self) -> bool:
        """Goal reached at some step of the episode so far."""
        return self.first_hit is not None

    @property
    def done(self) -> bool:
        if self.t >= self.budget:
            return True
        return self.success and not self.fixed_length

    def step(self, action) -> None:
        a = np.asarray(action, dtype=np.float64)
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite action")
        n = np.linalg.norm(a)
        if n > 1.0:
            a = a / n
        self.p = self.p + self.max_step * a
        self.t += 1
        if not np.all(np.isfinite(self.p)):
            raise ValueError("non-finite state")
        if self.first_hit is None and self._at_goal():
            self.first_hit = self.t

    def sample_start(self, rng: np.random.Generator):
        return rng.uniform(-self.arena, self.arena, 2), rng.uniform(-self.arena, self.arena, 2)


def expert_chunk(p, g, horizon: int, max_step: float) -> np.ndarray:
    """Straight-line chunk towards the goal, in units of ``max_step``."""
    p = np.asarray(p, dtype=np.float64).copy()
    g = np.asarray(g, dtype=np.float64)
    out = np.empty((horizon, 2))
    for k in range(horizon):
        a = (g - p) / max_step
        n = np.linalg.norm(a)
        if n > 1.0:
            a = a / n
        out[k] = a
        p = p + max_step * a
    return out


def expert_dataset(env: ToyEnv, n: int, rng: np.random.Generator, jitter: float = 0.05):
    """``(x0, context)`` pairs: chunk ``(n, H, 2)``, observation ``(n, 4)``."""
    x0 = np.empty((n, env.horizon, 2))
    ctx = np.empty((n, 4))
    for i in range(n):
        p, g = env.sample_start(rng)
        x0[i] = expert_chunk(p, g, env.horizon, env.max_step)
        ctx[i] = np.concatenate([p, g])
    x0 += jitter * rng.standard_normal(x0.shape)
    return x0, ctx


# ---------------------------------------------------------------------------
# Offline metrics


@dataclass
class MetricsReport:
    method: str
    K: int
    n_samples: int
    mse_mean: float
    mse_median: float
    mse_std: float
    mse_p90: float
    mse_p95: float
    cos_mean: float
    nfe_per_chunk: int
    n_diverged: int = 0
    wall_clock_per_chunk: Optional[float] = None
    per_sample_mse: np.ndarray = field(default=None, repr=False)
    per_sample_cos: np.ndarray = field(default=None, repr=False)

    @classmethod
    def from_samples(cls, method, K, mse, cos, nfe, n_diverged=0, wall=None):
        mse = np.asarray(mse, dtype=np.float64)
        cos = np.asarray(cos, dtype=np.float64)
        return cls(
            method=method, K=int(K), n_samples=int(mse.size),
            mse_mean=float(mse.mean()), mse_median=percentile(mse, 0.5),
            mse_std=float(mse.std()), mse_p90=percentile(mse, 0.9),
            mse_p95=percentile(mse, 0.95), cos_mean=float(cos.mean()),
            nfe_per_chunk=int(nfe), n_diverged=int(n_diverged),
            wall_clock_per_chunk=wall, per_sample_mse=mse, per_sample_cos=cos,
        )

    def summary(self) -> dict:
        d = asdict(self)
        for k in ("per_sample_mse", "per_sample_cos", "wall_clock_per_chunk"):
            d.pop(k)
        return d


def offline_metrics(
    field_fn: Callable,
    K: int,
    heldout,
    n_noise: int,
    rng: np.random.Generator,
    *,
    method: str = "",
    consistency: bool = False,
    timed: bool = False,
) -> MetricsReport:
    """Sample each held-out context ``n_noise`` times and score against its chunk.

    Per-sample MSE is the mean squared entry error over the ``H x D`` chunk.
    Samples whose trajectory turns non-finite are dropped and counted.
    """
    x0, ctx = heldout
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape[0] == 0:
        raise ValueError("empty held-out set")
    ref = np.repeat(x0, n_noise, axis=0)
    c = None if ctx is None else np.repeat(np.asarray(ctx), n_noise, axis=0)
    x1 = rng.standard_normal(ref.shape)
    counter = NFECounter()
    with np.errstate(all="ignore"):
        start = time.perf_counter()
        xhat = euler_sample(field_fn, x1, K, c, counter=counter,
                            consistency=consistency, check_finite=False)
        wall = (time.perf_counter() - start) / ref.shape[0] if timed else None
    ok = np.all(np.isfinite(xhat.reshape(xhat.shape[0], -1)), axis=1)
    err = (xhat[ok] - ref[ok]).reshape(int(ok.sum()), -1)
    mse = np.mean(err * err, axis=1)
    cos = batch_cosine(xhat[ok], ref[ok])
    return MetricsReport.from_samples(method, K, mse, cos, counter.calls,
                                      int((~ok).sum()), wall)


@dataclass
class SweepResult:
    kind: str
    rows: list
    reports: list = field(default_factory=list)

    def to_csv(self, path, header: Sequence[str] = ()) -> None:
        write_rows_csv(path, self.rows, header)

    def cell(self, **match) -> dict:
        for r in self.rows:
            if all(r.get(k) == v for k, v in match.items()):
                return r
        raise KeyError(match)


def write_rows_csv(path, rows: list, header: Sequence[str] = ()) -> None:
    with open(path, "w", newline="") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        if not rows:
            return
        w = csv.writer(fh, lineterminator="\n")
        keys = list(rows[0])
        w.writerow(keys)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in keys])


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def step_sweep(
    teacher: Callable,
    student: Callable,
    K_grid: Sequence[int],
    heldout,
    seed: int,
    *,
    n_noise: int = 1,
    timed: bool = False,
) -> SweepResult:
    """Offline metrics for both fields at every step count.

    Both methods at a given K see identical noise.  The student integrates
    with the target time set to the next grid point.
    """
    if not K_grid:
        raise ValueError("empty K grid")
    rows, reports = [], []
    methods = (("baseline", teacher, False), ("snapflow", student, True))
    base = {}
    for name, fn, cons in methods:
        for K in K_grid:
            rep = offline_metrics(fn, K, heldout, n_noise, make_rng(seed, 1000 + K),
                                  method=name, consistency=cons, timed=timed)
            reports.append(rep)
            if K == K_grid[0]:
                base[name] = rep
            ref = base[name]
            row = rep.summary()
            row["delta_mse_vs_first"] = rep.mse_mean / ref.mse_mean - 1.0
            row["delta_cos_vs_first"] = rep.cos_mean / ref.cos_mean - 1.0
            rows.append(row)
    return SweepResult("step_sweep", rows, reports)


# ---------------------------------------------------------------------------
# Closed loop


class SamplerPolicy:
    """Observation -> action chunk through a K-step sampler; counts NFE."""

    def __init__(self, field_fn: Callable, K: int, horizon: int, *,
                 consistency: bool = False, rng: Optional[np.random.Generator] = None):
        self.field_fn = field_fn
        self.K = K
        self.horizon = horizon
        self.consistency = consistency
        self.rng = rng if rng is not None else make_rng(0)
        self.counter = NFECounter()

    @property
    def nfe(self) -> int:
        return self.counter.calls

    def __call__(self, obs) -> np.ndarray:
        x1 = self.rng.standard_normal((1, self.horizon, 2))
        chunk = euler_sample(self.field_fn, x1, self.K, np.asarray(obs)[None],
                             counter=self.counter, consistency=self.consistency)
        return chunk[0]


@dataclass
class Rollout:
    success: bool
    steps: int
    steps_to_goal: Optional[int]
    replans: int
    nfe: int
    wall_clock: float


def rollout(policy: Callable, env: ToyEnv, n_act: int, start=None,
            rng: Optional[np.random.Generator] = None) -> Rollout:
    """Receding-horizon control: execute the first ``n_act`` actions, replan."""
    if not 1 <= n_act <= env.horizon:
        raise ValueError(f"n_act must be in [1, {env.horizon}]")
    if start is None:
        start = env.sample_start(rng if rng is not None else make_rng(0))
    env.reset(*start)
    nfe0 = getattr(policy, "nfe", 0)
    replans = 0
    t0 = time.perf_counter()
    while not env.done:
        chunk = policy(env.observe())
        replans += 1
        for a in chunk[:n_act]:
            env.step(a)
            if env.done:
                break
    wall = time.perf_counter() - t0
    return Rollout(env.success, env.t, env.first_hit, replans, getattr(policy, "nfe", 0) - nfe0, wall)


def nact_sweep(
    teacher: Callable,
    student: Callable,
    env: ToyEnv,
    n_act_grid: Sequence[int],
    episodes: int,
    seed: int,
    *,
    teacher_K: int = 10,
    student_K: int = 1,
) -> SweepResult:
    """Success rate and cost per (method, n_act) with paired starts and noise.

    With ``env.fixed_length`` every episode runs the full budget, so both
    methods replan the same number of times and episode NFE compares
    directly.
    """
    if episodes < 20:
        raise ValueError("need at least 20 episodes per cell")
    starts = [env.sample_start(make_rng(seed, 2000 + i)) for i in range(episodes)]
    methods = (("baseline", teacher, teacher_K, False), ("snapflow", student, student_K, True))
    rows, episodes_out = [], []
    for n_act in n_act_grid:
        for name, fn, K, cons in methods:
            results = []
            for i, start in enumerate(starts):
                pol = SamplerPolicy(fn, K, env.horizon, consistency=cons,
                                    rng=make_rng(seed, 100_000 + i))
                r = rollout(pol, env, n_act, start)
                results.append(r)
                episodes_out.append({"method": name, "n_act": n_act, "episode": i,
                                     "success": int(r.success), "steps": r.steps,
                                     "steps_to_goal": -1 if r.steps_to_goal is None else r.steps_to_goal,
                                     "replans": r.replans, "nfe": r.nfe})
            rows.append({
                "method": name, "n_act": n_act, "K": K, "episodes": episodes,
                "success_rate": float(np.mean([r.success for r in results])),
                "mean_steps": float(np.mean([r.steps for r in results])),
                "mean_steps_to_goal": _mean_hit(results),
                "total_replans": int(sum(r.replans for r in results)),
                "total_nfe": int(sum(r.nfe for r in results)),
                "nfe_per_replan": _ratio(sum(r.nfe for r in results), sum(r.replans for r in results)),
                "wall_clock_per_episode": float(np.mean([r.wall_clock for r in results])),
            })
    return SweepResult("nact_sweep", rows, episodes_out)


def _ratio(a, b) -> float:
    return float(a / b) if b else float("nan")


def _mean_hit(results) -> float:
    hits = [r.steps_to_goal for r in results if r.steps_to_goal is not None]
    return float(np.mean(hits)) if hits else float("nan")


def max_replans(budget: int, n_act: int) -> int:
    return math.ceil(budget / n_act)

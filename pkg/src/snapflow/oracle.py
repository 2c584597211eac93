"""Closed-form flow quantities for isotropic Gaussian mixtures.

For data ``x0 ~ sum_k w_k N(mu_k, sigma_k^2 I)`` and the linear path
``x_t = (1-t) x0 + t eps`` every component stays Gaussian, so the posterior
``p(x0 | x_t)`` is again a mixture with closed-form responsibilities, means
and variances.  From it we get the marginal velocity
``u_t(x) = (x - E[x0|x_t=x]) / t`` and the conditional covariance of the
path velocity ``Sigma_t(x) = Var(x0 | x_t=x) / t^2``.

The ``verify_*`` functions turn the drift/decomposition identities into
Monte Carlo checks with a 3-standard-error acceptance band.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.special import logsumexp

from .flow import rk4_integrate
from .numerics import mean_and_stderr

# Below this t the marginal velocity falls back to the t=0 limit -x.
T_EPS = 1e-9


class OracleError(ValueError):
    pass


@dataclass(frozen=True)
class MixtureSpec:
    weights: np.ndarray
    means: np.ndarray
    scales: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        sig = np.atleast_1d(np.asarray(self.scales, dtype=np.float64))
        if w.ndim != 1 or w.size < 1:
            raise OracleError("mixture needs at least one component")
        if mu.shape[0] != w.size or sig.shape != w.shape:
            raise OracleError(
                f"component count mismatch: weights {w.size}, means {mu.shape[0]}, "
                f"scales {sig.size}"
            )
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
            raise OracleError("weights must be positive and sum to 1")
        if np.any(sig < 0) or not np.all(np.isfinite(mu)):
            raise OracleError("scales must be >= 0 and means finite")
        distinct = np.unique(mu, axis=0).shape[0] > 1
        if not distinct and not np.any(sig > 0):
            raise OracleError("degenerate mixture: data distribution is a Dirac mass")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "scales", sig)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.weights.size

    @classmethod
    def single(cls, dim: int, mean: float = 0.0, scale: float = 1.0) -> "MixtureSpec":
        return cls([1.0], np.full((1, dim), mean), [scale])

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        k = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        return self.means[k] + self.scales[k, None] * z

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "scales": self.scales.tolist(),
        }


def _posterior(spec: MixtureSpec, x: np.ndarray, t: float):
    """Per-component posterior of x0 given x_t = x.

    Returns responsibilities ``(N, K)``, means ``(N, K, D)`` and the scalar
    per-dimension variances ``(K,)``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    a = 1.0 - t
    sig2 = spec.scales**2
    marg_var = a * a * sig2 + t * t
    centred = x[:, None, :] - a * spec.means[None, :, :]
    sq = np.einsum("nkd,nkd->nk", centred, centred)
    logp = (
        np.log(spec.weights)[None, :]
        - 0.5 * spec.dim * np.log(2 * np.pi * marg_var)[None, :]
        - 0.5 * sq / marg_var[None, :]
    )
    resp = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
    gain = a * sig2 / marg_var
    post_mean = spec.means[None, :, :] + gain[None, :, None] * centred
    post_var = sig2 * t * t / marg_var
    return resp, post_mean, post_var


def posterior_mean(spec: MixtureSpec, x: np.ndarray, t: float) -> np.ndarray:
    resp, m, _ = _posterior(spec, x, t)
    return np.einsum("nk,nkd->nd", resp, m)


def marginal_velocity(spec: MixtureSpec, x: np.ndarray, t: float) -> np.ndarray:
    """E[eps - x0 | x_t = x] for points ``x`` of shape ``(N, D)`` or ``(D,)``."""
    if not 0.0 <= t <= 1.0:
        raise OracleError(f"t must lie in [0, 1], got {t}")
    x_arr = np.asarray(x, dtype=np.float64)
    if t < T_EPS:
        return -x_arr
    out = (np.atleast_2d(x_arr) - posterior_mean(spec, x_arr, t)) / t
    return out.reshape(x_arr.shape)


def posterior_covariance(spec: MixtureSpec, x: np.ndarray, t: float) -> np.ndarray:
    """Full ``Var(x0 | x_t=x)`` matrices, shape ``(N, D, D)``."""
    resp, m, v = _posterior(spec, x, t)
    mean = np.einsum("nk,nkd->nd", resp, m)
    second = np.einsum("nk,nkd,nke->nde", resp, m, m)
    second += np.einsum("nk,k->n", resp, v)[:, None, None] * np.eye(spec.dim)
    return second - mean[:, :, None] * mean[:, None, :]


def _posterior_trace(spec: MixtureSpec, x: np.ndarray, t: float) -> np.ndarray:
    resp, m, v = _posterior(spec, x, t)
    mean = np.einsum("nk,nkd->nd", resp, m)
    second = np.einsum("nk,nkd,nkd->n", resp, m, m) + spec.dim * (resp @ v)
    # clamp tiny negative values from cancellation
    return np.maximum(second - np.einsum("nd,nd->n", mean, mean), 0.0)


def conditional_covariance(
    spec: MixtureSpec, x: np.ndarray, t: float, *, full: bool = False
):
    """``Sigma_t(x)`` reported as ``trace / D`` (or the full matrix).

    At t = 0 the path velocity given x0 is ``eps - x0``, so Sigma_0 = I.
    """
    if not 0.0 <= t <= 1.0:
        raise OracleError(f"t must lie in [0, 1], got {t}")
    x_arr = np.atleast_2d(np.asarray(x, dtype=np.float64))
    scalar_in = np.asarray(x).ndim == 1
    if full:
        if spec.dim > 4:
            raise OracleError("full-matrix mode is limited to D <= 4")
        if t < T_EPS:
            out = np.broadcast_to(np.eye(spec.dim), (x_arr.shape[0], spec.dim, spec.dim)).copy()
        else:
            out = posterior_covariance(spec, x_arr, t) / (t * t)
        return out[0] if scalar_in else out
    if t < T_EPS:
        out = np.ones(x_arr.shape[0])
    else:
        out = _posterior_trace(spec, x_arr, t) / (t * t * spec.dim)
    return float(out[0]) if scalar_in else out


def trace_a_sigma_at(spec: MixtureSpec, A: np.ndarray, x: np.ndarray, t: float) -> np.ndarray:
    """``tr(A Sigma_t(x) A^T)`` per row of ``x`` without forming Sigma."""
    if t < T_EPS:
        return np.full(np.atleast_2d(x).shape[0], float(np.sum(A * A)))
    resp, m, v = _posterior(spec, x, t)
    mean = np.einsum("nk,nkd->nd", resp, m)
    Am = np.einsum("ij,nkj->nki", A, m)
    Amean = mean @ A.T
    val = (
        np.einsum("nk,nki,nki->n", resp, Am, Am)
        + np.sum(A * A) * (resp @ v)
        - np.einsum("ni,ni->n", Amean, Amean)
    )
    return np.maximum(val, 0.0) / (t * t)


def sample_path(spec: MixtureSpec, t: float, n: int, rng: np.random.Generator):
    """Paired draws ``(x0, eps, x_t)`` on the linear path."""
    x0 = spec.sample(rng, n)
    eps = rng.standard_normal(x0.shape)
    return x0, eps, (1.0 - t) * x0 + t * eps


def expected_sigma_trace(spec: MixtureSpec, t: float, n_nodes: int = 48) -> float:
    """``E_{x_t}[tr Sigma_t(x_t)] / D`` by Gauss-Hermite quadrature.

    x_t is itself a Gaussian mixture, so the outer expectation is a sum of
    Gaussian integrals; tensor-product quadrature handles D <= 3.
    """
    if t < T_EPS:
        return 1.0
    if spec.dim > 3:
        raise OracleError("quadrature oracle supports D <= 3")
    z, wz = hermegauss(n_nodes)
    wz = wz / wz.sum()
    grids = np.meshgrid(*([z] * spec.dim), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=1)
    wts = np.ones(nodes.shape[0])
    for d in range(spec.dim):
        wts = wts * np.meshgrid(*([wz] * spec.dim), indexing="ij")[d].ravel()
    a = 1.0 - t
    total = 0.0
    for k in range(spec.n_components):
        sd = np.sqrt(a * a * spec.scales[k] ** 2 + t * t)
        pts = a * spec.means[k] + sd * nodes
        total += spec.weights[k] * float(wts @ conditional_covariance(spec, pts, t))
    return total


# ---------------------------------------------------------------------------
# Reports


@dataclass
class OracleReport:
    name: str
    t_grid: list
    analytic: list
    mc: list
    mc_stderr: list
    max_relative_gap: float
    passed: bool
    worst_index: Optional[int] = None
    tolerance_sigmas: float = 3.0
    labels: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @property
    def status(self) -> str:
        return "PASSED" if self.passed else "FAILED"


def _finish(name, grid, analytic, mc, se, tol, extra=None, positive=None, labels=None):
    analytic = np.asarray(analytic, dtype=np.float64)
    mc = np.asarray(mc, dtype=np.float64)
    se = np.asarray(se, dtype=np.float64)
    gap = np.abs(mc - analytic)
    z = gap / np.where(se > 0, se, np.inf)
    ok = gap <= tol * se
    if positive is not None:
        ok &= positive
    rel = gap / np.maximum(np.abs(analytic), 1e-300)
    worst = int(np.argmax(z)) if len(z) else None
    return OracleReport(
        name=name,
        t_grid=[float(v) for v in grid],
        analytic=analytic.tolist(),
        mc=mc.tolist(),
        mc_stderr=se.tolist(),
        max_relative_gap=float(rel.max()) if len(rel) else 0.0,
        passed=bool(np.all(ok)),
        worst_index=worst,
        tolerance_sigmas=float(tol),
        labels=list(labels or []),
        extra=extra or {},
    )


def verify_theorem1(
    spec: MixtureSpec,
    t_grid: Sequence[float],
    n_mc: int,
    rng: np.random.Generator,
    *,
    tol: float = 3.0,
) -> OracleReport:
    """The velocity covariance given x_t never vanishes.

    MC side: mean of ``||v - u_t(x_t)||^2 / D`` over paired path draws (law
    of total variance).  Analytic side: quadrature of the closed-form trace.
    """
    if n_mc < 10_000:
        raise OracleError("n_mc must be >= 1e4")
    analytic, mc, se, pos = [], [], [], []
    for t in t_grid:
        x0, eps, xt = sample_path(spec, t, n_mc, rng)
        resid = (eps - x0) - marginal_velocity(spec, xt, t)
        m, s = mean_and_stderr(np.sum(resid * resid, axis=1) / spec.dim)
        ref = expected_sigma_trace(spec, t)
        pointwise = conditional_covariance(spec, xt[:1000], t)
        analytic.append(ref)
        mc.append(m)
        se.append(s)
        pos.append(ref > 0 and m > 0 and bool(np.all(pointwise > 0)))
    return _finish(
        "theorem1", t_grid, analytic, mc, se, tol, positive=np.array(pos, dtype=bool)
    )


def verify_theorem2(
    spec: MixtureSpec,
    A: np.ndarray,
    fdot: np.ndarray,
    t: float,
    n_mc: int,
    rng: np.random.Generator,
    *,
    tol: float = 3.0,
) -> OracleReport:
    """Decomposition ``L_cond = L_consist + L_var`` for a linear probe ``f = A x``.

    Each draw contributes ``||A v + fdot||^2 - ||A u + fdot||^2 - tr(A Sigma A^T)``
    whose mean must be 0; the cross term ``2 (A u + fdot)^T A (v - u)`` must
    average to 0 as well.  The report grid holds the two zero-mean checks.
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    fdot = np.asarray(fdot, dtype=np.float64)
    x0, eps, xt = sample_path(spec, t, n_mc, rng)
    v = eps - x0
    u = marginal_velocity(spec, xt, t)
    av = v @ A.T + fdot
    au = u @ A.T + fdot
    l_cond = np.sum(av * av, axis=1)
    l_consist = np.sum(au * au, axis=1)
    l_var = trace_a_sigma_at(spec, A, xt, t)
    cross = 2.0 * np.sum(au * ((v - u) @ A.T), axis=1)
    resid_m, resid_se = mean_and_stderr(l_cond - l_consist - l_var)
    cross_m, cross_se = mean_and_stderr(cross)
    extra = {
        "t": float(t),
        "L_cond": float(l_cond.mean()),
        "L_consist": float(l_consist.mean()),
        "L_var": float(l_var.mean()),
        "cross_term": cross_m,
    }
    rep = _finish(
        "theorem2",
        [t, t],
        [0.0, 0.0],
        [resid_m, cross_m],
        [resid_se, cross_se],
        tol,
        extra,
        labels=["decomposition_residual", "cross_term"],
    )
    rep.max_relative_gap = float(abs(resid_m) / max(extra["L_cond"], 1e-300))
    return rep


# A probe supplies, per point, the student prediction F and the correction term
# Delta = (t - s) * dF along the flow.
Probe = Callable[[np.ndarray], tuple]


def affine_probe(B: np.ndarray, b: np.ndarray, C: np.ndarray, c: np.ndarray, s: float, t: float) -> Probe:
    def probe(x):
        return x @ B.T + b, (t - s) * (x @ C.T + c)

    return probe


def verify_a4_identity(
    spec: MixtureSpec,
    probe: Probe,
    t: float,
    n_mc: int,
    rng: np.random.Generator,
    *,
    tol: float = 3.0,
) -> OracleReport:
    """Swapping u_t for v_t in the residual adds only ``tr Sigma_t``.

    Checks ``mean(||F - v + Delta||^2 - ||F - u + Delta||^2 - tr Sigma_t) = 0``.
    """
    x0, eps, xt = sample_path(spec, t, n_mc, rng)
    v = eps - x0
    u = marginal_velocity(spec, xt, t)
    F, delta = probe(xt)
    rv = F - v + delta
    ru = F - u + delta
    lv = np.sum(rv * rv, axis=1)
    lu = np.sum(ru * ru, axis=1)
    tr = spec.dim * conditional_covariance(spec, xt, t)
    m, se = mean_and_stderr(lv - lu - tr)
    extra = {
        "t": float(t),
        "L_v": float(lv.mean()),
        "L_u": float(lu.mean()),
        "mean_trace_sigma": float(tr.mean()),
    }
    rep = _finish(
        "a4_identity", [t], [0.0], [m], [se], tol, extra, labels=["identity_residual"]
    )
    rep.max_relative_gap = float(abs(m) / max(extra["mean_trace_sigma"], 1e-300))
    return rep


# ---------------------------------------------------------------------------
# Cumulative-error identity along the marginal flow


def gaussian_flow_map(spec: MixtureSpec, x: np.ndarray, s: float, t: float) -> np.ndarray:
    """Exact marginal-ODE transport from t to s for a single-Gaussian spec."""
    if spec.n_components != 1:
        raise OracleError("exact transport is only closed-form for one component")
    mu, sig2 = spec.means[0], spec.scales[0] ** 2

    def sd(r):
        return np.sqrt((1 - r) ** 2 * sig2 + r * r)

    return (1 - s) * mu + (sd(s) / sd(t)) * (np.asarray(x) - (1 - t) * mu)


def reference_trajectory(spec: MixtureSpec, x_t: np.ndarray, s: float, t: float, n_steps: int):
    """Fine RK4 path of the marginal ODE from time t back to s.

    Returns ``(times, states)`` with times descending from t to s.
    """
    def vel(x, r):
        return marginal_velocity(spec, x, r)

    states = rk4_integrate(vel, np.atleast_2d(x_t), t, s, n_steps, keep_path=True)
    times = t + (s - t) * np.arange(n_steps + 1) / n_steps
    return times, states


@dataclass
class Theorem3Terms:
    direct: np.ndarray
    integral: np.ndarray
    residual_norms: np.ndarray
    times: np.ndarray

    @property
    def relative_gap(self) -> float:
        scale = max(float(np.linalg.norm(self.direct)), 1e-12)
        return float(np.linalg.norm(self.direct - self.integral) / scale)

    @property
    def error_bound(self) -> float:
        span = abs(self.times[0] - self.times[-1])
        return span * float(self.residual_norms.max())


def _simpson(values: np.ndarray, h: float) -> np.ndarray:
    n = values.shape[0] - 1
    if n % 2:
        raise ValueError("Simpson rule needs an even number of intervals")
    w = np.ones(n + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return (h / 3.0) * np.tensordot(w, values, axes=1)


def theorem3_terms(
    spec: MixtureSpec,
    flow_fn: Callable,
    x_t: np.ndarray,
    s: float,
    t: float,
    quad_steps: int = 1000,
    fd_step: float = 1e-4,
) -> Theorem3Terms:
    """Both sides of ``e(s,t) = int_s^t R(r) dr`` for a learned flow map.

    ``flow_fn(x, s, r)`` is the learned map f(x, s, r) on ``(N, D)`` points.
    The direct side compares it with the endpoint of a fine marginal-flow
    integration; the integral side accumulates the finite-difference
    residual ``R = d_r f + grad_x f . u_r`` along the same path (Simpson).
    """
    if quad_steps < 2 or quad_steps % 2:
        raise OracleError("quad_steps must be a positive even number")
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    times, states = reference_trajectory(spec, x_t, s, t, quad_steps)
    x_s = states[-1]
    direct = flow_fn(x_t, s, t) - x_s
    h = fd_step
    R = np.empty_like(states)
    for i, (r, x) in enumerate(zip(times, states)):
        u = marginal_velocity(spec, x, float(r))
        dfdr = (flow_fn(x, s, r + h) - flow_fn(x, s, r - h)) / (2 * h)
        jvp = (flow_fn(x + h * u, s, r) - flow_fn(x - h * u, s, r)) / (2 * h)
        R[i] = dfdr + jvp
    if not np.all(np.isfinite(R)):
        raise OracleError("non-finite residual along the reference path")
    # times run from t down to s; integrate in ascending r
    integral = _simpson(R[::-1], abs(t - s) / quad_steps)
    norms = np.linalg.norm(R.reshape(R.shape[0], -1), axis=1)
    return Theorem3Terms(direct=direct, integral=integral, residual_norms=norms, times=times)


def field_flow_map(field: Callable) -> Callable:
    """Adapt a velocity field ``F(x, s, t)`` on ``(N, D)`` points to ``f = x - (t-s) F``."""
    def f(x, s, r):
        return x - (r - s) * field(x, s, r)

    return f


def verify_theorem3(
    spec: MixtureSpec,
    field: Callable,
    s: float,
    t: float,
    quad_steps: int = 1000,
    *,
    probes: Optional[np.ndarray] = None,
    fd_step: float = 1e-4,
) -> float:
    """Max relative gap between the direct error and the integrated residual."""
    if not 0.0 <= s < t <= 1.0:
        raise OracleError("need 0 <= s < t <= 1")
    if quad_steps < 1000:
        raise OracleError("quad_steps must be >= 1000")
    if probes is None:
        probes = np.linspace(-1.0, 1.0, 3)[:, None] * np.ones((1, spec.dim))
    terms = theorem3_terms(spec, field_flow_map(field), probes, s, t, quad_steps, fd_step)
    gaps = np.linalg.norm(terms.direct - terms.integral, axis=1) / np.maximum(
        np.linalg.norm(terms.direct, axis=1), 1e-12
    )
    return float(gaps.max())

"""Flow-matching kinematics on action chunks.

Chunks are arrays of shape ``(B, H, D)`` (a leading batch axis is always
present).  A velocity field is any callable ``field(x, s, t, context)``
returning an array shaped like ``x``; ``s`` and ``t`` may be scalars or
length-``B`` arrays.  One call on a batch counts as one function evaluation
(NFE) per chunk.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

VelocityField = Callable[..., np.ndarray]


class DivergenceError(RuntimeError):
    pass


@dataclass
class FlowSample:
    x0: np.ndarray
    eps: np.ndarray
    t: np.ndarray
    xt: np.ndarray
    v_cond: np.ndarray


class NFECounter:
    """Counts field evaluations for one sampler invocation."""

    def __init__(self) -> None:
        self.calls = 0

    def __call__(self, field: VelocityField) -> VelocityField:
        def counted(x, s, t, context=None):
            self.calls += 1
            return field(x, s, t, context)

        return counted


def _bcast_time(t, x: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        return t
    return t.reshape((-1,) + (1,) * (x.ndim - 1))


def interpolate(x0: np.ndarray, eps: np.ndarray, t) -> FlowSample:
    """Linear path between data (t=0) and noise (t=1)."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: {x0.shape} vs {eps.shape}")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0.0) or np.any(t_arr > 1.0):
        raise ValueError("t must lie in [0, 1]")
    tb = _bcast_time(t_arr, x0)
    xt = (1.0 - tb) * x0 + tb * eps
    return FlowSample(x0=x0, eps=eps, t=t_arr, xt=xt, v_cond=eps - x0)


def flow_map(field: VelocityField, xt: np.ndarray, s, t, context=None) -> np.ndarray:
    """Jump from time ``t`` to ``s`` along the predicted average velocity."""
    s_arr = np.asarray(s, dtype=np.float64)
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(s_arr > t_arr):
        raise ValueError("flow_map requires s <= t")
    if np.any(s_arr < 0.0) or np.any(t_arr > 1.0):
        raise ValueError("flow_map requires 0 <= s <= t <= 1")
    span = _bcast_time(t_arr - s_arr, xt)
    return xt - span * field(xt, s, t, context)


def time_grid(K: int) -> np.ndarray:
    """Euler grid ``t_k = 1 - k/K`` for k = 0..K."""
    return 1.0 - np.arange(K + 1, dtype=np.float64) / K


def euler_sample(
    field: VelocityField,
    x1: np.ndarray,
    K: int,
    context=None,
    *,
    counter: Optional[NFECounter] = None,
    consistency: bool = False,
    check_finite: bool = True,
) -> np.ndarray:
    """Integrate from noise at t=1 down to t=0 with ``K`` Euler steps.

    With ``consistency=True`` each step queries the field with the target
    time set to the next grid point, ``field(x, t - dt, t)``, i.e. it chains
    flow-map jumps.  Otherwise the field is queried at ``s = t``.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    call = counter(field) if counter is not None else field
    grid = time_grid(K)
    x = np.asarray(x1, dtype=np.float64)
    for k in range(K):
        t, t_next = grid[k], grid[k + 1]
        s = t_next if consistency else t
        x = x - (t - t_next) * call(x, s, t, context)
        if check_finite and not np.all(np.isfinite(x)):
            raise DivergenceError(f"diverged at step {k}")
    return x


def one_nfe_sample(
    field: VelocityField,
    x1: np.ndarray,
    context=None,
    *,
    counter: Optional[NFECounter] = None,
) -> np.ndarray:
    """Single forward pass from noise to a chunk: ``x1 - F(x1, 0, 1)``."""
    call = counter(field) if counter is not None else field
    return flow_map(call, np.asarray(x1, dtype=np.float64), 0.0, 1.0, context)


def rk4_integrate(
    velocity: Callable[[np.ndarray, float], np.ndarray],
    x: np.ndarray,
    t_start: float,
    t_end: float,
    n_steps: int,
    *,
    keep_path: bool = False,
):
    """Classical RK4 for ``dx/dr = velocity(x, r)`` from ``t_start`` to ``t_end``.

    Used as the fine reference solver.  Returns the endpoint, or the full
    path of ``n_steps + 1`` states when ``keep_path`` is set.
    """
    h = (t_end - t_start) / n_steps
    x = np.asarray(x, dtype=np.float64)
    path = [x] if keep_path else None
    r = t_start
    for i in range(n_steps):
        k1 = velocity(x, r)
        k2 = velocity(x + 0.5 * h * k1, r + 0.5 * h)
        k3 = velocity(x + 0.5 * h * k2, r + 0.5 * h)
        k4 = velocity(x + h * k3, r + h)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        r = t_start + (i + 1) * h
        if keep_path:
            path.append(x)
    if keep_path:
        return np.stack(path)
    return x
